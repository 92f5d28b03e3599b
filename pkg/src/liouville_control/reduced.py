"""The reduced ensemble control problem: cost, gradients, optimality
residuals, and analytical probes.

Gradients discretize the continuous optimality system (optimize then
discretize): per time node and axis r,

    grad_u1^r = gamma u1^r + int d_r(rho) q dx
    grad_u2^r = gamma u2^r + int d_r(x^r rho) q dx

with the forward density rho and backward adjoint q on matched grids.  An
integrated-by-parts assembly (-int rho d_r q, -int x^r rho d_r q) is
computed as a cross-check and the worst discrepancy reported.  The sparsity
weight delta never enters the gradient; the proximal step in the optimizer
owns it.  For nu > 0 the gradient is expressed in the weighted H1 metric as
u + mu, where mu solves (-nu d^2/dt^2 + gamma) mu = integral path with zero
endpoint values.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .adjoint import AdjointTrajectory, sample_potential, solve_adjoint
from .controls import (
    BoxBounds,
    ControlPath,
    CostSpec,
    DriftPreset,
    DriftSpec,
    control_cost_terms,
    potential_eval,
    project_box,
)
from .errors import GridMismatch, NotApplicable
from .forward import StateTrajectory, required_substeps, solve_forward, solve_linearized, _Stepper
from .grid import (
    GridSpec,
    ScalarField,
    TimeGrid,
    partial_derivative,
    weighted_sobolev_norm,
)

__all__ = [
    "Problem",
    "GradientPath",
    "KktResidual",
    "ProbeReport",
    "path_dot",
    "path_norm",
    "reduced_cost",
    "reduced_gradient",
    "h1_riesz",
    "kkt_residual",
    "frechet_probe",
    "smallness_certificate",
    "shrink",
]


def _trapezoid_weights(timegrid: TimeGrid) -> np.ndarray:
    w = np.full(timegrid.nt + 1, timegrid.dt)
    w[0] = w[-1] = 0.5 * timegrid.dt
    return w


def path_dot(timegrid: TimeGrid, a: np.ndarray, b: np.ndarray) -> float:
    """Trapezoid L2(0,T) inner product of stacked node paths."""
    w = _trapezoid_weights(timegrid)
    return float((w[:, None] * a * b).sum())


def path_norm(timegrid: TimeGrid, a: np.ndarray) -> float:
    return math.sqrt(max(path_dot(timegrid, a, a), 0.0))


def shrink(values: np.ndarray, amount: float) -> np.ndarray:
    """Componentwise soft threshold."""
    return np.sign(values) * np.maximum(np.abs(values) - amount, 0.0)


@dataclass
class GradientPath:
    """Gradient of the reduced cost on the control nodes."""

    timegrid: TimeGrid
    u1: np.ndarray
    u2: np.ndarray
    metric: str = "L2"
    ibp_discrepancy: float = 0.0

    def stacked(self) -> np.ndarray:
        return np.hstack([self.u1, self.u2])


@dataclass(frozen=True)
class KktResidual:
    """Residuals of the first-order system with box and sparsity multipliers."""

    stationarity: float
    complement_upper: float
    complement_lower: float
    sign_consistency: float
    vi_residual: float

    def max_component(self) -> float:
        return max(
            self.stationarity,
            self.complement_upper,
            self.complement_lower,
            self.sign_consistency,
        )


@dataclass
class ProbeReport:
    """Container for differentiability / uniqueness probe outputs."""

    epsilons: tuple = ()
    remainders: tuple = ()
    slope: float = 0.0
    lipschitz_ratio: float | None = None
    smallness_K: float | None = None
    smallness_ratio: float | None = None
    passed: bool | None = None
    degenerate: bool | None = None


@dataclass
class Problem:
    """Bundle of everything a run needs: grid, horizon, data, and weights.

    ``g_eval`` is None or a callable t -> source values on the grid.
    """

    grid: GridSpec
    timegrid: TimeGrid
    rho0: ScalarField
    a0: DriftPreset
    cost: CostSpec
    bounds: BoxBounds
    g_eval: object = None
    scheme: str = "upwind-fv"
    cfl: float = 0.9
    stride: int = 1
    max_substeps: int = 4096
    diagnostics_norms: tuple = ((0, 2),)

    @property
    def control_dim(self) -> int:
        return self.grid.dim

    def initial_control(self) -> ControlPath:
        return project_box(ControlPath.zeros(self.timegrid, self.control_dim), self.bounds)

    def drift_for(self, control: ControlPath) -> DriftSpec:
        return DriftSpec(self.a0, control)

    def solve_forward_for(self, control: ControlPath, fixed_substeps=None) -> StateTrajectory:
        # memoize the few most recent solves; the optimizer evaluates cost
        # and gradient at the same control back to back
        key = None
        if fixed_substeps is None:
            key = control.stacked().tobytes()
            cache = getattr(self, "_fwd_cache", None)
            if cache is None:
                cache = self._fwd_cache = {}
            if key in cache:
                return cache[key]
        traj = solve_forward(
            self.rho0,
            self.drift_for(control),
            self.g_eval,
            self.timegrid,
            scheme=self.scheme,
            cfl=self.cfl,
            stride=self.stride,
            max_substeps=self.max_substeps,
            norms=self.diagnostics_norms,
            fixed_substeps=fixed_substeps,
        )
        if key is not None:
            if len(cache) >= 4:
                cache.pop(next(iter(cache)))
            cache[key] = traj
        return traj

    def solve_adjoint_for(self, control: ControlPath) -> AdjointTrajectory:
        return solve_adjoint(
            self.cost, self.drift_for(control), self.timegrid, self.grid, stride=self.stride
        )

    def reduced_cost(self, control: ControlPath) -> float:
        return reduced_cost(control, self)

    def descent_gradient(self, control: ControlPath) -> GradientPath:
        return reduced_gradient(control, self)


def reduced_cost(control: ControlPath, problem: Problem, trajectory: StateTrajectory | None = None) -> float:
    """J(G(u), u): running + terminal potential terms plus control costs."""
    traj = trajectory if trajectory is not None else problem.solve_forward_for(control)
    grid = problem.grid
    vol = grid.cell_volume
    dt = problem.timegrid.dt
    theta = problem.cost.theta
    running = 0.0
    if not theta.is_zero:
        times = []
        vals = []
        pts = grid.cell_centers()
        for n, rho in traj.stored_items():
            th = potential_eval(theta, pts, n * dt).reshape(grid.shape)
            times.append(n * dt)
            vals.append(float((th * rho).sum() * vol))
        running = float(np.trapezoid(np.asarray(vals), x=np.asarray(times)))
    terminal = 0.0
    if not problem.cost.phi.is_zero:
        phi = sample_potential(grid, problem.cost.phi, problem.timegrid.T)
        terminal = float((phi.values * traj.snapshots[-1]).sum() * vol)
    l2sq, l1, h1sq = control_cost_terms(control, problem.cost.l1_mode)
    return (
        running
        + terminal
        + 0.5 * problem.cost.gamma * l2sq
        + problem.cost.delta * l1
        + 0.5 * problem.cost.nu * h1sq
    )


def _adjoint_dense_ascending(traj_q: AdjointTrajectory):
    """Yield (n, q values) for n = 0..nt, buffering one backward segment of
    re-simulated steps at a time."""
    steps = traj_q.snapshot_steps
    for i, lo in enumerate(steps):
        yield lo, traj_q.snapshots[i]
        if i + 1 >= len(steps):
            break
        hi = steps[i + 1]
        if hi - lo <= 1:
            continue
        buffer = {}
        vals = traj_q.snapshots[i + 1]
        for n in range(hi - 1, lo, -1):
            vals = traj_q._advance_back(np.array(vals, copy=True), n + 1)
            buffer[n] = vals
        for n in range(lo + 1, hi):
            yield n, buffer[n]


def assemble_integral_path(problem: Problem, traj_rho: StateTrajectory, traj_q: AdjointTrajectory):
    """Per-node integral terms of the gradient, direct and integrated by
    parts; returns (stacked path (nt + 1, 2 d), worst discrepancy)."""
    grid = problem.grid
    if traj_q.grid != grid or traj_rho.grid != grid:
        raise GridMismatch("forward and adjoint runs live on different grids")
    if traj_q.timegrid != traj_rho.timegrid:
        raise GridMismatch("forward and adjoint runs use different time grids")
    tg = problem.timegrid
    d = grid.dim
    mesh = grid.meshgrid()
    vol = grid.cell_volume
    out = np.zeros((tg.nt + 1, 2 * d))
    disc = 0.0
    q_iter = _adjoint_dense_ascending(traj_q)
    for (n, rho_vals), (nq, q_vals) in zip(traj_rho.dense_values(), q_iter):
        rho = ScalarField(grid, rho_vals)
        q = ScalarField(grid, q_vals)
        for r in range(d):
            drho = partial_derivative(rho, r)
            i1 = float((drho.values * q.values).sum() * vol)
            xr_rho = ScalarField(grid, mesh[r] * rho.values)
            dxr = partial_derivative(xr_rho, r)
            i2 = float((dxr.values * q.values).sum() * vol)
            dq = partial_derivative(q, r)
            i1_ibp = -float((rho.values * dq.values).sum() * vol)
            i2_ibp = -float((xr_rho.values * dq.values).sum() * vol)
            disc = max(disc, abs(i1 - i1_ibp), abs(i2 - i2_ibp))
            out[n, r] = i1
            out[n, d + r] = i2
    return out, disc


def h1_riesz(rhs, gamma: float, nu: float, timegrid: TimeGrid) -> np.ndarray:
    """Solve (-nu d^2/dt^2 + gamma) mu = rhs with mu(0) = mu(T) = 0 by the
    three-point second difference on the time nodes (Thomas algorithm)."""
    if not nu > 0:
        raise NotApplicable("the H1 Riesz problem needs nu > 0")
    rhs = np.asarray(rhs, dtype=float)
    if hasattr(rhs, "stacked"):
        rhs = rhs.stacked()
    squeeze = rhs.ndim == 1
    if squeeze:
        rhs = rhs[:, None]
    nn = timegrid.nt + 1
    if rhs.shape[0] != nn:
        raise NotApplicable(f"rhs needs {nn} nodes")
    dt = timegrid.dt
    off = -nu / dt**2
    diag = gamma + 2.0 * nu / dt**2
    m = nn - 2
    mu = np.zeros_like(rhs)
    if m > 0:
        cp = np.zeros(m)
        b = rhs[1:-1].copy()
        cp[0] = off / diag
        b[0] = b[0] / diag
        for i in range(1, m):
            denom = diag - off * cp[i - 1]
            cp[i] = off / denom
            b[i] = (b[i] - off * b[i - 1]) / denom
        for i in range(m - 2, -1, -1):
            b[i] = b[i] - cp[i] * b[i + 1]
        mu[1:-1] = b
    return mu[:, 0] if squeeze else mu


def reduced_gradient(
    control: ControlPath,
    problem: Problem,
    traj_rho: StateTrajectory | None = None,
    traj_q: AdjointTrajectory | None = None,
) -> GradientPath:
    """Sparsity-free gradient of the reduced cost in the active metric."""
    if traj_rho is None:
        traj_rho = problem.solve_forward_for(control)
    if traj_q is None:
        traj_q = problem.solve_adjoint_for(control)
    integral, disc = assemble_integral_path(problem, traj_rho, traj_q)
    d = problem.control_dim
    if problem.cost.nu > 0:
        mu = h1_riesz(integral, problem.cost.gamma, problem.cost.nu, problem.timegrid)
        g = control.stacked() + mu
        metric = "H1tilde"
    else:
        g = problem.cost.gamma * control.stacked() + integral
        metric = "L2"
    return GradientPath(
        timegrid=problem.timegrid,
        u1=g[:, :d],
        u2=g[:, d:],
        metric=metric,
        ibp_discrepancy=disc,
    )


def kkt_residual(control: ControlPath, problem: Problem, multipliers: dict | None = None,
                 gradient: GradientPath | None = None, zero_tol: float = 1e-10) -> KktResidual:
    """Residuals of the coupled optimality system at a given control.

    Multipliers may be supplied (keys lambda_hat, lambda_plus,
    lambda_minus, stacked layout); otherwise they are reconstructed from
    the gradient: the sparsity multiplier is delta sign(u) off the zero set
    and the clipped stationarity residual on it, and the bound multipliers
    absorb the residual on the active sets.
    """
    if gradient is None:
        gradient = problem.descent_gradient(control)
    gf = gradient.stacked()
    u = control.stacked()
    ua, ub = problem.bounds.arrays()
    delta = problem.cost.delta
    tol_b = 1e-10

    if multipliers and "lambda_hat" in multipliers:
        lam_hat = np.asarray(multipliers["lambda_hat"], dtype=float)
    elif delta > 0:
        lam_hat = np.where(np.abs(u) > zero_tol, delta * np.sign(u), np.clip(-gf, -delta, delta))
    else:
        lam_hat = np.zeros_like(u)

    r = gf + lam_hat
    upper_active = u >= ub - tol_b
    lower_active = u <= ua + tol_b
    if multipliers and "lambda_plus" in multipliers:
        lam_p = np.asarray(multipliers["lambda_plus"], dtype=float)
        lam_m = np.asarray(multipliers["lambda_minus"], dtype=float)
    else:
        lam_p = np.where(upper_active, np.maximum(-r, 0.0), 0.0)
        lam_m = np.where(lower_active & ~upper_active, np.maximum(r, 0.0), 0.0)

    stationarity = float(np.abs(r + lam_p - lam_m).max())
    complement_upper = float(np.abs(lam_p * (ub - u)).max())
    complement_lower = float(np.abs(lam_m * (u - ua)).max())

    nonzero = np.abs(u) > zero_tol
    sign_err = 0.0
    if delta > 0:
        sign_err = max(
            float(np.abs((lam_hat - delta * np.sign(u)) * nonzero).max()),
            float((np.maximum(np.abs(lam_hat) - delta, 0.0) * ~nonzero).max()),
        )

    step = np.clip(shrink(u - gf, delta), ua, ub)
    vi = path_norm(problem.timegrid, u - step)
    return KktResidual(
        stationarity=stationarity,
        complement_upper=complement_upper,
        complement_lower=complement_lower,
        sign_consistency=sign_err,
        vi_residual=vi,
    )


def frechet_probe(
    control: ControlPath, direction: ControlPath, eps_ladder, problem: Problem
) -> ProbeReport:
    """Second-order Taylor remainder of the control-to-state map.

    Solves the linearized transport problem for the derivative state, then
    fits the slope of log ||G(u + eps du) - G(u) - eps DG(u) du|| against
    log eps.  All solves share one substep plan so the discrete map stays
    smooth across the ladder.
    """
    eps = [float(e) for e in eps_ladder]
    if len(eps) < 2 or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps ladder must be strictly decreasing")
    tg = problem.timegrid

    def control_plus(scale: float) -> ControlPath:
        # stay inside the admissible family; perturbations across the box
        # boundary are clipped, which is where second order is lost
        cand = ControlPath.from_stacked(tg, control.stacked() + scale * direction.stacked())
        return project_box(cand, problem.bounds)

    plan = None
    for cand in (control, control_plus(eps[0]), control_plus(-eps[0])):
        stepper = _Stepper(problem.grid, problem.drift_for(cand), None, problem.scheme)
        p = required_substeps(stepper, tg, problem.cfl)
        plan = p if plan is None else [max(a, b) for a, b in zip(plan, p)]

    base, wtraj = solve_linearized(
        problem.rho0,
        problem.drift_for(control),
        direction,
        problem.g_eval,
        tg,
        scheme=problem.scheme,
        cfl=problem.cfl,
        stride=problem.stride,
        max_substeps=problem.max_substeps,
        fixed_substeps=plan,
    )
    vol = problem.grid.cell_volume
    remainders = []
    for e in eps:
        traj_e = problem.solve_forward_for(control_plus(e), fixed_substeps=plan)
        worst = 0.0
        for (n, rho_e), (_, rho_0), (_, w) in zip(
            traj_e.stored_items(), base.stored_items(), wtraj.stored_items()
        ):
            diff = rho_e - rho_0 - e * w
            worst = max(worst, math.sqrt(float((diff * diff).sum() * vol)))
        remainders.append(worst)
    positive = [(e, r) for e, r in zip(eps, remainders) if r > 1e-250]
    if len(positive) >= 2:
        le = np.log([p[0] for p in positive])
        lr = np.log([p[1] for p in positive])
        A = np.vstack([le, np.ones_like(le)]).T
        slope = float(np.linalg.lstsq(A, lr, rcond=None)[0][0])
    else:
        slope = 0.0
    return ProbeReport(epsilons=tuple(eps), remainders=tuple(remainders), slope=slope)


def _source_norm_time_integral(problem: Problem, m: int, k: int, samples: int = 16) -> float:
    if problem.g_eval is None:
        return 0.0
    ts = np.linspace(0.0, problem.timegrid.T, samples + 1)
    vals = [
        weighted_sobolev_norm(ScalarField(problem.grid, problem.g_eval(t)), m, k) for t in ts
    ]
    return float(np.trapezoid(np.asarray(vals), x=ts))


def _potential_norm_time_integral(problem: Problem, pot, samples: int = 16) -> float:
    if pot.is_zero:
        return 0.0
    if not pot.time_dependent:
        return problem.timegrid.T * weighted_sobolev_norm(
            sample_potential(problem.grid, pot, 0.0), 1, 1
        )
    ts = np.linspace(0.0, problem.timegrid.T, samples + 1)
    vals = [
        weighted_sobolev_norm(sample_potential(problem.grid, pot, t), 1, 1) for t in ts
    ]
    return float(np.trapezoid(np.asarray(vals), x=ts))


def smallness_certificate(problem: Problem, C_universal: float = 1.0, horizon: float | None = None) -> ProbeReport:
    """Evaluate the uniqueness smallness constant from its closed formula
    with discrete norms of the data, and report the ratio K T / gamma with
    the pass threshold 2.

    The universal constant of the underlying estimate is not constructive;
    the caller supplies it (default 1), so the certificate is indicative
    rather than a proof.
    """
    T = problem.timegrid.T if horizon is None else float(horizon)
    grad_a0_l1 = T * sum(problem.a0.derivative_sup(problem.grid, o) for o in (1, 2, 3))
    bound_term = T * problem.bounds.max_radius()
    data_term = weighted_sobolev_norm(problem.rho0, 2, 2) + _source_norm_time_integral(problem, 2, 2)
    phi_norm = 0.0
    if not problem.cost.phi.is_zero:
        phi_norm = weighted_sobolev_norm(
            sample_potential(problem.grid, problem.cost.phi, T), 1, 1
        )
    pot_term = phi_norm + _potential_norm_time_integral(problem, problem.cost.theta)
    K = C_universal * math.exp(C_universal * (grad_a0_l1 + bound_term)) * data_term * pot_term
    ratio = K * T / problem.cost.gamma
    return ProbeReport(
        smallness_K=K,
        smallness_ratio=ratio,
        passed=bool(ratio < 2.0),
        degenerate=bool(ratio == 0.0),
    )
