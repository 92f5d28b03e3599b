"""Independent ground truths used to check the solvers.

The exact-density oracle integrates the characteristic flow of the affine
drift in closed form (per-axis scale and shift) and pushes the initial
density through the representation formula rho(t, x) =
rho0(psi_t^{-1}(x)) / det J(t).  The moment oracle integrates the mean and
variance ODEs mdot = u1 + m * u2, vdot = 2 v * u2 with RK4.  Both stay
entirely away from the PDE discretization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlPath, CostSpec, DriftSpec, Potential, control_cost_terms
from .errors import DegenerateProbe, UnsupportedDrift
from .grid import TimeGrid

__all__ = [
    "AffineFlow",
    "MomentPath",
    "affine_exact_density",
    "density_preset_eval",
    "moment_ode",
    "fd_directional_derivative",
    "lipschitz_probe",
    "fit_order",
    "MomentSurrogateProblem",
]

# Gauss-Legendre nodes/weights on [0, 1], 12 points: exact to ~1e-15 for
# the smooth per-segment flow integrands.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _axis_rates(drift: DriftSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis nodal alpha(t) = u1 + b and beta(t) = u2 + diag(A) for the
    decoupled linear ODE xdot = alpha + beta x; raises UnsupportedDrift for
    presets whose flow is not a per-axis closed form.
    """
    ctrl = drift.control
    d = ctrl.dim
    alpha = ctrl.u1.copy()
    beta = ctrl.u2.copy()
    a0 = drift.a0
    if a0.name == "zero":
        pass
    elif a0.name == "constant":
        alpha = alpha + np.broadcast_to(np.atleast_1d(a0.params.get("b", 0.0)), (d,))
    elif a0.name == "affine":
        A = np.asarray(a0.params.get("A"), dtype=float).reshape(d, d)
        if np.any(A != np.diag(np.diag(A))):
            raise UnsupportedDrift("exact flow needs a diagonal affine part")
        alpha = alpha + np.broadcast_to(np.atleast_1d(a0.params.get("b", 0.0)), (d,))
        beta = beta + np.diag(A)
    else:
        raise UnsupportedDrift(f"no exact flow for a0 preset {a0.name!r}")
    return alpha, beta


@dataclass
class AffineFlow:
    """Closed-form flow of xdot = alpha(t) + beta(t) x, per axis.

    psi_t(x0) = scale(t) * x0 + shift(t), with scale(0) = 1, shift(0) = 0
    and jacdet = prod(scale) > 0.
    """

    drift: DriftSpec

    def __post_init__(self):
        self._alpha, self._beta = _axis_rates(self.drift)
        self._tg = self.drift.control.timegrid

    def _beta_integral(self, t: float) -> np.ndarray:
        """B(t) = int_0^t beta, exact for piecewise-linear beta."""
        dt = self._tg.dt
        s = min(max(t / dt, 0.0), float(self._tg.nt))
        i = int(min(s, self._tg.nt - 1))
        beta = self._beta
        full = 0.5 * dt * (beta[:i] + beta[1 : i + 1]).sum(axis=0) if i > 0 else 0.0
        tau = (s - i) * dt
        b0 = beta[i]
        slope = (beta[i + 1] - beta[i]) / dt
        return full + b0 * tau + 0.5 * slope * tau * tau

    def scale(self, t: float) -> np.ndarray:
        return np.exp(self._beta_integral(t))

    def shift(self, t: float) -> np.ndarray:
        """b(t) = scale(t) * int_0^t exp(-B(s)) alpha(s) ds by per-segment
        Gauss quadrature."""
        dt = self._tg.dt
        s = min(max(t / dt, 0.0), float(self._tg.nt))
        nfull = int(s)
        acc = np.zeros(self.drift.control.dim)
        B_seg_start = np.zeros(self.drift.control.dim)
        for i in range(nfull + 1):
            seg_len = dt if i < nfull else (s - nfull) * dt
            if seg_len <= 0.0:
                break
            b0, b1 = self._beta[i], self._beta[min(i + 1, self._tg.nt)]
            a0, a1 = self._alpha[i], self._alpha[min(i + 1, self._tg.nt)]
            slope_b = (b1 - b0) / dt
            slope_a = (a1 - a0) / dt
            for xq, wq in zip(_GL_X, _GL_W):
                tau = xq * seg_len
                Bval = B_seg_start + b0 * tau + 0.5 * slope_b * tau * tau
                acc = acc + wq * seg_len * np.exp(-Bval) * (a0 + slope_a * tau)
            B_seg_start = B_seg_start + b0 * seg_len + 0.5 * slope_b * seg_len**2
        return np.exp(self._beta_integral(t)) * acc

    def jacdet(self, t: float) -> float:
        return float(np.prod(self.scale(t)))

    def map_inverse(self, t: float, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.shift(t)) / self.scale(t)

    def map_between(self, t0: float, t1: float, points: np.ndarray) -> np.ndarray:
        """psi_{t0 -> t1}(x): follow the flow from time t0 to time t1."""
        s0, s1 = self.scale(t0), self.scale(t1)
        b0, b1 = self.shift(t0), self.shift(t1)
        ratio = s1 / s0
        return ratio * (np.asarray(points, dtype=float) - b0) + b1


def density_preset_eval(preset: str, params: dict, points: np.ndarray) -> np.ndarray:
    """Analytic evaluation of an initial-density preset at arbitrary points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    d = pts.shape[-1]
    params = dict(params or {})

    def gauss(x0, v0):
        x0 = np.broadcast_to(np.atleast_1d(x0), (d,))
        sq = ((pts - x0) ** 2).sum(axis=-1)
        return (2.0 * np.pi * v0) ** (-d / 2.0) * np.exp(-sq / (2.0 * v0))

    if preset == "zero":
        return np.zeros(pts.shape[:-1])
    if preset == "constant":
        return np.full(pts.shape[:-1], float(params.get("c", 1.0)))
    if preset == "gaussian":
        return gauss(params.get("x0", 0.0), float(params.get("v0", 1.0)))
    if preset == "bimodal-gaussian":
        return float(params.get("wa", 0.5)) * gauss(
            params.get("x0a", -2.0), float(params.get("v0a", 0.5))
        ) + float(params.get("wb", 0.5)) * gauss(
            params.get("x0b", 2.0), float(params.get("v0b", 0.5))
        )
    raise UnsupportedDrift(f"no analytic density for preset {preset!r}")


def affine_exact_density(
    rho0_preset: str, rho0_params: dict, drift: DriftSpec, t: float, points: np.ndarray
) -> np.ndarray:
    """rho(t, x) through the representation formula, for integrable flows."""
    flow = AffineFlow(drift)
    back = flow.map_inverse(t, points)
    return density_preset_eval(rho0_preset, rho0_params, back) / flow.jacdet(t)


@dataclass
class MomentPath:
    """Mean and variance trajectories on the time nodes, each (nt + 1, d)."""

    timegrid: TimeGrid
    m: np.ndarray
    v: np.ndarray


def moment_ode(control: ControlPath, x0, v0, timegrid: TimeGrid | None = None) -> MomentPath:
    """RK4 integration of mdot = u1 + m * u2, vdot = 2 v * u2."""
    tg = timegrid or control.timegrid
    d = control.dim
    x0 = np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (d,))
    v0 = np.broadcast_to(np.atleast_1d(np.asarray(v0, dtype=float)), (d,))
    if np.any(v0 <= 0):
        raise ValueError("moment oracle needs v0 > 0")
    dt = tg.dt
    m = np.zeros((tg.nt + 1, d))
    v = np.zeros((tg.nt + 1, d))
    m[0], v[0] = x0, v0

    def rhs(t, mm, vv):
        u1, u2 = control.value_at(t)
        return u1 + mm * u2, 2.0 * vv * u2

    for i in range(tg.nt):
        t = i * dt
        k1m, k1v = rhs(t, m[i], v[i])
        k2m, k2v = rhs(t + dt / 2, m[i] + dt / 2 * k1m, v[i] + dt / 2 * k1v)
        k3m, k3v = rhs(t + dt / 2, m[i] + dt / 2 * k2m, v[i] + dt / 2 * k2v)
        k4m, k4v = rhs(t + dt, m[i] + dt * k3m, v[i] + dt * k3v)
        m[i + 1] = m[i] + dt / 6 * (k1m + 2 * k2m + 2 * k3m + k4m)
        v[i + 1] = v[i] + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return MomentPath(tg, m, v)


def fd_directional_derivative(problem, control: ControlPath, direction: ControlPath, eps: float) -> float:
    """Central difference (J(u + eps du) - J(u - eps du)) / (2 eps)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    ua, ub = problem.bounds.arrays()
    for sgn in (+1.0, -1.0):
        stacked = control.stacked() + sgn * eps * direction.stacked()
        if np.any(stacked < ua - 1e-12) or np.any(stacked > ub + 1e-12):
            raise ValueError("u +/- eps * direction leaves the admissible box")
    up = ControlPath.from_stacked(control.timegrid, control.stacked() + eps * direction.stacked())
    dn = ControlPath.from_stacked(control.timegrid, control.stacked() - eps * direction.stacked())
    return (problem.reduced_cost(up) - problem.reduced_cost(dn)) / (2.0 * eps)


def lipschitz_probe(problem, u: ControlPath, v: ControlPath) -> float:
    """max over stored times of ||G(u)(t) - G(v)(t)||_{L2} / int_0^t |u - v|."""
    diff = u.stacked() - v.stacked()
    speed = np.sqrt((diff * diff).sum(axis=1))
    dt = u.timegrid.dt
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dt * (speed[:-1] + speed[1:]))])
    if cum[-1] <= 0.0:
        raise DegenerateProbe("controls coincide; Lipschitz ratio undefined")
    tru = problem.solve_forward_for(u)
    trv = problem.solve_forward_for(v)
    vol = problem.grid.cell_volume
    ratio = 0.0
    for (nu_, fu), (nv_, fv) in zip(tru.stored_items(), trv.stored_items()):
        if nu_ == 0 or cum[nu_] <= 0.0:
            continue
        l2 = np.sqrt((((fu - fv) ** 2).sum()) * vol)
        ratio = max(ratio, float(l2 / cum[nu_]))
    return ratio


def fit_order(hs, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    lh = np.log(np.asarray(hs, dtype=float))
    le = np.log(np.maximum(np.asarray(errors, dtype=float), 1e-300))
    A = np.vstack([lh, np.ones_like(lh)]).T
    slope, _ = np.linalg.lstsq(A, le, rcond=None)[0]
    return float(slope)


# --- moment-restricted surrogate -------------------------------------------
#
# For a0 = 0 a gaussian stays gaussian under the affine flow, so the cost of
# a gaussian ensemble is an explicit function of (m(t), v(t)).  Minimizing
# that function over the same nodal controls gives an ODE-only reference for
# the PDE optimizer: a 2(nt + 1)-variable problem solved by the same
# proximal loop.


def _potential_gaussian_expectation(pot: Potential, m: float, v: float, t: float):
    """(E[pot(X)], dE/dm, dE/dv) for X ~ N(m, v), d = 1."""
    if pot.name == "zero":
        return 0.0, 0.0, 0.0
    if pot.name == "quadratic":
        return m * m + v, 2.0 * m, 1.0
    if pot.name == "tracking":
        xd = float(pot.target_at(t)[0])
        return (m - xd) ** 2 + v, 2.0 * (m - xd), 1.0
    if pot.name == "gaussian-well":
        s = np.exp(-m * m / (1.0 + 2.0 * v)) / np.sqrt(1.0 + 2.0 * v)
        ds_dm = s * (-2.0 * m / (1.0 + 2.0 * v))
        ds_dv = s * (-1.0 / (1.0 + 2.0 * v) + 2.0 * m * m / (1.0 + 2.0 * v) ** 2)
        return 1.0 - s, -ds_dm, -ds_dv
    raise UnsupportedDrift(f"no gaussian expectation for potential {pot.name!r}")


@dataclass
class MomentSurrogateProblem:
    """Gaussian-restricted twin of a d = 1 ensemble problem (a0 = 0).

    Exposes the same reduced_cost / descent_gradient / bounds protocol the
    optimizer consumes, so the identical proximal loop can minimize it.
    """

    timegrid: TimeGrid
    x0: float
    v0: float
    cost: CostSpec
    bounds: object
    control_dim: int = 1

    def reduced_cost(self, control: ControlPath) -> float:
        path = moment_ode(control, self.x0, self.v0, self.timegrid)
        tg = self.timegrid
        dt = tg.dt
        run = np.array(
            [
                _potential_gaussian_expectation(
                    self.cost.theta, float(path.m[i, 0]), float(path.v[i, 0]), i * dt
                )[0]
                for i in range(tg.nt + 1)
            ]
        )
        j = float(np.trapezoid(run, dx=dt))
        j += _potential_gaussian_expectation(
            self.cost.phi, float(path.m[-1, 0]), float(path.v[-1, 0]), tg.T
        )[0]
        l2sq, l1, h1sq = control_cost_terms(control, self.cost.l1_mode)
        return j + 0.5 * self.cost.gamma * l2sq + self.cost.delta * l1 + 0.5 * self.cost.nu * h1sq

    def descent_gradient(self, control: ControlPath):
        """delta-free L2 gradient via the backward adjoint of the moment ODEs."""
        tg = self.timegrid
        dt = tg.dt
        path = moment_ode(control, self.x0, self.v0, self.timegrid)
        m, v = path.m[:, 0], path.v[:, 0]
        lm = np.zeros(tg.nt + 1)
        lv = np.zeros(tg.nt + 1)
        _, dEm, dEv = _potential_gaussian_expectation(self.cost.phi, m[-1], v[-1], tg.T)
        lm[-1], lv[-1] = dEm, dEv

        def lrhs(i_node_t, mm, vv, lmm, lvv):
            u1, u2 = control.value_at(i_node_t)
            _, em, ev = _potential_gaussian_expectation(self.cost.theta, mm, vv, i_node_t)
            return -em - lmm * u2[0], -ev - 2.0 * lvv * u2[0]

        for i in range(tg.nt, 0, -1):
            t1 = i * dt
            t0 = t1 - dt
            tm = 0.5 * (t0 + t1)
            mmid, vmid = 0.5 * (m[i] + m[i - 1]), 0.5 * (v[i] + v[i - 1])
            k1m, k1v = lrhs(t1, m[i], v[i], lm[i], lv[i])
            k2m, k2v = lrhs(tm, mmid, vmid, lm[i] - 0.5 * dt * k1m, lv[i] - 0.5 * dt * k1v)
            lm[i - 1] = lm[i] - dt * k2m
            lv[i - 1] = lv[i] - dt * k2v
        g1 = self.cost.gamma * control.u1[:, 0] + lm
        g2 = self.cost.gamma * control.u2[:, 0] + lm * m + 2.0 * lv * v
        return ControlPath(tg, g1[:, None], g2[:, None])
