import math

import numpy as np
import pytest

from liouville_control import (
    BoxBounds,
    ControlPath,
    CostSpec,
    DriftPreset,
    GridMismatch,
    NotApplicable,
    Potential,
    Problem,
    fd_directional_derivative,
    fit_order,
    frechet_probe,
    h1_riesz,
    kkt_residual,
    make_grid,
    make_timegrid,
    optimize,
    path_dot,
    reduced_cost,
    reduced_gradient,
    sample_function,
    sample_potential,
    smallness_certificate,
)
from liouville_control.optimize import OptimConfig
from liouville_control.reduced import assemble_integral_path


def build_problem(n=128, nt=64, gamma=1.0, delta=0.0, nu=0.0, theta=None, phi=None,
                  x0=0.0, v0=1.0, scheme="upwind-fv", radius=2.0):
    g = make_grid(1, -8, 8, n)
    tg = make_timegrid(1.0, nt)
    return Problem(
        grid=g,
        timegrid=tg,
        rho0=sample_function(g, "gaussian", {"x0": x0, "v0": v0}),
        a0=DriftPreset("zero"),
        cost=CostSpec(
            gamma=gamma, delta=delta, nu=nu,
            theta=theta or Potential("zero"), phi=phi or Potential("zero"),
        ),
        bounds=BoxBounds.symmetric(radius, 1),
        scheme=scheme,
    )


def test_reduced_cost_zero_everything():
    prob = build_problem()
    assert reduced_cost(ControlPath.zeros(prob.timegrid, 1), prob) == 0.0


def test_reduced_cost_frozen_state_terminal_term():
    prob = build_problem(phi=Potential("gaussian-well"))
    u = ControlPath.zeros(prob.timegrid, 1)
    phi = sample_potential(prob.grid, prob.cost.phi, prob.timegrid.T)
    expected = float((phi.values * prob.rho0.values).sum() * prob.grid.cell_volume)
    assert reduced_cost(u, prob) == pytest.approx(expected, rel=1e-13)


def test_reduced_cost_pure_control_terms():
    prob = build_problem(gamma=2.0, delta=0.3)
    c = 0.4
    u = ControlPath.constant(prob.timegrid, [c], [0.0])
    expected = 0.5 * 2.0 * c * c * 1.0 + 0.3 * c * 1.0
    assert reduced_cost(u, prob) == pytest.approx(expected, rel=1e-13)


def test_gradient_is_gamma_u_for_zero_potentials():
    prob = build_problem(gamma=1.7)
    rng = np.random.default_rng(0)
    u = ControlPath(prob.timegrid, 0.5 * rng.normal(size=(65, 1)), 0.5 * rng.normal(size=(65, 1)))
    grad = reduced_gradient(u, prob)
    assert np.abs(grad.stacked() - 1.7 * u.stacked()).max() < 1e-14
    assert grad.metric == "L2"


def test_gradient_symmetry_zero_for_even_data():
    prob = build_problem(phi=Potential("gaussian-well"), theta=Potential("gaussian-well"))
    u = ControlPath.zeros(prob.timegrid, 1)
    grad = reduced_gradient(u, prob)
    # u1 channel pairs an odd integrand over a symmetric grid
    assert np.abs(grad.u1).max() < 1e-10


def test_gradient_matches_fd_and_improves_with_resolution():
    theta = Potential.tracking([[0.0, 0.0], [0.5, 0.4], [1.0, 0.7]])

    def rel_err(n):
        prob = build_problem(n=n, nt=128, gamma=0.1, theta=theta,
                             phi=Potential("gaussian-well"), scheme="muscl-fv")
        tg = prob.timegrid
        u = ControlPath.constant(tg, [0.2], [0.1])
        t = tg.nodes()
        d = ControlPath(tg, np.sin(np.pi * t)[:, None], 0.5 * np.cos(2 * np.pi * t)[:, None])
        fd = fd_directional_derivative(prob, u, d, 1e-4)
        an = path_dot(tg, reduced_gradient(u, prob).stacked(), d.stacked())
        return abs(fd - an) / abs(fd)

    e128, e256 = rel_err(128), rel_err(256)
    assert e256 < 5e-2
    assert e256 < e128


def test_ibp_cross_check_small_and_shrinking():
    theta = Potential.tracking([[0.0, 0.0], [1.0, 0.5]])

    def disc(n):
        prob = build_problem(n=n, nt=64, gamma=0.2, theta=theta, phi=Potential("gaussian-well"))
        u = ControlPath.constant(prob.timegrid, [0.3], [0.1])
        return reduced_gradient(u, prob).ibp_discrepancy

    d128, d256 = disc(128), disc(256)
    assert d256 < 1e-3
    assert d256 < d128


def test_assemble_rejects_grid_mismatch():
    prob = build_problem(n=128, nt=64)
    other = build_problem(n=64, nt=64)
    u = ControlPath.zeros(prob.timegrid, 1)
    traj = prob.solve_forward_for(u)
    qtraj = other.solve_adjoint_for(u)
    with pytest.raises(GridMismatch):
        assemble_integral_path(prob, traj, qtraj)


def test_h1_riesz_basics():
    tg = make_timegrid(1.0, 64)
    assert np.all(h1_riesz(np.zeros(65), 1.0, 0.5, tg) == 0.0)
    with pytest.raises(NotApplicable):
        h1_riesz(np.zeros(65), 1.0, 0.0, tg)


def test_h1_riesz_manufactured_solution_order_two():
    errs = []
    nts = [64, 128, 256, 512]
    gamma, nu = 1.0, 0.5
    for nt in nts:
        tg = make_timegrid(1.0, nt)
        t = tg.nodes()
        rhs = (nu * math.pi**2 + gamma) * np.sin(np.pi * t)
        mu = h1_riesz(rhs, gamma, nu, tg)
        errs.append(np.abs(mu - np.sin(np.pi * t)).max())
    order = fit_order([1.0 / nt for nt in nts], errs)
    assert order == pytest.approx(2.0, abs=0.2)


def test_h1_riesz_small_nu_interior_limit():
    tg = make_timegrid(1.0, 128)
    t = tg.nodes()
    rhs = np.cos(2 * np.pi * t)
    mu = h1_riesz(rhs, 2.0, 1e-8, tg)
    interior = slice(16, -16)
    assert np.abs(mu[interior] - rhs[interior] / 2.0).max() < 1e-4


def test_h1_riesz_spd_and_linear():
    rng = np.random.default_rng(8)
    tg = make_timegrid(1.0, 48)
    f = rng.normal(size=49)
    g = rng.normal(size=49)
    Rf = h1_riesz(f, 1.3, 0.7, tg)
    Rg = h1_riesz(g, 1.3, 0.7, tg)
    assert float(Rf[1:-1] @ f[1:-1]) > 0.0
    mix = h1_riesz(2.0 * f - 3.0 * g, 1.3, 0.7, tg)
    assert np.abs(mix - (2.0 * Rf - 3.0 * Rg)).max() < 1e-12


def test_gradient_h1_metric_uses_riesz_representative():
    theta = Potential.tracking([[0.0, 0.0], [1.0, 0.4]])
    prob = build_problem(nu=0.05, gamma=0.5, theta=theta, phi=Potential("gaussian-well"),
                         scheme="muscl-fv")
    u = ControlPath.constant(prob.timegrid, [0.2], [0.1])
    grad = reduced_gradient(u, prob)
    assert grad.metric == "H1tilde"
    # directional derivative in the weighted H1 inner product matches fd
    t = prob.timegrid.nodes()
    d = ControlPath(prob.timegrid, np.sin(np.pi * t)[:, None], np.sin(2 * np.pi * t)[:, None])
    fd = fd_directional_derivative(prob, u, d, 1e-4)
    dt = prob.timegrid.dt
    sg = np.diff(grad.stacked(), axis=0) / dt
    sd = np.diff(d.stacked(), axis=0) / dt
    h1dot = prob.cost.gamma * path_dot(prob.timegrid, grad.stacked(), d.stacked())
    h1dot += prob.cost.nu * float((sg * sd).sum() * dt)
    assert h1dot == pytest.approx(fd, rel=5e-2)


def test_kkt_zero_at_unconstrained_stationary_point():
    prob = build_problem(gamma=1.0)
    res = kkt_residual(ControlPath.zeros(prob.timegrid, 1), prob)
    assert res.stationarity == 0.0
    assert res.vi_residual == 0.0
    assert res.max_component() == 0.0


def test_kkt_zero_control_stationary_under_large_delta():
    theta = Potential.tracking([[0.0, 0.0], [1.0, 0.3]])
    prob = build_problem(gamma=1.0, delta=5.0, theta=theta, phi=Potential("gaussian-well"))
    u = ControlPath.zeros(prob.timegrid, 1)
    grad = reduced_gradient(u, prob)
    assert np.abs(grad.stacked()).max() < 5.0  # premise: delta dominates
    res = kkt_residual(u, prob, gradient=grad)
    assert res.vi_residual == 0.0
    assert res.stationarity < 1e-12
    assert res.sign_consistency == 0.0


def test_kkt_active_upper_bound():
    # saturate the box, then check the multiplier bookkeeping
    theta = Potential.tracking([[0.0, 2.0], [1.0, 2.0]])  # strong pull upward
    prob = build_problem(gamma=0.05, theta=theta, phi=Potential("zero"), radius=0.2, scheme="muscl-fv")
    res = optimize(prob, OptimConfig(max_iters=60, vi_tol=1e-6, step0=2.0))
    u = res.control.stacked()
    # all but the final node saturate; the adjoint vanishes at T (phi = 0),
    # so the last node is stationary at zero instead
    assert np.abs(u[:-1, 0] - 0.2).max() < 1e-12
    kkt = res.kkt
    assert kkt.vi_residual <= 1e-6
    assert kkt.complement_upper < 1e-10
    assert kkt.stationarity < 1e-6


def test_kkt_accepts_supplied_multipliers():
    prob = build_problem(gamma=1.0, delta=0.5)
    u = ControlPath.zeros(prob.timegrid, 1)
    grad = reduced_gradient(u, prob)
    nn = prob.timegrid.nt + 1
    lam = {"lambda_hat": np.full((nn, 2), 0.7), "lambda_plus": np.zeros((nn, 2)),
           "lambda_minus": np.zeros((nn, 2))}
    res = kkt_residual(u, prob, multipliers=lam, gradient=grad)
    assert res.sign_consistency == pytest.approx(0.2, abs=1e-14)  # |0.7| - 0.5 on the zero set
    assert res.stationarity == pytest.approx(0.7, abs=1e-14)


def test_frechet_probe_zero_direction():
    prob = build_problem(n=64, nt=32)
    u = ControlPath.constant(prob.timegrid, [0.2], [0.1])
    rep = frechet_probe(u, ControlPath.zeros(prob.timegrid, 1), [0.2, 0.1, 0.05, 0.025], prob)
    assert all(r == 0.0 for r in rep.remainders)


def test_frechet_probe_slope_two_interior():
    prob = build_problem(n=256, nt=256, x0=2.0, v0=0.5, gamma=0.1)
    tg = prob.timegrid
    u = ControlPath.constant(tg, [0.5], [0.25])
    t = tg.nodes()
    d = ControlPath(tg, np.sin(np.pi * t)[:, None], 0.3 * np.cos(np.pi * t)[:, None])
    rep = frechet_probe(u, d, [0.2, 0.1, 0.05, 0.025], prob)
    assert 1.8 <= rep.slope <= 2.2
    assert all(b < a for a, b in zip(rep.remainders, rep.remainders[1:]))


def test_frechet_probe_degrades_across_box_boundary():
    # at the box corner every positive perturbation is clipped away entirely:
    # the remainder becomes eps * ||DG du||, first order
    prob = build_problem(n=128, nt=64, x0=2.0, v0=0.5, radius=0.5)
    tg = prob.timegrid
    u = ControlPath.constant(tg, [0.5], [0.5])  # at the corner
    d = ControlPath.constant(tg, [1.0], [0.5])  # points outward
    rep = frechet_probe(u, d, [0.2, 0.1, 0.05, 0.025], prob)
    assert rep.slope < 1.3


def test_frechet_probe_validates_ladder():
    prob = build_problem(n=64, nt=32)
    u = ControlPath.zeros(prob.timegrid, 1)
    with pytest.raises(ValueError):
        frechet_probe(u, u, [0.1, 0.2], prob)


def test_smallness_certificate_limits():
    theta = Potential.tracking([[0.0, 0.0], [1.0, 0.3]])
    prob = build_problem(gamma=1e9, theta=theta, phi=Potential("gaussian-well"), v0=0.5)
    rep = smallness_certificate(prob, C_universal=1.0)
    assert rep.passed
    assert rep.smallness_ratio < 1e-3
    rep0 = smallness_certificate(prob, C_universal=1.0, horizon=0.0)
    assert rep0.smallness_ratio == 0.0
    assert rep0.degenerate
    small = build_problem(gamma=0.01, theta=theta, phi=Potential("gaussian-well"))
    assert not smallness_certificate(small, C_universal=1.0).passed


def test_smallness_ratio_scales_inversely_with_gamma():
    theta = Potential.tracking([[0.0, 0.0], [1.0, 0.3]])
    r1 = smallness_certificate(build_problem(gamma=1.0, theta=theta), 1.0).smallness_ratio
    r2 = smallness_certificate(build_problem(gamma=2.0, theta=theta), 1.0).smallness_ratio
    assert r1 == pytest.approx(2.0 * r2, rel=1e-12)
