import mpmath as mp
import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from schrostrip.errors import DomainError, InvalidArgument, NotApplicable
from schrostrip.grid import make_grid
from schrostrip.presets import AnalyticField, beta_preset, coefficient_preset, x, y
from schrostrip.weights import (
    WeightParams,
    build_beta,
    build_weights,
    check_admissible_pair,
    check_beta_assumptions,
    check_coefficient_assumptions,
    pseudoconvexity_constant,
    pseudoconvexity_form,
    pseudoconvexity_matrices,
)

EXAMPLE_C = coefficient_preset("paper_example")
EXP_Y = beta_preset("exp_y")


@pytest.fixture(scope="module")
def grid():
    return make_grid(L=6, d=1, T=1, nx=61, ny=21, nt=101, t_clamp=0.01)


@pytest.fixture(scope="module")
def full_grid():
    return make_grid(L=3, d=1, T=1, nx=31, ny=11, nt=41, t_clamp=0.01, span="full")


# ------------------------------------------------------------------ beta and weights


def test_build_beta_exp_y(grid):
    beta = build_beta(EXP_Y.on_grid(grid), 2.0)
    assert np.allclose(beta[:, -1], 3 * np.exp(0.5), rtol=1e-14)
    assert np.min(beta) > 0


def test_build_beta_constant_and_bad_m(grid):
    assert np.all(build_beta(np.ones(grid.space_shape), 2.0) == 3.0)
    with pytest.raises(InvalidArgument):
        build_beta(np.ones(grid.space_shape), 1.0)
    with pytest.raises(InvalidArgument):
        WeightParams(lam=0.0, s=1.0)
    with pytest.raises(InvalidArgument):
        WeightParams(lam=1.0, s=-1.0)


def test_weights_at_time_zero(full_grid):
    W = build_weights(EXP_Y, full_grid, lam=1.0, s=10.0)
    k = full_grid.zero_index
    assert W.K == pytest.approx(2 * np.exp(0.5), rel=1e-14)
    assert np.allclose(W.phi()[k], np.exp(W.beta) / full_grid.T**2, rtol=1e-14)
    assert np.allclose(W.phi0, W.phi()[k], rtol=1e-14)


def test_weights_even_in_time_and_positive(full_grid):
    W = build_weights(EXP_Y, full_grid, lam=1.0, s=10.0)
    eta, phi = W.eta(), W.phi()
    assert np.array_equal(eta, eta[::-1])
    assert np.array_equal(phi, phi[::-1])
    assert np.min(eta) > 0 and np.min(phi) > 0


def test_level_selection_matches_full_fields(full_grid):
    W = build_weights(EXP_Y, full_grid, lam=1.0, s=10.0)
    sl = slice(5, 12)
    assert np.array_equal(W.weight(2.0, sl), W.weight(2.0)[sl])
    assert np.array_equal(W.grad_eta(sl)[1], W.grad_eta()[1][sl])
    assert np.array_equal(W.dt_eta(sl), W.dt_eta()[sl])
    assert np.array_equal(W.phi_inv(sl), W.phi_inv()[sl])


def test_weight_decay_at_clamped_end(grid):
    """exp(-2 s eta) phi^3 at t = T - t_clamp is below 1e-30 (lam = 1, s = 10, beta_tilde = e^y)."""
    W = build_weights(EXP_Y, grid, lam=1.0, s=10.0)
    log_val = -2 * W.s * W.eta()[-1] + 3 * np.log(W.phi()[-1])
    # independent high-precision oracle at the node where eta is smallest (y = d/2)
    mp.mp.dps = 50
    T, t = mp.mpf(1), mp.mpf(1) - mp.mpf("0.01")
    K = 2 * mp.e ** mp.mpf("0.5")
    beta = mp.e ** mp.mpf("0.5") + K
    theta = 1 / ((T + t) * (T - t))
    oracle = mp.e ** (-20 * (mp.e ** (2 * K) - mp.e ** beta) * theta) * (mp.e ** beta * theta) ** 3
    assert float(np.max(log_val)) == pytest.approx(float(mp.log(oracle)), rel=1e-12)
    assert oracle < mp.mpf("1e-30")
    assert np.max(log_val) < np.log(1e-30)


def test_weights_outside_time_range_raise():
    from schrostrip.weights import _theta
    with pytest.raises(DomainError):
        _theta(np.array([1.0]), 1.0)


def _fd_order(quantity):
    # the time derivative of eta is still pre-asymptotic on the 21/41 pair
    errs = []
    for n in (41, 81, 161):
        g = make_grid(L=2, d=1, T=1, nx=n, ny=n, nt=n, t_clamp=0.05, span="full")
        W = build_weights(EXP_Y, g, lam=1.0, s=1.0)
        errs.append(quantity(W, g))
    return np.log2(errs[-2] / errs[-1])


def test_analytic_derivatives_match_finite_differences():
    def grad_eta_err(W, g):
        eta = W.eta()[g.zero_index + 3]
        ex, ey = W.grad_eta()
        fy = np.gradient(eta, g.hy, axis=-1, edge_order=2)
        return np.max(np.abs(fy - ey[g.zero_index + 3]))

    def dt_eta_err(W, g):
        # away from the clamped ends, where eta varies on the scale T - |t|
        mid = np.abs(g.t) <= 0.5
        return np.max(np.abs(np.gradient(W.eta(), g.dt, axis=0, edge_order=2) - W.dt_eta())[mid])

    def grad_phi_err(W, g):
        px, py = W.grad_phi()
        return np.max(np.abs(np.gradient(W.phi(), g.hy, axis=-1, edge_order=2) - py))

    for q in (grad_eta_err, dt_eta_err, grad_phi_err):
        assert _fd_order(q) >= 1.9


def test_gradient_identities(full_grid):
    W = build_weights(EXP_Y, full_grid, lam=0.7, s=3.0)
    ex, ey = W.grad_eta()
    px, py = W.grad_phi()
    assert np.allclose(ex, -px) and np.allclose(ey, -py)
    assert np.allclose(ey, -0.7 * W.phi() * W.beta_y)


@given(lam=st.floats(0.2, 2.0), s=st.floats(0.5, 40.0), m=st.floats(1.1, 4.0))
def test_eta_minimized_at_time_zero(lam, s, m):
    g = make_grid(L=2, d=1, T=1, nx=9, ny=7, nt=21, t_clamp=0.05, span="full")
    W = build_weights(EXP_Y, g, lam=lam, s=s, m=m)
    eta = W.eta()
    k = g.zero_index
    assert np.all(eta >= eta[k][None] * (1 - 1e-14))
    assert np.all(np.diff(eta[k:], axis=0) > 0)
    assert np.all(W.weight(2.0) <= W.weight0(2.0)[None] * (1 + 1e-12))
    assert np.min(eta) > 0 and np.min(W.phi()) > 0


# ------------------------------------------------------------------ assumption checks


def test_example_coefficient_passes(grid):
    rep = check_coefficient_assumptions(EXAMPLE_C, grid)
    assert rep.passed
    assert rep.c_min_est >= np.exp(-0.5)


def test_constant_coefficient_passes(grid):
    rep = check_coefficient_assumptions(coefficient_preset("constant:1"), grid)
    assert rep.passed and rep.c_min_est == 1.0


def test_vanishing_coefficient_fails_with_witness(grid):
    rep = check_coefficient_assumptions(coefficient_preset("expr:y"), grid)
    assert not rep.flags["positivity"]
    assert rep.witness["positivity"][1] == pytest.approx(0.0, abs=grid.hy)


def test_array_coefficient_uses_finite_differences(grid):
    rep = check_coefficient_assumptions(EXAMPLE_C.on_grid(grid), grid)
    assert rep.passed and rep.notes["derivatives"] == "finite-difference"


def test_beta_sign_condition(grid):
    ok = check_beta_assumptions(EXAMPLE_C, EXP_Y, grid)
    assert ok.flags["sign_gamma_minus"] and ok.passed
    bad = check_beta_assumptions(EXAMPLE_C, beta_preset("expr:exp_neg_y"), grid)
    assert not bad.flags["sign_gamma_minus"]
    assert bad.witness["sign_gamma_minus"][1] == -0.5


def test_beta_gamma_minus_normal_derivative_value(grid):
    # outward normal on Gamma- is -y: d_nu e^y = -e^{-1/2}, d_nu e^{-y} = +e^{1/2}
    assert -EXP_Y.on_grid(grid, dy=1)[0, 0] == pytest.approx(-np.exp(-0.5))
    assert -beta_preset("expr:exp_neg_y").on_grid(grid, dy=1)[0, 0] == pytest.approx(np.exp(0.5))


def test_constant_beta_fails_gradient_bound(grid):
    rep = check_beta_assumptions(EXAMPLE_C, beta_preset("expr:one"), grid)
    assert not rep.flags["gradient_lower_bound"]


def test_pseudoconvexity_example_pair_positive(grid):
    assert pseudoconvexity_constant(EXAMPLE_C, EXP_Y, grid) > 0


def test_pseudoconvexity_constant_c_fails(grid):
    one = coefficient_preset("constant:1")
    assert pseudoconvexity_constant(one, EXP_Y, grid) <= 1e-12
    form = pseudoconvexity_form(one, EXP_Y, grid, np.array([1.0, 0.0]))
    assert np.max(np.abs(form)) <= 1e-12


def test_pseudoconvexity_degenerate_beta(grid):
    assert pseudoconvexity_constant(EXAMPLE_C, beta_preset("expr:one"), grid) == 0.0


@given(theta=st.floats(0, 2 * np.pi), re=st.tuples(st.floats(-3, 3), st.floats(-3, 3)),
       im=st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_pseudoconvexity_form_phase_invariant(theta, re, im):
    g = make_grid(L=2, d=1, nx=9, ny=7, nt=8)
    zeta = np.array(re) + 1j * np.array(im)
    f0 = pseudoconvexity_form(EXAMPLE_C, EXP_Y, g, zeta)
    f1 = pseudoconvexity_form(EXAMPLE_C, EXP_Y, g, np.exp(1j * theta) * zeta)
    scale = 1 + np.max(np.abs(f0))
    assert np.max(np.abs(f0 - f1)) <= 1e-10 * scale
    # the matrix representation evaluates the same form
    A = pseudoconvexity_matrices(EXAMPLE_C, EXP_Y, g)
    via_matrix = np.einsum("i,...ij,j->...", np.conj(zeta), A, zeta).real
    assert np.max(np.abs(via_matrix - f0)) <= 1e-10 * scale


def test_pseudoconvexity_needs_analytic_input(grid):
    with pytest.raises(InvalidArgument):
        pseudoconvexity_constant(EXAMPLE_C.on_grid(grid), EXP_Y, grid)


def test_admissible_pair(grid):
    rep = check_admissible_pair(EXAMPLE_C, EXP_Y, grid)
    assert rep.passed and rep.r0_est > 0
    assert not check_admissible_pair(coefficient_preset("constant:1"), EXP_Y, grid).flags["first_inequality"]
    assert not check_admissible_pair(coefficient_preset("expr:exp_y"), EXP_Y, grid).flags["first_inequality"]


def test_admissible_pair_needs_y_only_beta(grid):
    with pytest.raises(NotApplicable):
        check_admissible_pair(EXAMPLE_C, AnalyticField("xy", sp.exp(y) + x / 10), grid)
