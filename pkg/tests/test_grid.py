import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from schrostrip.errors import InvalidArgument, NumericError
from schrostrip.grid import (
    BOTTOM,
    TOP,
    BoundaryTrace,
    div_c_grad,
    gradient,
    integrate_space,
    integrate_spacetime,
    integrate_trace,
    make_grid,
    normal_trace,
    normal_trace_values,
    time_derivative,
)


def test_make_grid_default_spacings():
    g = make_grid(L=6, d=1, T=1, nx=121, ny=21, nt=101, t_clamp=0.01)
    assert g.hy == pytest.approx(0.05, abs=1e-15)
    assert g.hx == pytest.approx(0.1, abs=1e-15)
    assert g.y[0] == -0.5 and g.y[-1] == 0.5
    assert g.dt * (g.nt - 1) == pytest.approx(1 - 0.01, abs=1e-14)


@pytest.mark.parametrize("kwargs", [
    dict(nx=3), dict(ny=4), dict(nt=7), dict(t_clamp=0.5), dict(L=0.0), dict(d=-1.0), dict(T=0.0),
    dict(span="half"),
])
def test_make_grid_rejects(kwargs):
    base = dict(L=6, d=1, T=1, nx=121, ny=21, nt=101, t_clamp=0.01)
    base.update(kwargs)
    with pytest.raises(InvalidArgument):
        make_grid(**base)


def test_full_span_covers_clamped_interval():
    g = make_grid(T=2.0, nt=41, t_clamp=0.1, span="full")
    assert g.t[0] == pytest.approx(-1.9) and g.t[-1] == pytest.approx(1.9)
    assert g.t[g.zero_index] == 0.0


def test_boundary_index_sets_are_separate(small_grid):
    idx = small_grid.boundary_indices()
    X, Y = small_grid.mesh
    assert np.all(Y[idx["gamma_plus"]] == 0.5)
    assert np.all(Y[idx["gamma_minus"]] == -0.5)
    assert np.all(X[idx["face_left"]] == -2.0)
    assert np.all(X[idx["face_right"]] == 2.0)


def test_refined_keeps_coarse_nodes(small_grid):
    fine = small_grid.refined(2)
    assert np.allclose(fine.x[::2], small_grid.x)
    assert np.allclose(fine.t[::2], small_grid.t)


# ------------------------------------------------------------------ quadrature


def test_integrate_constant_is_area():
    g = make_grid(L=1, d=1, nx=11, ny=7, nt=8)
    assert integrate_space(np.ones(g.space_shape), g) == pytest.approx(2.0, abs=1e-12)
    assert integrate_space(np.zeros(g.space_shape), g) == 0.0


def test_integrate_sin_squared_and_order():
    # sin^2(pi y/d) spans whole periods, where the trapezoid rule is exact
    errs_sin, errs_exp = [], []
    for n in (11, 21, 41):
        g = make_grid(L=2, d=1, nx=n, ny=n, nt=8)
        X, Y = g.mesh
        errs_sin.append(abs(integrate_space(np.sin(np.pi * Y) ** 2, g) - g.L * g.d))
        exact = 4.0 * (np.exp(0.5) - np.exp(-0.5))
        errs_exp.append(abs(integrate_space(np.exp(Y), g) - exact))
    assert max(errs_sin) <= 1e-12
    assert np.log2(errs_exp[-2] / errs_exp[-1]) == pytest.approx(2.0, abs=0.05)


def test_integrate_nan_raises(small_grid):
    f = np.ones(small_grid.space_shape)
    f[3, 3] = np.nan
    with pytest.raises(NumericError):
        integrate_space(f, small_grid)


def test_integrate_spacetime_constant():
    g = make_grid(L=1, d=1, T=1, nx=9, ny=9, nt=21, t_clamp=0.05, span="full")
    assert integrate_spacetime(np.ones(g.shape), g) == pytest.approx(2.0 * (2 - 0.1), abs=1e-12)
    gf = make_grid(L=1, d=1, T=1, nx=9, ny=9, nt=21, t_clamp=0.05)
    assert integrate_spacetime(np.ones(gf.shape), gf) == pytest.approx(2.0 * 0.95, abs=1e-12)
    assert integrate_spacetime(np.zeros(g.shape), g) == 0.0


def test_integrate_spacetime_separable_matches_1d_rules():
    g = make_grid(L=1.5, d=1, T=1, nx=17, ny=13, nt=15, t_clamp=0.05, span="full")
    fx, fy, ft = np.cos(g.x), np.exp(g.y), 1 + g.t**2
    field = ft[:, None, None] * fx[None, :, None] * fy[None, None, :]
    oracle = np.trapezoid(fx, g.x) * np.trapezoid(fy, g.y) * np.trapezoid(ft, g.t)
    assert integrate_spacetime(field, g) == pytest.approx(oracle, rel=1e-13)


def test_integrate_spacetime_level_range(small_full_grid):
    g = small_full_grid
    f = np.ones(g.shape)
    k = g.zero_index
    assert integrate_spacetime(f, g, levels=(0, k)) == pytest.approx(2 * 4.0 * (g.T - g.t_clamp) / 2, rel=1e-12)
    assert integrate_spacetime(f, g, levels=(k, k)) == 0.0
    with pytest.raises(InvalidArgument):
        integrate_spacetime(f, g, levels=(3, 1))


def test_integrate_trace_constant(small_grid):
    vals = np.ones((small_grid.nt, small_grid.nx))
    assert integrate_trace(vals, small_grid) == pytest.approx(4.0 * 0.95, rel=1e-12)


@given(a=arrays(float, (21, 11), elements=st.floats(-10, 10)),
       b=arrays(float, (21, 11), elements=st.floats(-10, 10)),
       alpha=st.floats(-5, 5))
def test_quadrature_linear_and_positive(a, b, alpha):
    g = make_grid(L=2.0, d=1.0, T=1.0, nx=21, ny=11, nt=11, t_clamp=0.05)
    lhs = integrate_space(alpha * a + b, g)
    rhs = alpha * integrate_space(a, g) + integrate_space(b, g)
    assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(alpha)) * 100)
    assert integrate_space(np.abs(a) ** 2, g) >= 0.0


# ------------------------------------------------------------------ differences


def test_div_c_grad_harmonic_and_quadratic(small_grid):
    g = small_grid
    X, Y = g.mesh
    one = np.ones(g.space_shape)
    inner = (slice(1, -1), slice(1, -1))
    assert np.max(np.abs(div_c_grad(one, Y, g)[inner])) <= 1e-12
    assert np.allclose(div_c_grad(one, X**2 + Y**2, g)[inner], 4.0, atol=1e-9)
    assert np.allclose(div_c_grad(one, X**2 + Y**2, g), 4.0, atol=1e-9)  # edge stencils exact on quadratics


def test_div_c_grad_variable_coefficient_order():
    # c = exp(-y), q = cos(pi y): d_y(c q_y) = pi e^{-y} sin(pi y) - pi^2 e^{-y} cos(pi y)
    errs = []
    for n in (11, 21, 41):
        g = make_grid(L=1, d=1, nx=9, ny=n, nt=8)
        X, Y = g.mesh
        exact = np.pi * np.exp(-Y) * np.sin(np.pi * Y) - np.pi**2 * np.exp(-Y) * np.cos(np.pi * Y)
        errs.append(np.max(np.abs(div_c_grad(np.exp(-Y), np.cos(np.pi * Y), g) - exact)))
    assert np.log2(errs[-2] / errs[-1]) >= 1.9


def test_div_c_grad_grid_mismatch(small_grid):
    with pytest.raises(InvalidArgument):
        div_c_grad(np.ones((5, 5)), np.ones(small_grid.space_shape), small_grid)
    with pytest.raises(InvalidArgument):
        gradient(np.ones((5, 5)), small_grid)


def test_gradient_exact_on_quadratics(small_grid):
    X, Y = small_grid.mesh
    gx, gy = gradient(X**2 + 3 * X * Y, small_grid)
    assert np.allclose(gx, 2 * X + 3 * Y, atol=1e-10)
    assert np.allclose(gy, 3 * X, atol=1e-10)


def test_time_derivative_quadratic_exact(small_full_grid):
    g = small_full_grid
    f = np.broadcast_to((g.t**2)[:, None, None], g.shape)
    assert np.allclose(time_derivative(f, g), np.broadcast_to((2 * g.t)[:, None, None], g.shape), atol=1e-10)


def _dirichlet_pair(g):
    X, Y = g.mesh
    u = np.cos(np.pi * X / (2 * g.L)) * np.cos(np.pi * Y / g.d)
    w = np.sin(np.pi * X / g.L) * np.cos(3 * np.pi * Y / g.d) + 0.5 * u
    return u, w


def test_discrete_integration_by_parts_order():
    res = []
    for n in (41, 81, 161):
        g = make_grid(L=1, d=1, nx=n, ny=n, nt=8)
        X, Y = g.mesh
        c = 1 + 0.3 * np.exp(-X**2) * (1 + Y)
        u, w = _dirichlet_pair(g)
        ux, uy = gradient(u, g)
        wx, wy = gradient(w, g)
        res.append(abs(integrate_space(w * div_c_grad(c, u, g), g) + integrate_space(c * (ux * wx + uy * wy), g)))
    assert res[-1] < res[-2] < res[-3]
    assert np.log2(res[-2] / res[-1]) >= 1.9


@given(seed=st.integers(0, 2**31 - 1))
def test_div_c_grad_symmetric_for_dirichlet_fields(seed):
    g = make_grid(L=1, d=1, nx=9, ny=7, nt=8)
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.5, 2.0, g.space_shape)
    u = rng.normal(size=g.space_shape) + 1j * rng.normal(size=g.space_shape)
    w = rng.normal(size=g.space_shape) + 1j * rng.normal(size=g.space_shape)
    u[g.boundary_mask] = 0
    w[g.boundary_mask] = 0
    a = integrate_space(np.conj(w) * div_c_grad(c, u, g), g)
    b = np.conj(integrate_space(np.conj(u) * div_c_grad(c, w, g), g))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


# ------------------------------------------------------------------ normal traces


def test_normal_trace_of_linear_field(small_grid):
    X, Y = small_grid.mesh
    assert np.allclose(normal_trace_values(Y, small_grid, TOP), 1.0, atol=1e-12)
    assert np.allclose(normal_trace_values(Y, small_grid, BOTTOM), -1.0, atol=1e-12)


def test_normal_trace_sin_converges_to_zero():
    errs = []
    for n in (11, 21, 41):
        g = make_grid(L=1, d=1, nx=9, ny=n, nt=8)
        X, Y = g.mesh
        errs.append(np.max(np.abs(normal_trace_values(np.sin(np.pi * Y), g, TOP))))
    assert errs[-1] < 1e-2
    assert np.log2(errs[-2] / errs[-1]) >= 1.9


def test_normal_trace_rejects_bad_input(small_grid):
    with pytest.raises(InvalidArgument):
        normal_trace_values(np.ones(small_grid.space_shape), small_grid, side="left")
    with pytest.raises(InvalidArgument):
        normal_trace_values(np.ones((small_grid.nx, 2)), small_grid)
    with pytest.raises(InvalidArgument):
        normal_trace(np.ones(small_grid.space_shape), small_grid)


def test_normal_trace_space_time(small_grid):
    X, Y = small_grid.mesh
    q = np.broadcast_to(Y * 1j, small_grid.shape)
    tr = normal_trace(q, small_grid, TOP)
    assert isinstance(tr, BoundaryTrace) and tr.values.shape == (small_grid.nt, small_grid.nx)
    assert np.allclose(tr.values, 1j)


def test_boundary_trace_validation(small_grid):
    with pytest.raises(InvalidArgument):
        BoundaryTrace(TOP, np.zeros((3, 3)), small_grid)
    bad = np.zeros((small_grid.nt, small_grid.nx))
    bad[0, 0] = np.inf
    with pytest.raises(NumericError):
        BoundaryTrace(TOP, bad, small_grid)
