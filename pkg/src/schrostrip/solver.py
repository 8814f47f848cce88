"""Crank-Nicolson solver for i q_t + div(c grad q) = f on the truncated strip.

One complex sparse LU factorization of (i/dt) I + A/2 is computed per
coefficient and reused for every time step (and, conjugated, for the adjoint
sweep of the inversion module).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
import sympy as sp

from .errors import InvalidArgument, NotApplicable, NumericError
from .grid import TOP, BoundaryTrace, StripGrid, div_c_grad, normal_trace_values, time_derivative
from .presets import AnalyticField, t as sym_t, x as sym_x, y as sym_y

COMPAT_TOL = 1e-10


def interior_operator(c, grid: StripGrid):
    """Sparse matrix of the flux-form div(c grad .) on interior nodes (row-major, y fastest)."""
    c = np.asarray(c, dtype=float)
    mx, my = grid.nx - 2, grid.ny - 2
    cxh = 0.5 * (c[1:, 1:-1] + c[:-1, 1:-1]) / grid.hx**2  # (nx-1, my) faces in x
    cyh = 0.5 * (c[1:-1, 1:] + c[1:-1, :-1]) / grid.hy**2  # (mx, ny-1) faces in y
    diag = -(cxh[1:] + cxh[:-1]) - (cyh[:, 1:] + cyh[:, :-1])
    east = cxh[1:-1]  # coupling (i, j) <-> (i+1, j) for interior i
    north = cyh[:, 1:-1]  # coupling (i, j) <-> (i, j+1)
    n = mx * my
    north_flat = np.zeros((mx, my))
    north_flat[:, :-1] = north
    main = diag.ravel()
    offy = north_flat.ravel()[:-1]
    offx = east.ravel()
    return sps.diags([main, offy, offy, offx, offx], [0, 1, -1, my, -my], shape=(n, n), format="csc")


def flux_interior(c, q, grid: StripGrid):
    """Interior values of the flux-form operator applied to the full field q (..., nx, ny)."""
    c = np.asarray(c, dtype=float)
    cxh = 0.5 * (c[1:, :] + c[:-1, :])
    cyh = 0.5 * (c[:, 1:] + c[:, :-1])
    fx = cxh * (q[..., 1:, :] - q[..., :-1, :])
    fy = cyh * (q[..., :, 1:] - q[..., :, :-1])
    return ((fx[..., 1:, 1:-1] - fx[..., :-1, 1:-1]) / grid.hx**2
            + (fy[..., 1:-1, 1:] - fy[..., 1:-1, :-1]) / grid.hy**2)


class CrankNicolson:
    """Factorized time stepper for a fixed coefficient on a fixed grid."""

    def __init__(self, c, grid: StripGrid):
        c = np.asarray(c, dtype=float)
        if c.shape != grid.space_shape:
            raise InvalidArgument("coefficient does not match grid")
        if not np.all(np.isfinite(c)) or np.min(c) <= 0:
            raise InvalidArgument("coefficient must be finite and positive")
        self.c = c
        self.grid = grid
        self.A = interior_operator(c, grid)
        n = self.A.shape[0]
        self.M = (1j / grid.dt) * sps.identity(n, format="csc") + 0.5 * self.A
        try:
            self.lu = spla.splu(self.M.tocsc())
        except RuntimeError as exc:
            raise NumericError(f"Crank-Nicolson matrix is singular (condition estimate: inf): {exc}") from exc
        diag = self.lu.U.diagonal()
        if np.min(np.abs(diag)) < 1e-14 * np.max(np.abs(diag)):
            cond = float(np.max(np.abs(diag)) / np.min(np.abs(diag)))
            raise NumericError(f"Crank-Nicolson matrix is ill-conditioned (estimate {cond:.3e})")

    @property
    def interior_shape(self):
        return (self.grid.nx - 2, self.grid.ny - 2)

    def solve(self, rhs_interior):
        return self.lu.solve(rhs_interior.ravel()).reshape(self.interior_shape)

    def solve_adjoint(self, rhs_interior):
        """Solve M^H z = rhs; M^H = conj(M) because A is real symmetric."""
        return np.conj(self.lu.solve(np.conj(rhs_interior).ravel())).reshape(self.interior_shape)

    def run(self, q0, boundary, source=None):
        """March all levels; ``boundary(n)`` and ``source(n)`` return full (nx, ny) arrays."""
        g = self.grid
        out = np.empty(g.shape, dtype=complex)
        out[0] = q0
        idt = 1j / g.dt
        for n in range(g.nt - 1):
            cur = out[n]
            nxt_b = np.array(boundary(n + 1), dtype=complex)
            nxt_b[1:-1, 1:-1] = 0.0
            rhs = idt * cur[1:-1, 1:-1] - 0.5 * flux_interior(self.c, cur, g) - 0.5 * flux_interior(self.c, nxt_b, g)
            if source is not None:
                rhs = rhs + 0.5 * (source(n)[1:-1, 1:-1] + source(n + 1)[1:-1, 1:-1])
            nxt_b[1:-1, 1:-1] = self.solve(rhs)
            out[n + 1] = nxt_b
        return out


def _level_getter(data, grid, name, default=None):
    if data is None:
        return default
    if callable(data):
        return lambda n: np.asarray(data(grid.t[n]))
    arr = np.asarray(data)
    if arr.shape == grid.space_shape:
        return lambda n: arr
    if arr.shape != grid.shape:
        raise InvalidArgument(f"{name} has shape {arr.shape}, expected {grid.shape} or {grid.space_shape}")
    return lambda n: arr[n]


@dataclass(frozen=True, eq=False)
class ForwardProblem:
    """Data of i q_t + div(c grad q) = f, q = b on the boundary, q(0) = q0.

    ``boundary`` and ``source`` may be None (b = q0 on the boundary for all t,
    f = 0), a space-time array, a spatial array (time independent) or a
    callable of t returning a spatial array.
    """

    c: np.ndarray
    q0: np.ndarray
    boundary: object = None
    source: object = None


def solve_forward(problem: ForwardProblem, grid: StripGrid) -> np.ndarray:
    if grid.span != "forward":
        raise InvalidArgument("forward solves need a grid starting at t = 0")
    q0 = np.asarray(problem.q0, dtype=complex)
    if q0.shape != grid.space_shape:
        raise InvalidArgument("initial data does not match grid")
    b = _level_getter(problem.boundary, grid, "boundary", default=lambda n: q0)
    f = _level_getter(problem.source, grid, "source")
    b0 = np.asarray(b(0))
    mask = grid.boundary_mask
    scale = max(1.0, float(np.max(np.abs(q0))))
    if np.max(np.abs(b0[mask] - q0[mask]), initial=0.0) > COMPAT_TOL * scale:
        raise InvalidArgument("initial data and boundary data disagree at t = 0")
    stepper = CrankNicolson(problem.c, grid)
    return stepper.run(q0, b, f)


def steady_lift(c, boundary_values, grid: StripGrid):
    """Discrete steady state: div(c grad w) = 0 at interior nodes, w = boundary_values on the boundary.

    Starting from this state the background problem stays exactly stationary,
    so time differences of the solution carry no grid-scale oscillation.
    """
    b = np.array(boundary_values, dtype=complex)
    if b.shape != grid.space_shape:
        raise InvalidArgument("boundary values do not match grid")
    b[1:-1, 1:-1] = 0.0
    A = interior_operator(c, grid)
    rhs = -flux_interior(c, b, grid).ravel()
    w = b.copy()
    w[1:-1, 1:-1] = spla.spsolve(A.tocsc(), rhs).reshape(grid.nx - 2, grid.ny - 2)
    if not np.isrealobj(boundary_values):
        return w
    return w.real


def discrete_l2_norm(q, grid: StripGrid):
    """Trapezoidal L2 norm per level."""
    return np.sqrt(np.einsum("...ij,i,j->...", np.abs(q) ** 2, grid.wx, grid.wy))


def manufactured_rhs(q_exact: AnalyticField, c: AnalyticField, grid: StripGrid):
    """Source, boundary data and initial data that make ``q_exact`` an exact solution.

    Returns (f, b, q0) with f and b of shape (nt, nx, ny) and q0 of shape (nx, ny).
    """
    if not isinstance(q_exact, AnalyticField) or not isinstance(c, AnalyticField):
        raise InvalidArgument("manufactured_rhs needs registered analytic presets")
    q = q_exact.expr
    f_expr = (sp.I * sp.diff(q, sym_t)
              + sp.diff(c.expr * sp.diff(q, sym_x), sym_x)
              + sp.diff(c.expr * sp.diff(q, sym_y), sym_y))
    f_field = AnalyticField(f"H[{q_exact.name}]", f_expr)
    f = f_field.on_spacetime(grid).astype(complex)
    b = q_exact.on_spacetime(grid).astype(complex)
    return f, b, b[0].copy()


def _tilde_gamma(c, c_tilde, grid):
    c = np.asarray(c, dtype=float)
    gamma = np.asarray(c_tilde, dtype=float) - c
    if gamma.shape != grid.space_shape:
        raise InvalidArgument("coefficients do not match grid")
    return c, gamma


def solve_difference_u(c, c_tilde, q_tilde, grid: StripGrid) -> np.ndarray:
    """u = q - q_tilde from i u_t + div(c grad u) = div(gamma grad q_tilde), zero data."""
    c, gamma = _tilde_gamma(c, c_tilde, grid)
    src = div_c_grad(gamma, q_tilde, grid)
    zero = np.zeros(grid.space_shape, dtype=complex)
    return CrankNicolson(c, grid).run(zero, lambda n: zero, lambda n: src[n])


def initial_v(gamma, q0, grid: StripGrid):
    """v(., 0) = (1/i) div(gamma grad q0), zero on the boundary."""
    v0 = -1j * div_c_grad(gamma, np.asarray(q0), grid)
    v0[grid.boundary_mask] = 0.0
    return v0


def solve_v(c, gamma, q_tilde, q0, grid: StripGrid, initial_kind: str = "real") -> np.ndarray:
    """v = d_t u from i v_t + div(c grad v) = div(gamma grad d_t q_tilde), v(0) = (1/i) div(gamma grad q0).

    d_t q_tilde is the second-order time difference of the stored solution.
    """
    q0 = np.asarray(q0)
    if initial_kind == "real":
        if np.iscomplexobj(q0) and np.any(q0.imag != 0):
            raise NotApplicable("q0 must be real valued for the odd-conjugate extension")
        q0 = np.real(q0)
    elif initial_kind == "imaginary":
        if np.iscomplexobj(q0) and np.any(q0.real != 0):
            raise NotApplicable("q0 must be purely imaginary for initial_kind='imaginary'")
    else:
        raise InvalidArgument(f"unknown initial_kind {initial_kind!r}")
    gamma = np.asarray(gamma, dtype=float)
    f = source_v(gamma, q_tilde, grid)
    v0 = initial_v(gamma, q0, grid)
    zero = np.zeros(grid.space_shape, dtype=complex)
    return CrankNicolson(c, grid).run(v0, lambda n: zero, lambda n: f[n])


def source_v(gamma, q_tilde, grid: StripGrid):
    """f = div(gamma grad d_t q_tilde) with second-order time differencing."""
    return div_c_grad(np.asarray(gamma, dtype=float), time_derivative(q_tilde, grid), grid)


def extend_time(v, grid: StripGrid, initial_kind: str = "real", tol: float = 1e-10):
    """Extend v from [0, T) to (-T, T).

    real initial data:      v(-t) = -conj(v(t))   (requires Re v(0) = 0)
    imaginary initial data: v(-t) =  conj(v(t))   (requires Im v(0) = 0)
    Returns (v_ext, full_grid).
    """
    v = np.asarray(v)
    if grid.span != "forward" or v.shape[0] != grid.nt:
        raise InvalidArgument("extend_time expects a field on a forward grid")
    scale = max(float(np.max(np.abs(v))), np.finfo(float).tiny)
    if initial_kind == "real":
        sign, bad = -1.0, np.max(np.abs(v[0].real))
    elif initial_kind == "imaginary":
        sign, bad = 1.0, np.max(np.abs(v[0].imag))
    else:
        raise InvalidArgument(f"unknown initial_kind {initial_kind!r}")
    if bad > tol * scale:
        raise InvalidArgument(f"v(0) violates the extension condition (relative size {bad / scale:.2e})")
    full = grid.extended()
    out = np.empty((full.nt,) + v.shape[1:], dtype=complex)
    n = grid.nt
    out[n - 1:] = v
    out[:n - 1] = sign * np.conj(v[:0:-1])
    out[n - 1] = v[0]
    return out, full


def restrict_time(v_ext, full: StripGrid):
    """Inverse of extend_time: the t >= 0 half on the matching forward grid."""
    if full.span != "full" or full.nt % 2 == 0:
        raise InvalidArgument("restrict_time expects a full grid with odd nt")
    k = full.zero_index
    return np.asarray(v_ext)[k:], replace(full, nt=k + 1, span="forward")


def extend_trace(trace: BoundaryTrace, initial_kind: str = "real") -> BoundaryTrace:
    vals, full = extend_time(trace.values, trace.grid, initial_kind, tol=np.inf)
    return BoundaryTrace(trace.side, vals, full)


def observation(q, grid: StripGrid) -> BoundaryTrace:
    """d_nu(d_t q) on Gamma+: one-sided normal stencil composed with a centered time difference."""
    q = np.asarray(q)
    if q.ndim != 3 or q.shape != grid.shape:
        raise InvalidArgument("observation needs a space-time field on the grid")
    if grid.ny < 5 or grid.nt < 3:
        raise InvalidArgument("observation needs >= 3 interior y nodes and >= 3 time levels")
    dnu = normal_trace_values(q, grid, TOP)
    return BoundaryTrace(TOP, time_derivative(dnu, grid), grid)
