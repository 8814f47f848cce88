"""Truncated strip discretization and the finite-difference / quadrature primitives.

The unbounded strip R x (-d/2, d/2) is cut to (-L, L) x (-d/2, d/2) with
Dirichlet data on the artificial faces x = +-L.  Arrays are laid out with
time first and ``x`` before ``y``: a space-time field has shape
``(nt, nx, ny)``, a spatial field ``(nx, ny)`` and a boundary trace ``(nt, nx)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import InvalidArgument, NumericError

TOP = "top"
BOTTOM = "bottom"
_SIDES = (TOP, BOTTOM)


@dataclass(frozen=True)
class StripGrid:
    """Uniform node grid on (-L, L) x [-d/2, d/2] times a clamped time interval.

    ``span='forward'`` covers [0, T - t_clamp] (the solve interval, t = 0 is
    where the initial data lives); ``span='full'`` covers
    [-T + t_clamp, T - t_clamp].  The clamp keeps the Carleman weights,
    which blow up at t = +-T, finite.
    """

    L: float
    d: float
    T: float
    nx: int
    ny: int
    nt: int
    t_clamp: float
    span: str = "forward"

    @property
    def hx(self) -> float:
        return 2.0 * self.L / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.d / (self.ny - 1)

    @property
    def t0(self) -> float:
        return 0.0 if self.span == "forward" else -(self.T - self.t_clamp)

    @property
    def t1(self) -> float:
        return self.T - self.t_clamp

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / (self.nt - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return np.linspace(-self.d / 2, self.d / 2, self.ny)

    @cached_property
    def t(self) -> np.ndarray:
        t = np.linspace(self.t0, self.t1, self.nt)
        if self.span == "full":
            t = 0.5 * (t - t[::-1])  # exact mirror symmetry about t = 0
        return t

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    @property
    def space_shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nt, self.nx, self.ny)

    @cached_property
    def wx(self) -> np.ndarray:
        return trapezoid_weights(self.nx, self.hx)

    @cached_property
    def wy(self) -> np.ndarray:
        return trapezoid_weights(self.ny, self.hy)

    @cached_property
    def wt(self) -> np.ndarray:
        return trapezoid_weights(self.nt, self.dt)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.space_shape, dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    def boundary_indices(self) -> dict[str, tuple]:
        """Index expressions for Gamma+, Gamma- and the truncation faces x = -L, x = +L."""
        return {
            "gamma_plus": (slice(None), self.ny - 1),
            "gamma_minus": (slice(None), 0),
            "face_left": (0, slice(None)),
            "face_right": (self.nx - 1, slice(None)),
        }

    @property
    def zero_index(self) -> int:
        """Index of the level t = 0 (forward grids start there; full grids need odd nt)."""
        if self.span == "forward":
            return 0
        if self.nt % 2 == 0:
            raise InvalidArgument("full-span grid with even nt has no t = 0 level")
        return self.nt // 2

    def extended(self) -> "StripGrid":
        """Full-span grid whose non-negative levels coincide with this forward grid."""
        if self.span != "forward":
            raise InvalidArgument("only forward grids can be extended")
        return replace(self, nt=2 * self.nt - 1, span="full")

    def refined(self, factor: int = 2) -> "StripGrid":
        """Grid with every spacing divided by ``factor`` (nodes of self are kept)."""
        return replace(
            self,
            nx=factor * (self.nx - 1) + 1,
            ny=factor * (self.ny - 1) + 1,
            nt=factor * (self.nt - 1) + 1,
        )

    def level_index(self, t: float, tol: float = 1e-9) -> int:
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k >= self.nt or abs(self.t[k] - t) > tol * max(1.0, self.T):
            raise InvalidArgument(f"t = {t!r} is not a level of this grid")
        return k


def make_grid(L=6.0, d=1.0, T=1.0, nx=121, ny=21, nt=101, t_clamp=0.01, span="forward"):
    for name, val in (("L", L), ("d", d), ("T", T), ("t_clamp", t_clamp)):
        if not np.isfinite(val) or val <= 0:
            raise InvalidArgument(f"{name} must be positive, got {val!r}")
    if nx < 5 or ny < 5:
        raise InvalidArgument("nx and ny must be >= 5 for second-order one-sided stencils")
    if nt < 8:
        raise InvalidArgument("nt must be >= 8")
    if t_clamp >= T / 10:
        raise InvalidArgument(f"t_clamp must be < T/10, got {t_clamp!r} with T={T!r}")
    if span not in ("forward", "full"):
        raise InvalidArgument(f"unknown time span {span!r}")
    return StripGrid(float(L), float(d), float(T), int(nx), int(ny), int(nt), float(t_clamp), span)


def trapezoid_weights(n, h):
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _check_finite(field):
    if not np.all(np.isfinite(field)):
        raise NumericError("non-finite value in integrand")


def _check_space(field, grid):
    if field.shape[-2:] != grid.space_shape:
        raise InvalidArgument(f"field shape {field.shape} does not match grid {grid.space_shape}")


def integrate_space(field, grid: StripGrid):
    """Trapezoidal integral over the truncated strip of the last two axes."""
    field = np.asarray(field)
    _check_space(field, grid)
    _check_finite(field)
    out = np.einsum("...ij,i,j->...", field, grid.wx, grid.wy)
    return out.item() if out.ndim == 0 else out


def integrate_spacetime(field, grid: StripGrid, levels: tuple[int, int] | None = None):
    """Trapezoidal integral over space and time.

    ``levels=(k0, k1)`` restricts the time integral to [t[k0], t[k1]].
    """
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[0] != grid.nt:
        raise InvalidArgument(f"space-time field shape {field.shape} does not match grid {grid.shape}")
    per_level = integrate_space(field, grid)
    if levels is None:
        return np.dot(grid.wt, per_level).item()
    k0, k1 = levels
    if not 0 <= k0 <= k1 < grid.nt:
        raise InvalidArgument(f"bad level range {levels!r}")
    if k0 == k1:
        return 0.0 * per_level[k0]
    return np.dot(trapezoid_weights(k1 - k0 + 1, grid.dt), per_level[k0:k1 + 1]).item()


def integrate_trace(values, grid: StripGrid, levels: tuple[int, int] | None = None):
    """Integral over (time x boundary edge) of a trace of shape (nt, nx)."""
    values = np.asarray(values)
    if values.shape != (grid.nt, grid.nx):
        raise InvalidArgument(f"trace shape {values.shape} does not match ({grid.nt}, {grid.nx})")
    _check_finite(values)
    per_level = values @ grid.wx
    if levels is None:
        return np.dot(grid.wt, per_level).item()
    k0, k1 = levels
    if k0 == k1:
        return 0.0 * per_level[k0]
    return np.dot(trapezoid_weights(k1 - k0 + 1, grid.dt), per_level[k0:k1 + 1]).item()


def gradient(field, grid: StripGrid):
    """Second-order (x, y) gradient: central inside, one-sided on the edges."""
    field = np.asarray(field)
    _check_space(field, grid)
    gx = np.gradient(field, grid.hx, axis=-2, edge_order=2)
    gy = np.gradient(field, grid.hy, axis=-1, edge_order=2)
    return gx, gy


def time_derivative(field, grid: StripGrid):
    """Centered second-order d/dt, one-sided second order at the first and last level."""
    field = np.asarray(field)
    if field.shape[0] != grid.nt:
        raise InvalidArgument("time axis does not match grid")
    return np.gradient(field, grid.dt, axis=0, edge_order=2)


def _axis_flux_term(c, q, h):
    """d/da (c dq/da) along the last axis of q (c broadcast against q)."""
    out = np.empty(np.broadcast_shapes(c.shape, q.shape), dtype=np.result_type(c, q))
    c_half = 0.5 * (c[..., 1:] + c[..., :-1])
    flux = c_half * (q[..., 1:] - q[..., :-1])
    out[..., 1:-1] = (flux[..., 1:] - flux[..., :-1]) / h**2
    # edges: c q'' + c' q' with one-sided second-order formulas
    for sl, sgn in (((0, 1, 2, 3), 1.0), ((-1, -2, -3, -4), -1.0)):
        i0, i1, i2, i3 = sl
        q_a = sgn * (-3 * q[..., i0] + 4 * q[..., i1] - q[..., i2]) / (2 * h)
        c_a = sgn * (-3 * c[..., i0] + 4 * c[..., i1] - c[..., i2]) / (2 * h)
        q_aa = (2 * q[..., i0] - 5 * q[..., i1] + 4 * q[..., i2] - q[..., i3]) / h**2
        out[..., i0] = c[..., i0] * q_aa + c_a * q_a
    return out


def div_c_grad(c, q, grid: StripGrid):
    """Discrete d_x(c d_x q) + d_y(c d_y q).

    Interior nodes use flux differencing with c at half nodes taken as the
    arithmetic mean, which makes the interior operator symmetric.  Edge nodes
    use one-sided second-order formulas; the solvers never read them.
    """
    c = np.asarray(c, dtype=float)
    q = np.asarray(q)
    if c.shape != grid.space_shape:
        raise InvalidArgument(f"coefficient shape {c.shape} does not match grid {grid.space_shape}")
    _check_space(q, grid)
    term_y = _axis_flux_term(c, q, grid.hy)
    term_x = np.swapaxes(_axis_flux_term(c.T, np.swapaxes(q, -1, -2), grid.hx), -1, -2)
    return term_x + term_y


def normal_trace_values(q, grid: StripGrid, side: str = TOP):
    """Outward normal derivative on y = +d/2 (side='top') or y = -d/2 (side='bottom')."""
    if side not in _SIDES:
        raise InvalidArgument(f"side must be one of {_SIDES}")
    q = np.asarray(q)
    _check_space(q, grid)
    if q.shape[-1] < 3:
        raise InvalidArgument("normal trace needs at least 3 nodes across the strip")
    h = grid.hy
    if side == TOP:
        return (3 * q[..., -1] - 4 * q[..., -2] + q[..., -3]) / (2 * h)
    return (3 * q[..., 0] - 4 * q[..., 1] + q[..., 2]) / (2 * h)


@dataclass(frozen=True)
class BoundaryTrace:
    """Complex values on one long edge of the strip, per (time level, x node)."""

    side: str
    values: np.ndarray
    grid: StripGrid

    def __post_init__(self):
        if self.values.shape != (self.grid.nt, self.grid.nx):
            raise InvalidArgument(f"trace shape {self.values.shape} does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite value in boundary trace")

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights for d sigma dt, shape (nt, nx)."""
        return np.outer(self.grid.wt, self.grid.wx)

    def __sub__(self, other: "BoundaryTrace") -> "BoundaryTrace":
        if self.side != other.side or self.grid != other.grid:
            raise InvalidArgument("traces live on different edges or grids")
        return BoundaryTrace(self.side, self.values - other.values, self.grid)


def normal_trace(q, grid: StripGrid, side: str = TOP) -> BoundaryTrace:
    q = np.asarray(q)
    if q.ndim != 3:
        raise InvalidArgument("normal_trace expects a space-time field; use normal_trace_values for one level")
    return BoundaryTrace(side, normal_trace_values(q, grid, side), grid)
