"""Reconstruction of c from the Gamma+ observation d_nu(d_t q).

The gradient is the exact derivative of the discrete misfit: one Crank-Nicolson
forward sweep, one backward sweep with the conjugate-transposed step matrices,
and a face-by-face assembly of Re(grad q . conj(grad p)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .errors import InvalidArgument, NumericError
from .grid import TOP, BoundaryTrace, StripGrid
from .solver import CrankNicolson, observation
from .weights import WeightSet


@dataclass(frozen=True, eq=False)
class InversionProblem:
    """Everything except the unknown coefficient.

    ``window`` is the boolean node mask where c may differ from ``c_background``;
    ``boundary_weight`` (nt, nx) multiplies the misfit quadrature (None: unweighted).
    """

    grid: StripGrid
    c_background: np.ndarray
    q0: np.ndarray
    window: np.ndarray
    boundary_weight: np.ndarray | None = None

    def __post_init__(self):
        g = self.grid
        for name in ("c_background", "q0", "window"):
            if np.shape(getattr(self, name)) != g.space_shape:
                raise InvalidArgument(f"{name} does not match grid")
        if np.any(self.window & g.boundary_mask):
            raise InvalidArgument("inversion window must not touch the boundary")
        if self.boundary_weight is not None and np.shape(self.boundary_weight) != (g.nt, g.nx):
            raise InvalidArgument("boundary weight must have shape (nt, nx)")

    @property
    def trace_weights(self) -> np.ndarray:
        w = np.outer(self.grid.wt, self.grid.wx)
        return w if self.boundary_weight is None else w * self.boundary_weight


def box_window(grid: StripGrid, x_half: float, y_half: float, x_center: float = 0.0) -> np.ndarray:
    X, Y = grid.mesh
    mask = (np.abs(X - x_center) <= x_half) & (np.abs(Y) <= y_half)
    return mask & grid.interior_mask


def carleman_boundary_weight(W: WeightSet) -> np.ndarray:
    """phi exp(-2 s eta) d_nu beta on Gamma+ (shifted as everywhere else)."""
    return W.phi_top() * W.weight_top(2.0) * W.dnu_beta_top()


def restrict_trace(trace: BoundaryTrace, coarse: StripGrid) -> BoundaryTrace:
    """Sample a trace computed on an integer refinement of ``coarse`` at the coarse nodes."""
    fine = trace.grid
    fx = (fine.nx - 1) // (coarse.nx - 1)
    ft = (fine.nt - 1) // (coarse.nt - 1)
    if (coarse.nx - 1) * fx != fine.nx - 1 or (coarse.nt - 1) * ft != fine.nt - 1:
        raise InvalidArgument("fine trace grid is not an integer refinement of the coarse grid")
    if (coarse.L, coarse.T, coarse.t_clamp, coarse.span) != (fine.L, fine.T, fine.t_clamp, fine.span):
        raise InvalidArgument("fine and coarse grids cover different domains")
    return BoundaryTrace(trace.side, trace.values[::ft, ::fx].copy(), coarse)


def add_noise(trace: BoundaryTrace, level: float, rng: np.random.Generator) -> BoundaryTrace:
    """Complex Gaussian noise with standard deviation ``level`` times the RMS of the trace."""
    if level < 0:
        raise InvalidArgument("noise level must be >= 0")
    if level == 0:
        return trace
    rms = float(np.sqrt(np.mean(np.abs(trace.values) ** 2)))
    noise = rng.standard_normal(trace.values.shape) + 1j * rng.standard_normal(trace.values.shape)
    return BoundaryTrace(trace.side, trace.values + level * rms * noise / np.sqrt(2.0), trace.grid)


# ------------------------------------------------------------------ forward map


def _forward(c, problem: InversionProblem):
    stepper = CrankNicolson(c, problem.grid)
    q0 = np.asarray(problem.q0, dtype=complex)
    q = stepper.run(q0, lambda n: q0)
    return stepper, q


def _check_data(data: BoundaryTrace, problem: InversionProblem):
    if data.grid != problem.grid or data.side != TOP:
        raise InvalidArgument("data must be a Gamma+ trace on the inversion grid")


def misfit(c_est, data: BoundaryTrace, problem: InversionProblem) -> float:
    """1/2 sum over (t, x) quadrature of |observation(c_est) - data|^2."""
    _check_data(data, problem)
    _, q = _forward(np.asarray(c_est, dtype=float), problem)
    r = observation(q, problem.grid).values - data.values
    return 0.5 * float(np.sum(problem.trace_weights * np.abs(r) ** 2))


def _time_derivative_transpose(a, dt):
    """Apply the transpose of the second-order time-difference matrix along axis 0."""
    out = np.zeros_like(a)
    n = a.shape[0]
    h = 1.0 / (2.0 * dt)
    # interior rows k: (x[k+1] - x[k-1]) h
    out[2:] += h * a[1:-1]
    out[:-2] -= h * a[1:-1]
    # first row: (-3 x0 + 4 x1 - x2) h
    out[0] += -3 * h * a[0]
    out[1] += 4 * h * a[0]
    out[2] += -h * a[0]
    # last row: (3 xN - 4 xN-1 + xN-2) h
    out[n - 1] += 3 * h * a[n - 1]
    out[n - 2] += -4 * h * a[n - 1]
    out[n - 3] += h * a[n - 1]
    return out


def _face_products(U, P, grid: StripGrid):
    """Per-node sum over adjacent faces of Re(dU conj(dP)) / h^2, summed over levels."""
    gx = np.real((U[:, 1:, :] - U[:, :-1, :]) * np.conj(P[:, 1:, :] - P[:, :-1, :])).sum(axis=0) / grid.hx**2
    gy = np.real((U[:, :, 1:] - U[:, :, :-1]) * np.conj(P[:, :, 1:] - P[:, :, :-1])).sum(axis=0) / grid.hy**2
    out = np.zeros(grid.space_shape)
    out[1:, :] += gx
    out[:-1, :] += gx
    out[:, 1:] += gy
    out[:, :-1] += gy
    return out


def misfit_and_gradient(c_est, data: BoundaryTrace, problem: InversionProblem, project: bool = True):
    """(misfit, gradient with respect to nodal c); gradient zero outside the window if ``project``."""
    _check_data(data, problem)
    g = problem.grid
    c_est = np.asarray(c_est, dtype=float)
    stepper, q = _forward(c_est, problem)
    r = observation(q, g).values - data.values
    wr = problem.trace_weights * r
    J = 0.5 * float(np.real(np.sum(np.conj(r) * wr)))

    rho = _time_derivative_transpose(wr, g.dt)  # (nt, nx)
    forcing = np.zeros((g.nt,) + stepper.interior_shape, dtype=complex)
    forcing[:, :, -1] = -4.0 * rho[:, 1:-1] / (2 * g.hy)
    forcing[:, :, -2] += rho[:, 1:-1] / (2 * g.hy)

    # backward sweep: M^H lam^m = P^H lam^{m+1} - G^m, lam^{N+1} = 0, m = N..1
    lam = np.zeros(g.shape, dtype=complex)
    idt = 1j / g.dt
    nxt = np.zeros(stepper.interior_shape, dtype=complex)
    for m in range(g.nt - 1, 0, -1):
        # P^H = conj(i/dt) I - A/2
        rhs = np.conj(idt) * nxt - 0.5 * (stepper.A @ nxt.ravel()).reshape(nxt.shape) - forcing[m]
        nxt = stepper.solve_adjoint(rhs)
        lam[m, 1:-1, 1:-1] = nxt

    U = q[1:] + q[:-1]  # level pairs (n, n+1), n = 0..N-1
    grad = -0.25 * _face_products(U, lam[1:], g)
    if project:
        grad = np.where(problem.window, grad, 0.0)
    return J, grad


# ------------------------------------------------------------------ regularization


def h1_seminorm2(d, grid: StripGrid) -> float:
    """Face-difference approximation of int |grad d|^2."""
    d = np.asarray(d, dtype=float)
    ex = np.sum((d[1:, :] - d[:-1, :]) ** 2) * grid.hy / grid.hx
    ey = np.sum((d[:, 1:] - d[:, :-1]) ** 2) * grid.hx / grid.hy
    return float(ex + ey)


def h1_seminorm2_gradient(d, grid: StripGrid) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    fx = 2 * (d[1:, :] - d[:-1, :]) * grid.hy / grid.hx
    fy = 2 * (d[:, 1:] - d[:, :-1]) * grid.hx / grid.hy
    out = np.zeros_like(d)
    out[1:, :] += fx
    out[:-1, :] -= fx
    out[:, 1:] += fy
    out[:, :-1] -= fy
    return out


def sobolev_smoother(window: np.ndarray, grid: StripGrid, length: float):
    """Solver for (I - length^2 Laplacian) z = g on the window with z = 0 outside.

    Used to turn the nodal (l2) gradient into an H1-type descent direction.
    """
    idx = np.flatnonzero(window.ravel())
    if idx.size == 0:
        raise InvalidArgument("empty inversion window")
    nx, ny = grid.space_shape
    e = np.ones(nx)
    lap_x = sps.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1]) / grid.hx**2
    f = np.ones(ny)
    lap_y = sps.diags([f[:-1], -2 * f, f[:-1]], [-1, 0, 1]) / grid.hy**2
    lap = sps.kron(lap_x, sps.identity(ny)) + sps.kron(sps.identity(nx), lap_y)
    op = (sps.identity(nx * ny) - length**2 * lap).tocsr()[idx][:, idx].tocsc()
    lu = spla.splu(op)

    def apply(gvec):
        out = np.zeros(nx * ny)
        out[idx] = lu.solve(np.asarray(gvec, dtype=float).ravel()[idx])
        return out.reshape(nx, ny)

    return apply


# ------------------------------------------------------------------ descent


@dataclass
class ReconstructionResult:
    c_est: np.ndarray
    misfit_history: list = field(default_factory=list)
    reg_history: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    h1_error_history: list = field(default_factory=list)
    step_history: list = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = "max-iter"

    def rows(self):
        out = []
        for k in range(len(self.misfit_history)):
            out.append({
                "iteration": k,
                "misfit": self.misfit_history[k],
                "reg": self.reg_history[k],
                "objective": self.objective_history[k],
                "h1_error": self.h1_error_history[k] if self.h1_error_history else float("nan"),
                "step": self.step_history[k] if k < len(self.step_history) else float("nan"),
            })
        return out


@dataclass(frozen=True)
class DescentSettings:
    max_iter: int = 50
    reg_weight: float = 0.0
    c_min_floor: float = 0.05
    smoothing_length: float = 0.1
    initial_step: float = 1.0
    max_backtracks: int = 30
    armijo: float = 1e-4
    grad_tol: float = 1e-10
    objective_tol: float = 0.0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise InvalidArgument("reg_weight must be >= 0")
        if self.max_iter < 1 or self.max_backtracks < 1:
            raise InvalidArgument("max_iter and max_backtracks must be >= 1")
        if self.c_min_floor <= 0:
            raise InvalidArgument("c_min_floor must be > 0")


def reconstruct(data: BoundaryTrace, c_init, problem: InversionProblem, settings: DescentSettings = DescentSettings(),
                error_norm=None) -> ReconstructionResult:
    """Preconditioned gradient descent with backtracking on misfit + reg_weight * |c - c_init|_{H1}^2.

    ``error_norm(c)`` (optional) is evaluated after every accepted step, e.g. the
    weighted H1 distance to a known truth.
    """
    g = problem.grid
    c_init = np.asarray(c_init, dtype=float)
    if c_init.shape != g.space_shape:
        raise InvalidArgument("c_init does not match grid")
    if np.min(c_init) <= 0:
        raise InvalidArgument("c_init must be positive")
    smooth = sobolev_smoother(problem.window, g, settings.smoothing_length)
    lw = settings.reg_weight

    def objective(c):
        J, grad = misfit_and_gradient(c, data, problem)
        R = h1_seminorm2(c - c_init, g)
        if lw > 0:
            grad = grad + lw * np.where(problem.window, h1_seminorm2_gradient(c - c_init, g), 0.0)
        return J, R, J + lw * R, grad

    def value(c):
        J = misfit(c, data, problem)
        R = h1_seminorm2(c - c_init, g)
        return J, R, J + lw * R

    c = c_init.copy()
    J, R, F, grad = objective(c)
    res = ReconstructionResult(c_est=c)
    res.misfit_history.append(J)
    res.reg_history.append(R)
    res.objective_history.append(F)
    if error_norm is not None:
        res.h1_error_history.append(float(error_norm(c)))
    step = settings.initial_step
    grad0 = None
    for it in range(1, settings.max_iter + 1):
        res.iterations = it
        direction = -smooth(grad)
        slope = float(np.sum(grad * direction))
        gnorm = float(np.sqrt(np.sum(grad**2)))
        grad0 = gnorm if grad0 is None else grad0
        if gnorm == 0.0 or slope >= 0 or gnorm <= settings.grad_tol * max(grad0, np.finfo(float).tiny):
            res.stop_reason = "converged"
            break
        # first iteration: scale the step so the update is ~1% of the background coefficient
        if it == 1:
            scale = 0.01 * float(np.max(np.abs(c_init[problem.window]))) / float(np.max(np.abs(direction)))
            step = settings.initial_step * scale
        accepted = False
        for _ in range(settings.max_backtracks):
            trial = np.maximum(c + step * direction, settings.c_min_floor)
            trial = np.where(problem.window, trial, c)
            Jt, Rt, Ft = value(trial)
            if Ft < F + settings.armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            res.stop_reason = "line-search-failure"
            break
        rel_drop = (F - Ft) / max(F, np.finfo(float).tiny)
        c = trial
        J, R, F, grad = objective(c)
        res.misfit_history.append(J)
        res.reg_history.append(R)
        res.objective_history.append(F)
        res.step_history.append(step)
        if error_norm is not None:
            res.h1_error_history.append(float(error_norm(c)))
        step *= 2.0
        if rel_drop < settings.objective_tol:
            res.stop_reason = "converged"
            break
    res.c_est = c
    if np.min(c) <= 0 or not np.all(np.isfinite(c)):
        raise NumericError("reconstruction left the positive cone")
    return res
