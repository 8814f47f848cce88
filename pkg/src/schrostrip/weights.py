"""Carleman weight functions and executable checks of the coefficient assumptions.

With beta = beta_tilde + K, K = m * max|beta_tilde|,

    phi(x, y, t) = exp(lam * beta) / ((T + t)(T - t))
    eta(x, y, t) = (exp(2 lam K) - exp(lam * beta)) / ((T + t)(T - t))

For realistic (lam, s) the factor exp(-2 s eta) is far below the smallest
float64.  Every weighted quantity is therefore computed against the shift
``eta_ref = min_x eta(x, 0)``: ``weight(k)`` returns exp(-k s (eta - eta_ref)),
which is <= 1 everywhere, and the true value is the reported one times
exp(-k s eta_ref).  Ratios of two sides that carry the same weight are
unaffected by the shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp

from .errors import DomainError, InvalidArgument, NotApplicable, NumericError
from .grid import StripGrid
from .presets import AnalyticField, x as sym_x

_EXP_LIMIT = 700.0


def build_beta(beta_tilde, m: float):
    """beta = beta_tilde + m * max|beta_tilde| (pointwise on the sampled values)."""
    if not m > 1:
        raise InvalidArgument(f"m must be > 1, got {m!r}")
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    if not np.all(np.isfinite(beta_tilde)):
        raise InvalidArgument("beta_tilde has non-finite values")
    return beta_tilde + m * np.max(np.abs(beta_tilde))


@dataclass(frozen=True)
class WeightParams:
    lam: float
    s: float
    m: float = 2.0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidArgument(f"lambda must be positive, got {self.lam!r}")
        if not self.s > 0:
            raise InvalidArgument(f"s must be positive, got {self.s!r}")
        if not self.m > 1:
            raise InvalidArgument(f"m must be > 1, got {self.m!r}")


def _theta(t, T):
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) >= T):
        raise DomainError(f"weights requested at |t| >= T = {T}")
    den = (T + t) * (T - t)
    return 1.0 / den, 2.0 * t / den**2, 2.0 / den**2 + 8.0 * t**2 / den**3


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Sampled Carleman weights on a grid; derivatives come from exact formulas."""

    params: WeightParams
    grid: StripGrid
    K: float
    beta: np.ndarray
    beta_x: np.ndarray
    beta_y: np.ndarray
    lap_beta: np.ndarray

    @property
    def lam(self):
        return self.params.lam

    @property
    def s(self):
        return self.params.s

    @cached_property
    def _elb(self):
        return np.exp(self.lam * self.beta)

    @cached_property
    def _numer(self):
        return np.exp(2 * self.lam * self.K) - self._elb

    @cached_property
    def eta_ref(self) -> float:
        return float(np.min(self._numer)) / self.grid.T**2

    def log_scale(self, k: float = 2.0) -> float:
        """Reported weighted values equal true values times exp(log_scale(k))."""
        return k * self.s * self.eta_ref

    def with_s(self, s: float) -> "WeightSet":
        return WeightSet(WeightParams(self.lam, s, self.params.m), self.grid, self.K,
                         self.beta, self.beta_x, self.beta_y, self.lap_beta)

    def on(self, grid: StripGrid) -> "WeightSet":
        """Same weights sampled on another time axis of the same spatial grid."""
        if grid.space_shape != self.grid.space_shape or grid.T != self.grid.T:
            raise InvalidArgument("weights can only be moved between grids sharing space and T")
        return WeightSet(self.params, grid, self.K, self.beta, self.beta_x, self.beta_y, self.lap_beta)

    # time factors -------------------------------------------------------
    @cached_property
    def _theta(self):
        return _theta(self.grid.t, self.grid.T)

    def _tt(self, arr):
        return arr[:, None, None]

    # space-time fields (nt, nx, ny); ``levels`` selects a slice of time levels
    def phi(self, levels=slice(None)):
        return self._tt(self._theta[0][levels]) * self._elb

    def eta(self, levels=slice(None)):
        return self._tt(self._theta[0][levels]) * self._numer

    def phi_inv(self, levels=slice(None)):
        return 1.0 / self.phi(levels)

    def weight(self, k: float = 2.0, levels=slice(None)):
        return np.exp(-k * self.s * (self.eta(levels) - self.eta_ref))

    def grad_eta(self, levels=slice(None)):
        ph = self.phi(levels)
        return -self.lam * ph * self.beta_x, -self.lam * ph * self.beta_y

    def grad_phi(self):
        ph = self.phi()
        return self.lam * ph * self.beta_x, self.lam * ph * self.beta_y

    def dt_eta(self, levels=slice(None)):
        return self._tt(self._theta[1][levels]) * self._numer

    def dtt_eta(self):
        return self._tt(self._theta[2]) * self._numer

    def dt_phi_inv(self, levels=slice(None)):
        return self._tt(-2.0 * self.grid.t[levels]) / self._elb

    def lap_eta(self):
        return -self.lam * self.phi() * (self.lap_beta + self.lam * (self.beta_x**2 + self.beta_y**2))

    # t = 0 slices (nx, ny) ---------------------------------------------
    @property
    def phi0(self):
        return self._elb / self.grid.T**2

    @property
    def eta0(self):
        return self._numer / self.grid.T**2

    def weight0(self, k: float = 2.0):
        return np.exp(-k * self.s * (self.eta0 - self.eta_ref))

    def unweight_factor(self, k: float = 1.0):
        """exp(+k s (eta - eta_ref)), guarded against overflow."""
        expo = k * self.s * (self.eta() - self.eta_ref)
        if np.max(expo) > _EXP_LIMIT:
            raise NumericError(f"exp(+s eta) overflows: exponent {np.max(expo):.1f} > {_EXP_LIMIT}")
        return np.exp(expo)

    # Gamma+ traces (nt, nx) ----------------------------------------------
    def phi_top(self):
        return self._tt(self._theta[0])[:, :, 0] * self._elb[:, -1]

    def weight_top(self, k: float = 2.0):
        eta = self._tt(self._theta[0])[:, :, 0] * self._numer[:, -1]
        return np.exp(-k * self.s * (eta - self.eta_ref))

    def dnu_beta_top(self):
        """d_nu beta on Gamma+ (outward normal +y), per x node."""
        return self.beta_y[:, -1]


def build_weights(beta_tilde: AnalyticField, grid: StripGrid, lam: float, s: float, m: float = 2.0) -> WeightSet:
    params = WeightParams(lam, s, m)
    bt = beta_tilde.on_grid(grid)
    beta = build_beta(bt, m)
    K = m * float(np.max(np.abs(bt)))
    bx, by = beta_tilde.gradient(grid)
    lap = beta_tilde.on_grid(grid, dx=2) + beta_tilde.on_grid(grid, dy=2)
    ws = WeightSet(params, grid, K, beta, bx, by, lap)
    if np.max(beta) >= 2 * K:
        raise NumericError("beta >= 2K somewhere: eta would not be positive")
    return ws


# ---------------------------------------------------------------- assumption checks


@dataclass
class AssumptionReport:
    name: str
    flags: dict = field(default_factory=dict)
    R1_est: float = float("nan")
    R2_est: float = float("nan")
    c_min_est: float = float("nan")
    C_pc_est: float = float("nan")
    r0_est: float = float("nan")
    witness: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.flags) and all(self.flags.values())

    def rows(self):
        """(clause, verdict, estimate-name, estimate, witness x, witness y) rows."""
        est = {"R1_est": self.R1_est, "R2_est": self.R2_est, "c_min_est": self.c_min_est,
               "C_pc_est": self.C_pc_est, "r0_est": self.r0_est}
        out = []
        for clause, ok in self.flags.items():
            wx, wy = self.witness.get(clause, (float("nan"), float("nan")))
            out.append((self.name, clause, "PASS" if ok else "FAIL", wx, wy))
        return out, est


def _at(grid, idx):
    ix, iy = idx
    return (float(grid.x[ix]), float(grid.y[iy]))


def _derivative_bound(fn, grid, max_order):
    if isinstance(fn, AnalyticField):
        return max(fn.max_abs_derivatives(grid, k) for k in range(max_order + 1)), "exact"
    vals = np.asarray(fn, dtype=float)
    bound = float(np.max(np.abs(vals)))
    layer = [vals]
    for _ in range(max_order):
        nxt = []
        for f in layer:
            gx, gy = np.gradient(f, grid.hx, grid.hy, edge_order=2)
            nxt += [gx, gy]
        layer = nxt
        bound = max(bound, max(float(np.max(np.abs(f))) for f in layer))
    return bound, "finite-difference"


def check_coefficient_assumptions(c, grid: StripGrid) -> AssumptionReport:
    """Positivity of c and boundedness of its derivatives up to order three."""
    rep = AssumptionReport("coefficient")
    vals = c.on_grid(grid) if isinstance(c, AnalyticField) else np.asarray(c, dtype=float)
    rep.c_min_est = float(np.min(vals))
    rep.R1_est = rep.c_min_est
    rep.R2_est, rep.notes["derivatives"] = _derivative_bound(c, grid, 3)
    rep.flags["positivity"] = rep.c_min_est > 0
    if not rep.flags["positivity"]:
        # report where positivity is first lost: the non-positive node closest to zero
        masked = np.where(vals <= 0, vals, -np.inf)
        rep.witness["positivity"] = _at(grid, np.unravel_index(np.argmax(masked), vals.shape))
    rep.flags["bounded_derivatives"] = bool(np.isfinite(rep.R2_est))
    rep.flags["R1_le_R2"] = bool(rep.R1_est <= rep.R2_est)
    return rep


def _require_analytic(*fields):
    for f in fields:
        if not isinstance(f, AnalyticField):
            raise InvalidArgument("exact derivatives required: pass a registered analytic preset")


def pseudoconvexity_matrices(c: AnalyticField, beta_tilde: AnalyticField, grid: StripGrid):
    """Per-node real symmetric 2x2 matrix A with form(zeta) = zeta^H A zeta.

    form(zeta) = 2 Re(D2(zeta, conj zeta)) - c grad c . grad b |zeta|^2 + 2 c^2 |grad b . zeta|^2
    where D2_ij = c d_i(c d_j b).  Shape (nx, ny, 2, 2).
    """
    _require_analytic(c, beta_tilde)
    cv = c.on_grid(grid)
    cx, cy = c.gradient(grid)
    bx, by = beta_tilde.gradient(grid)
    bxx = beta_tilde.on_grid(grid, dx=2)
    bxy = beta_tilde.on_grid(grid, dx=1, dy=1)
    byy = beta_tilde.on_grid(grid, dy=2)
    D = np.empty(grid.space_shape + (2, 2))
    D[..., 0, 0] = cv * (cx * bx + cv * bxx)
    D[..., 0, 1] = cv * (cx * by + cv * bxy)
    D[..., 1, 0] = cv * (cy * bx + cv * bxy)
    D[..., 1, 1] = cv * (cy * by + cv * byy)
    A = D + np.swapaxes(D, -1, -2)
    shift = cv * (cx * bx + cy * by)
    A[..., 0, 0] -= shift
    A[..., 1, 1] -= shift
    g = np.stack([bx, by], axis=-1)
    A += 2 * cv[..., None, None] ** 2 * g[..., :, None] * g[..., None, :]
    return A


def pseudoconvexity_form(c, beta_tilde, grid, zeta):
    """Direct evaluation of the quadratic form at zeta in C^2 (array (..., 2) per node)."""
    _require_analytic(c, beta_tilde)
    zeta = np.asarray(zeta, dtype=complex)
    cv = c.on_grid(grid)
    cx, cy = c.gradient(grid)
    bx, by = beta_tilde.gradient(grid)
    d = {
        (0, 0): cv * (cx * bx + cv * beta_tilde.on_grid(grid, dx=2)),
        (0, 1): cv * (cx * by + cv * beta_tilde.on_grid(grid, dx=1, dy=1)),
        (1, 0): cv * (cy * bx + cv * beta_tilde.on_grid(grid, dx=1, dy=1)),
        (1, 1): cv * (cy * by + cv * beta_tilde.on_grid(grid, dy=2)),
    }
    z = [zeta[..., 0], zeta[..., 1]]
    d2 = sum(d[i, j] * z[i] * np.conj(z[j]) for i in range(2) for j in range(2))
    nz2 = np.abs(z[0]) ** 2 + np.abs(z[1]) ** 2
    return 2 * d2.real - cv * (cx * bx + cy * by) * nz2 + 2 * cv**2 * np.abs(bx * z[0] + by * z[1]) ** 2


def pseudoconvexity_field(c, beta_tilde, grid):
    """Smallest eigenvalue of the form's matrix at every node."""
    return np.linalg.eigvalsh(pseudoconvexity_matrices(c, beta_tilde, grid))[..., 0]


def pseudoconvexity_constant(c, beta_tilde, grid: StripGrid) -> float:
    return float(np.min(pseudoconvexity_field(c, beta_tilde, grid)))


def check_beta_assumptions(c, beta_tilde, grid: StripGrid, tol: float = 1e-12) -> AssumptionReport:
    _require_analytic(c, beta_tilde)
    rep = AssumptionReport("beta")
    bt = beta_tilde.on_grid(grid)
    rep.flags["beta_positive"] = bool(np.min(bt) > 0)
    if not rep.flags["beta_positive"]:
        rep.witness["beta_positive"] = _at(grid, np.unravel_index(np.argmin(bt), bt.shape))

    # outward normal on Gamma- is -y
    dnu_minus = -beta_tilde.on_grid(grid, dy=1)[:, 0]
    rep.flags["sign_gamma_minus"] = bool(np.max(dnu_minus) <= 0)
    if not rep.flags["sign_gamma_minus"]:
        rep.witness["sign_gamma_minus"] = _at(grid, (int(np.argmax(dnu_minus)), 0))

    bx, by = beta_tilde.gradient(grid)
    gnorm = np.hypot(bx, by)
    rep.R1_est = float(np.min(gnorm))
    rep.flags["gradient_lower_bound"] = rep.R1_est > tol
    if not rep.flags["gradient_lower_bound"]:
        rep.witness["gradient_lower_bound"] = _at(grid, np.unravel_index(np.argmin(gnorm), gnorm.shape))

    rep.R2_est, rep.notes["derivatives"] = _derivative_bound(beta_tilde, grid, 4)
    rep.flags["bounded_derivatives"] = bool(np.isfinite(rep.R2_est))

    lam_min = pseudoconvexity_field(c, beta_tilde, grid)
    rep.C_pc_est = float(np.min(lam_min))
    rep.flags["pseudoconvexity"] = rep.C_pc_est > tol
    if not rep.flags["pseudoconvexity"]:
        rep.witness["pseudoconvexity"] = _at(grid, np.unravel_index(np.argmin(lam_min), lam_min.shape))
    rep.c_min_est = float(np.min(c.on_grid(grid)))
    return rep


def check_admissible_pair(c, beta_tilde, grid: StripGrid) -> AssumptionReport:
    """The sufficient condition on (c, beta_tilde(y)) that guarantees pseudo-convexity."""
    _require_analytic(c, beta_tilde)
    if sp.simplify(sp.diff(beta_tilde.expr, sym_x)) != 0:
        raise NotApplicable("the admissible-pair condition is stated only for beta_tilde = beta_tilde(y)")
    rep = AssumptionReport("admissible_pair")
    cv = c.on_grid(grid)
    cx, cy = c.gradient(grid)
    by = beta_tilde.on_grid(grid, dy=1)
    byy = beta_tilde.on_grid(grid, dy=2)
    first = -cv * cy * by
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_term = np.where(cy != 0, cv * by * (cx**2 + cy**2) / np.where(cy != 0, cy, 1.0),
                              np.where(cx == 0, 0.0, np.nan))
    second = ratio_term + 2 * cv**2 * (byy + by**2)
    second = np.where(np.isnan(second), -np.inf, second)
    for key, val in (("first_inequality", first), ("second_inequality", second)):
        vmin = float(np.min(val))
        rep.flags[key] = vmin > 0
        rep.notes[key + "_min"] = vmin
        if vmin <= 0:
            rep.witness[key] = _at(grid, np.unravel_index(np.argmin(val), val.shape))
    rep.r0_est = min(rep.notes["first_inequality_min"], rep.notes["second_inequality_min"])
    rep.c_min_est = float(np.min(cv))
    return rep
