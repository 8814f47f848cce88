"""Both sides of the Carleman, energy, coercivity and stability inequalities.

All weighted integrals use the shifted weights of :class:`WeightSet`, so every
reported term equals the true term times ``exp(2 s eta_ref)``.  Terms are
compared only in ratios or identities that carry the same factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, InvalidArgument
from .grid import (
    TOP,
    BoundaryTrace,
    StripGrid,
    div_c_grad,
    gradient,
    integrate_space,
    integrate_spacetime,
    integrate_trace,
    normal_trace_values,
    time_derivative,
    trapezoid_weights,
)
from .presets import AnalyticField
from .solver import extend_trace
from .weights import WeightSet

VANISH_TOL = 1e-10


def coefficient_arrays(c, grid: StripGrid):
    """(c, c_x, c_y) on the grid: exact for presets, finite differences for arrays."""
    if isinstance(c, AnalyticField):
        return (c.on_grid(grid),) + c.gradient(grid)
    cv = np.asarray(c, dtype=float)
    if cv.shape != grid.space_shape:
        raise InvalidArgument("coefficient does not match grid")
    return (cv,) + gradient(cv, grid)


def _check_field(q, grid):
    q = np.asarray(q)
    if q.shape != grid.shape:
        raise InvalidArgument(f"field shape {q.shape} does not match grid {grid.shape}")
    return q


def _ratio(num, den):
    if den > 0:
        return num / den
    return float("nan") if num == 0 else float("inf")


# ------------------------------------------------------------------ operators


def apply_H(q, c, grid: StripGrid):
    """H q = i q_t + div(c grad q)."""
    q = _check_field(q, grid)
    cv = coefficient_arrays(c, grid)[0]
    return 1j * time_derivative(q, grid) + div_c_grad(cv, q, grid)


def conjugate(q, W: WeightSet):
    """psi = exp(-s eta) q (shifted by exp(s eta_ref))."""
    return W.weight(1.0) * _check_field(q, W.grid)


def unconjugate(psi, W: WeightSet):
    return W.unweight_factor(1.0) * _check_field(psi, W.grid)


def apply_M1(psi, W: WeightSet, c, s=None):
    """M1 psi = i psi_t + div(c grad psi) + s^2 c |grad eta|^2 psi."""
    grid = W.grid
    psi = _check_field(psi, grid)
    s = W.s if s is None else s
    cv = coefficient_arrays(c, grid)[0]
    ex, ey = W.grad_eta()
    return 1j * time_derivative(psi, grid) + div_c_grad(cv, psi, grid) + s**2 * cv * (ex**2 + ey**2) * psi


def apply_M2(psi, W: WeightSet, c, s=None):
    """M2 psi = i s eta_t psi + 2 c s grad eta . grad psi + s div(c grad eta) psi."""
    grid = W.grid
    psi = _check_field(psi, grid)
    s = W.s if s is None else s
    cv, cx, cy = coefficient_arrays(c, grid)
    ex, ey = W.grad_eta()
    px, py = gradient(psi, grid)
    div_c_grad_eta = cx * ex + cy * ey + cv * W.lap_eta()
    return 1j * s * W.dt_eta() * psi + 2 * cv * s * (ex * px + ey * py) + s * div_c_grad_eta * psi


def conjugation_discrepancy(q, W: WeightSet, c):
    """(||(M1 + M2) psi - exp(-s eta) H q||, ||exp(-s eta) H q||) with psi = exp(-s eta) q."""
    psi = conjugate(q, W)
    lhs = apply_M1(psi, W, c) + apply_M2(psi, W, c)
    rhs = W.weight(1.0) * apply_H(q, c, W.grid)
    diff = integrate_spacetime(np.abs(lhs - rhs) ** 2, W.grid)
    ref = integrate_spacetime(np.abs(rhs) ** 2, W.grid)
    return np.sqrt(diff), np.sqrt(ref)


# ------------------------------------------------------------------ Carleman estimate


@dataclass
class CarlemanReport:
    s: float
    lam: float
    lhs_terms: dict
    rhs_terms: dict
    log_scale: float
    case_id: str = ""

    @property
    def lhs(self):
        return sum(self.lhs_terms.values())

    @property
    def rhs(self):
        return sum(self.rhs_terms.values())

    @property
    def ratio(self):
        return _ratio(self.lhs, self.rhs)

    @property
    def degenerate(self):
        return self.lhs == 0 and self.rhs == 0

    def row(self):
        return {"case": self.case_id, "s": self.s, "lambda": self.lam, **self.lhs_terms, **self.rhs_terms,
                "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio, "log_scale": self.log_scale}


def _require_dirichlet(q, tol=VANISH_TOL):
    scale = float(np.max(np.abs(q)))
    edge = max(float(np.max(np.abs(q[..., :, 0]))), float(np.max(np.abs(q[..., :, -1]))))
    if edge > tol * max(scale, np.finfo(float).tiny):
        raise InvalidArgument("field does not vanish on Gamma+ / Gamma-")


def carleman_sides(q, c, W: WeightSet, case_id: str = "") -> CarlemanReport:
    grid = W.grid
    q = _check_field(q, grid)
    _require_dirichlet(q)
    s, lam = W.s, W.lam
    w2 = W.weight(2.0)
    phi = W.phi()
    qx, qy = gradient(q, grid)
    psi = W.weight(1.0) * q
    lhs = {
        "T_q": s**3 * lam**4 * integrate_spacetime(w2 * phi**3 * np.abs(q) ** 2, grid),
        "T_grad": s * lam * integrate_spacetime(w2 * phi * (np.abs(qx) ** 2 + np.abs(qy) ** 2), grid),
        "T_M1": integrate_spacetime(np.abs(apply_M1(psi, W, c)) ** 2, grid),
        "T_M2": integrate_spacetime(np.abs(apply_M2(psi, W, c)) ** 2, grid),
    }
    dnu_q = normal_trace_values(q, grid, TOP)
    bdry = W.weight_top(2.0) * W.phi_top() * np.abs(dnu_q) ** 2 * W.dnu_beta_top()
    rhs = {
        "T_bdry": s * lam * integrate_trace(bdry, grid),
        "T_src": integrate_spacetime(w2 * np.abs(apply_H(q, c, grid)) ** 2, grid),
    }
    return CarlemanReport(s, lam, lhs, rhs, W.log_scale(2.0), case_id)


# ------------------------------------------------------------------ energy functionals


def compute_I(v_ext, W: WeightSet, c, block: int = 64):
    """Two evaluations of I: 2 Im int_{-T}^0 int M1 psi conj(psi), and int exp(-2 s eta(0)) |v(0)|^2.

    The first integrand is assembled ``block`` time levels at a time so that only
    levels up to t = 0 (plus a one-level halo for d/dt) are ever held in memory.
    """
    grid = W.grid
    if grid.span != "full":
        raise InvalidArgument("compute_I needs the time-extended field on a full grid")
    v_ext = _check_field(v_ext, grid)
    if block < 1:
        raise InvalidArgument("block must be >= 1")
    k0 = grid.zero_index
    cv = coefficient_arrays(c, grid)[0]
    per_level = np.empty(k0 + 1)
    for a in range(0, k0 + 1, block):
        b = min(a + block, k0 + 1)
        lo, hi = max(a - 1, 0), min(b + 1, grid.nt)
        if hi - lo < 3:
            hi = min(lo + 3, grid.nt)
        lv = slice(lo, hi)
        psi = W.weight(1.0, lv) * v_ext[lv]
        ex, ey = W.grad_eta(lv)
        m1 = 1j * np.gradient(psi, grid.dt, axis=0, edge_order=2)
        m1 += div_c_grad(cv, psi, grid) + W.s**2 * cv * (ex**2 + ey**2) * psi
        rows = slice(a - lo, b - lo)
        per_level[a:b] = integrate_space((m1[rows] * np.conj(psi[rows])).imag, grid)
    i_lhs = 2.0 * np.dot(trapezoid_weights(k0 + 1, grid.dt), per_level).item() if k0 > 0 else 0.0
    i_rhs = integrate_space(W.weight0(2.0) * np.abs(v_ext[k0]) ** 2, grid)
    return i_lhs, i_rhs


def _level(grid: StripGrid, t: float) -> int:
    if abs(t) > grid.T - grid.t_clamp + 1e-12 or t < grid.t0 - 1e-12:
        raise DomainError(f"t = {t} is outside the clamped time range of the grid")
    return grid.level_index(t)


def energy_density(v_level, k, c, W: WeightSet):
    """c phi^-1 exp(-2 s eta) |grad v|^2 at level k."""
    grid = W.grid
    cv = coefficient_arrays(c, grid)[0]
    vx, vy = gradient(v_level, grid)
    theta = 1.0 / ((grid.T + grid.t[k]) * (grid.T - grid.t[k]))
    phi = theta * np.exp(W.lam * W.beta)
    w2 = np.exp(-2 * W.s * (theta * (np.exp(2 * W.lam * W.K) - np.exp(W.lam * W.beta)) - W.eta_ref))
    return cv * w2 / phi * (np.abs(vx) ** 2 + np.abs(vy) ** 2)


def compute_E(v, t, c, W: WeightSet) -> float:
    """E(t) = int c phi^-1 exp(-2 s eta) |grad v|^2."""
    v = _check_field(v, W.grid)
    k = _level(W.grid, t)
    return integrate_space(energy_density(v[k], k, c, W), W.grid)


def compute_bigE(u, t, c, W: WeightSet) -> float:
    """int exp(-2 s eta) |u_t|^2 + int phi^-1 exp(-2 s eta) |grad u_t|^2 at time t."""
    grid = W.grid
    u = _check_field(u, grid)
    k = _level(grid, t)
    ut = time_derivative(u, grid)[k]
    ux, uy = gradient(ut, grid)
    w2 = W.weight(2.0, slice(k, k + 1))[0]
    phi = W.phi(slice(k, k + 1))[0]
    return integrate_space(w2 * np.abs(ut) ** 2 + w2 / phi * (np.abs(ux) ** 2 + np.abs(uy) ** 2), grid)


def energy_identity_terms(v, f, c, W: WeightSet, kappa: float, tau: float) -> dict:
    """E(tau) - E(kappa) and the four integrals on the right of the energy identity."""
    grid = W.grid
    if not kappa < tau:
        raise InvalidArgument("energy identity needs kappa < tau")
    v = _check_field(v, grid)
    f = _check_field(f, grid)
    k0, k1 = _level(grid, kappa), _level(grid, tau)
    sl = slice(k0, k1 + 1)
    s, lam = W.s, W.lam
    cv = coefficient_arrays(c, grid)[0]
    lo, hi = max(k0 - 1, 0), min(k1 + 2, grid.nt)
    if hi - lo < 3:
        lo, hi = (0, 3) if lo == 0 else (hi - 3, hi)
    vt = np.gradient(v[lo:hi], grid.dt, axis=0, edge_order=2)[k0 - lo:k1 + 1 - lo]
    vx, vy = gradient(v[sl], grid)
    w2 = W.weight(2.0, sl)
    phi_inv = W.phi_inv(sl)
    grad2 = np.abs(vx) ** 2 + np.abs(vy) ** 2
    beta_dot = W.beta_x * vx + W.beta_y * vy
    terms = {
        "E_tau": compute_E(v, tau, c, W),
        "E_kappa": compute_E(v, kappa, c, W),
        "source": -2.0 * _integrate_levels((w2 * f[sl] * phi_inv * np.conj(vt)).real, grid),
        "transport": _integrate_levels((cv * w2 * (-4 * s * lam + 2 * lam * phi_inv) * np.conj(vt) * beta_dot).real, grid),
        "eta_t": -2.0 * s * _integrate_levels(cv * w2 * phi_inv * W.dt_eta(sl) * grad2, grid),
        "phi_inv_t": _integrate_levels(cv * w2 * W.dt_phi_inv(sl) * grad2, grid),
    }
    lhs = terms["E_tau"] - terms["E_kappa"]
    rhs = terms["source"] + terms["transport"] + terms["eta_t"] + terms["phi_inv_t"]
    terms["residual"] = abs(lhs - rhs)
    terms["scale"] = abs(lhs) + sum(abs(terms[k]) for k in ("source", "transport", "eta_t", "phi_inv_t"))
    return terms


def _integrate_levels(field, grid: StripGrid):
    """Trapezoidal space-time integral of a block of consecutive levels."""
    per_level = integrate_space(field, grid)
    w = np.full(len(per_level), grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return float(np.dot(w, per_level))


def energy_identity_residual(v, f, c, W: WeightSet, kappa: float, tau: float) -> float:
    if kappa == tau:
        _level(W.grid, kappa)
        return 0.0
    return energy_identity_terms(v, f, c, W, kappa, tau)["residual"]


@dataclass
class EnergyRecord:
    s: float
    lam: float
    E0: float
    rhs_boundary: float
    rhs_source: float
    I_lhs: float = float("nan")
    I_rhs: float = float("nan")
    identity: dict = field(default_factory=dict)
    log_scale: float = 0.0
    case_id: str = ""

    @property
    def ratio(self):
        return _ratio(self.E0, self.rhs_boundary + self.rhs_source)

    def row(self):
        return {"case": self.case_id, "s": self.s, "lambda": self.lam, "E0": self.E0,
                "rhs_boundary": self.rhs_boundary, "rhs_source": self.rhs_source, "ratio": self.ratio,
                "I_lhs": self.I_lhs, "I_rhs": self.I_rhs, "log_scale": self.log_scale}


def energy_estimate_sides(v_ext, f, c, W: WeightSet):
    """(E(0), s^2 lam^2 boundary integral over (-T, T), s lam source integral over (0, T))."""
    full = W.grid
    if full.span != "full":
        raise InvalidArgument("energy estimate needs the time-extended v on a full grid")
    v_ext = _check_field(v_ext, full)
    s, lam = W.s, W.lam
    k0 = full.zero_index
    E0 = integrate_space(energy_density(v_ext[k0], k0, c, W), full)
    dnu_v = normal_trace_values(v_ext, full, TOP)
    rhs_b = s**2 * lam**2 * integrate_trace(W.weight_top(2.0) * W.phi_top() * W.dnu_beta_top() * np.abs(dnu_v) ** 2, full)
    fwd = replace(full, nt=k0 + 1, span="forward")
    f = np.asarray(f)
    if f.shape != fwd.shape:
        raise InvalidArgument("source must live on the forward half of the grid")
    Wf = W.on(fwd)
    rhs_s = s * lam * integrate_spacetime(Wf.weight(2.0) * np.abs(f) ** 2, fwd)
    return E0, rhs_b, rhs_s


# ------------------------------------------------------------------ P0 and gamma bounds


def _q0_arrays(q0, grid):
    """q0 and its derivatives needed by the gamma identities."""
    if isinstance(q0, AnalyticField):
        d = {k: q0.on_grid(grid, dx=k[0], dy=k[1]) for k in
             [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1), (3, 0), (1, 2), (2, 1), (0, 3)]}
    else:
        v = np.asarray(q0, dtype=float)
        gx, gy = gradient(v, grid)
        gxx, gxy = gradient(gx, grid)
        _, gyy = gradient(gy, grid)
        gxxx, gxxy = gradient(gxx, grid)
        _, gxyy = gradient(gxy, grid)
        _, gyyy = gradient(gyy, grid)
        d = {(0, 0): v, (1, 0): gx, (0, 1): gy, (2, 0): gxx, (0, 2): gyy, (1, 1): gxy,
             (3, 0): gxxx, (2, 1): gxxy, (1, 2): gxyy, (0, 3): gyyy}
    return d


def apply_P0(q0, g, grid: StripGrid):
    """P0 g = grad q0 . grad g."""
    d = _q0_arrays(q0, grid)
    gx, gy = gradient(np.asarray(g), grid)
    return d[1, 0] * gx + d[0, 1] * gy


def transversality(q0, W: WeightSet):
    """|grad beta . grad q0| per node."""
    d = _q0_arrays(q0, W.grid)
    return np.abs(W.beta_x * d[1, 0] + W.beta_y * d[0, 1])


def _require_compact(g, grid, name, layers=1, tol=VANISH_TOL):
    g = np.asarray(g)
    scale = max(float(np.max(np.abs(g))), np.finfo(float).tiny)
    ring = np.zeros(grid.space_shape, dtype=bool)
    ring[:layers + 1] = ring[-layers - 1:] = True
    ring[:, :layers + 1] = ring[:, -layers - 1:] = True
    if float(np.max(np.abs(g[ring]))) > tol * scale:
        raise InvalidArgument(f"{name} is not compactly supported inside the truncated strip")


def p0_inequality_sides(g, q0, W: WeightSet, r1_min: float = 1e-3):
    """(s^2 lam^2 int phi0 e^{-2 s eta0} |g|^2, int phi0^-1 e^{-2 s eta0} |P0 g|^2)."""
    grid = W.grid
    g = np.asarray(g)
    if g.shape != grid.space_shape:
        raise InvalidArgument("g does not match grid")
    _require_compact(g, grid, "g", layers=0)
    support = np.abs(g) > 0
    if np.any(support):
        tv = np.where(support, transversality(q0, W), np.inf)
        if float(np.min(tv)) < r1_min:
            ix, iy = np.unravel_index(np.argmin(tv), tv.shape)
            raise InvalidArgument(
                f"|grad beta . grad q0| = {np.min(tv):.3e} < {r1_min} at (x, y) = ({grid.x[ix]:.4g}, {grid.y[iy]:.4g})"
            )
    w0 = W.weight0(2.0)
    lhs = W.s**2 * W.lam**2 * integrate_space(W.phi0 * w0 * np.abs(g) ** 2, grid)
    rhs = integrate_space(w0 / W.phi0 * np.abs(apply_P0(q0, g, grid)) ** 2, grid)
    return lhs, rhs


def gamma_inequality_sides(gamma, v0, q0, W: WeightSet) -> dict:
    """Both sides of the two weighted gamma bounds and the residuals of the three transport identities.

    ``v0`` is d_t u(., 0) = (1/i) div(gamma grad q0).
    """
    grid = W.grid
    gamma = np.asarray(gamma, dtype=float)
    v0 = np.asarray(v0)
    _require_compact(gamma, grid, "gamma", layers=1)
    s, lam = W.s, W.lam
    d = _q0_arrays(q0, grid)
    lap = d[2, 0] + d[0, 2]
    lap_x = d[3, 0] + d[1, 2]
    lap_y = d[2, 1] + d[0, 3]
    gx, gy = gradient(gamma, grid)
    vx, vy = gradient(v0, grid)
    w0 = W.weight0(2.0)
    phi0 = W.phi0

    rec = {
        "lhs_gamma": s**2 * lam**2 * integrate_space(phi0 * w0 * gamma**2, grid),
        "rhs_gamma": integrate_space(w0 / phi0 * np.abs(v0) ** 2, grid),
        "lhs_grad": s**2 * lam**2 * integrate_space(w0 * (gx**2 + gy**2), grid),
        "rhs_grad": integrate_space(w0 / phi0 * (np.abs(vx) ** 2 + np.abs(vy) ** 2 + gamma**2), grid),
    }

    def p0(h):
        hx, hy = gradient(h, grid)
        return d[1, 0] * hx + d[0, 1] * hy

    r0 = p0(gamma) - (1j * v0 - gamma * lap)
    rx = p0(gx) - (1j * vx - gx * (lap + d[2, 0]) - gy * d[1, 1] - gamma * lap_x)
    ry = p0(gy) - (1j * vy - gy * (lap + d[0, 2]) - gx * d[1, 1] - gamma * lap_y)
    inner = (slice(2, -2), slice(2, -2))
    rec["residual_gamma"] = float(np.max(np.abs(r0[inner])))
    rec["residual_dx"] = float(np.max(np.abs(rx[inner])))
    rec["residual_dy"] = float(np.max(np.abs(ry[inner])))
    rec["ratio_gamma"] = _ratio(rec["lhs_gamma"], rec["rhs_gamma"])
    rec["ratio_grad"] = _ratio(rec["lhs_grad"], rec["rhs_grad"])
    return rec


# ------------------------------------------------------------------ stability


@dataclass(frozen=True)
class StabilityRatio:
    numerator: float
    denominator: float

    @property
    def ratio(self) -> float:
        return _ratio(self.numerator, self.denominator)

    @property
    def degenerate(self) -> bool:
        return self.numerator == 0 and self.denominator == 0

    @property
    def unresolved(self) -> bool:
        """Nonzero perturbation but identical observations at this resolution."""
        return self.numerator > 0 and self.denominator == 0


def weighted_h1_norm2(gamma, W: WeightSet):
    """int phi0 exp(-2 s eta0) (|gamma|^2 + |grad gamma|^2)."""
    grid = W.grid
    gamma = np.asarray(gamma, dtype=float)
    gx, gy = gradient(gamma, grid)
    return integrate_space(W.phi0 * W.weight0(2.0) * (gamma**2 + gx**2 + gy**2), grid)


def stability_ratio(c, c_tilde, obs: BoundaryTrace, obs_tilde: BoundaryTrace, W: WeightSet) -> StabilityRatio:
    """Weighted H1 norm of c_tilde - c over the weighted Gamma+ norm of the observation difference."""
    cv = coefficient_arrays(c, obs.grid)[0]
    ctv = coefficient_arrays(c_tilde, obs.grid)[0]
    gamma = ctv - cv
    _require_compact(gamma, obs.grid, "c_tilde - c", layers=1)
    diff = extend_trace(obs - obs_tilde)
    full = diff.grid
    Wf = W.on(full)
    num = weighted_h1_norm2(gamma, Wf)
    den = integrate_trace(Wf.phi_top() * Wf.weight_top(2.0) * Wf.dnu_beta_top() * np.abs(diff.values) ** 2, full)
    return StabilityRatio(num, den)
