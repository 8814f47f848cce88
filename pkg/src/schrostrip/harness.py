"""Experiment harness: runs one subcommand for a RunConfig and persists its results.

Every command writes per-case CSVs under ``<out>/<command>/``, a merged CSV per
table, the resolved config snapshot and a text summary with one PASS/FAIL line
per verdict.  Independent cases go to a process pool; results are merged in
case order, so the CSV bytes do not depend on the worker count.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from importlib import metadata
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .batteries import BumpShape, carleman_field_battery, g_battery, gamma_battery
from .carleman import (
    carleman_sides,
    compute_I,
    conjugation_discrepancy,
    energy_estimate_sides,
    energy_identity_terms,
    gamma_inequality_sides,
    p0_inequality_sides,
    stability_ratio,
    weighted_h1_norm2,
)
from .config import RunConfig, emit_config
from .csvio import fmt, write_field, write_rows, write_trace
from .errors import NotApplicable, StripError
from .grid import TOP, BoundaryTrace, StripGrid, make_grid
from .inversion import (
    DescentSettings,
    InversionProblem,
    add_noise,
    box_window,
    carleman_boundary_weight,
    misfit,
    misfit_and_gradient,
    reconstruct,
    restrict_trace,
)
from .presets import (
    beta_preset,
    bump_values,
    coefficient_preset,
    manufactured_preset,
    poly_bump_values,
    q0_preset,
)
from .solver import (
    CrankNicolson,
    ForwardProblem,
    discrete_l2_norm,
    extend_time,
    initial_v,
    manufactured_rhs,
    observation,
    solve_forward,
    solve_v,
    source_v,
    steady_lift,
)
from .weights import (
    build_weights,
    check_admissible_pair,
    check_beta_assumptions,
    check_coefficient_assumptions,
)

COMMANDS = ("check-assumptions", "forward", "verify-carleman", "verify-energy", "verify-p0",
            "verify-stability", "reconstruct")


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


@dataclass
class RunRecord:
    command: str
    config_snapshot: str
    version: str
    wall_clock: float = 0.0
    csv_paths: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    out_dir: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(v.passed for v in self.verdicts)

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def verdict(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    def summary(self) -> str:
        lines = [f"command: {self.command}", f"version: {self.version}",
                 f"wall_clock_s: {self.wall_clock:.3f}", ""]
        lines += [v.line() for v in self.verdicts]
        for table in self.tables:
            lines += ["", *table]
        if self.notes:
            lines += ["", *(f"note: {n}" for n in self.notes)]
        lines += ["", f"overall: {'PASS' if self.passed else 'FAIL'}"]
        return "\n".join(lines) + "\n"


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.1.0"


# ------------------------------------------------------------------ shared helpers


def _map(fn, args, jobs: int, rec: RunRecord | None = None):
    """Ordered map, in a spawn-context process pool when jobs > 1.

    A pool that dies (typically a worker killed for memory) is replaced by a
    serial rerun of the whole batch, noted on ``rec``.
    """
    args = list(args)
    if jobs <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    try:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args)), mp_context=get_context("spawn")) as pool:
            return list(pool.map(fn, args))
    except BrokenProcessPool:
        if rec is not None:
            rec.notes.append(f"worker pool died during {getattr(fn, '__name__', 'map')}; reran serially")
        return [fn(a) for a in args]


def _guarded(fn, case_id, *args):
    """Run one case; module errors come back as data so the other cases still persist."""
    try:
        return {"case": case_id, "ok": True, **fn(*args)}
    except StripError as exc:
        return {"case": case_id, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def main_grid(cfg: RunConfig, span: str = "forward") -> StripGrid:
    g = cfg.grid
    return make_grid(L=g.L, d=g.d, T=g.T, nx=g.nx, ny=g.ny, nt=g.nt, t_clamp=g.t_clamp, span=span)


def ladder_grid(cfg: RunConfig, factor: int, span: str = "forward") -> StripGrid:
    lad = cfg.ladder
    return make_grid(L=lad.L, d=cfg.grid.d, T=lad.T, nx=(lad.nx - 1) * factor + 1, ny=(lad.ny - 1) * factor + 1,
                     nt=(lad.nt - 1) * factor + 1, t_clamp=lad.t_clamp, span=span)


def problem_gamma(cfg: RunConfig, grid: StripGrid, c_values) -> np.ndarray:
    """The configured single perturbation gamma = amplitude * c * shape."""
    p = cfg.problem
    X, Y = grid.mesh
    if p.gamma == "none":
        return np.zeros(grid.space_shape)
    if p.gamma == "poly_bump":
        shape = poly_bump_values(X, Y, p.gamma_center, p.gamma_radii, power=p.gamma_power)
    else:
        shape = bump_values(X, Y, p.gamma_center, p.gamma_radii)
    return p.gamma_amplitude * np.asarray(c_values) * shape


def battery_shape(cfg: RunConfig) -> BumpShape:
    b = cfg.battery
    return BumpShape(x_center=(-b.x_center_max, b.x_center_max), x_radius=(b.x_radius_min, b.x_radius_max),
                     y_offset_max=b.y_offset_max, y_radius_min=b.y_radius_min)


def _gammas(cfg: RunConfig, grid: StripGrid, c_values, rng):
    b = cfg.battery
    return gamma_battery(grid, c_values, b.size, rng, battery_shape(cfg), (b.amplitude_min, b.amplitude_max))


def finest_order(errors) -> float:
    """log2 of the error ratio over the finest pair of a factor-2 ladder."""
    e = np.asarray(errors, dtype=float)
    if len(e) < 2 or e[-1] <= 0 or e[-2] <= 0:
        return float("nan")
    return float(np.log2(e[-2] / e[-1]))


def _growths(maxima):
    m = np.asarray(maxima, dtype=float)
    return m[1:] / m[:-1]


def _g(x) -> str:
    """Short number form for verdict and case labels."""
    return f"{float(x):g}"


def _case_path(out: Path, name: str) -> Path:
    return out / "cases" / f"{name}.csv"


def _error_verdicts(results):
    return [Verdict(f"case[{r['case']}]", False, r["error"]) for r in results if not r["ok"]]


def _table(title, header, rows):
    widths = [max(len(str(h)), 12) for h in header]
    lines = [title, "  ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    for row in rows:
        cells = [f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v) for v in row]
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return lines


# ------------------------------------------------------------------ check-assumptions


def _run_check_assumptions(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    grid = main_grid(cfg)
    c = coefficient_preset(cfg.problem.c)
    bt = beta_preset(cfg.weights.beta)
    reports = [check_coefficient_assumptions(c, grid), check_beta_assumptions(c, bt, grid)]
    try:
        reports.append(check_admissible_pair(c, bt, grid))
    except NotApplicable as exc:
        rec.notes.append(f"admissible_pair not evaluated: {exc}")
    clause_rows, est_rows = [], []
    for rep in reports:
        rows, est = rep.rows()
        clause_rows += rows
        est_rows += [(rep.name, k, v) for k, v in est.items() if np.isfinite(v)]
        for name, clause, verdict, wx, wy in rows:
            detail = "" if verdict == "PASS" else f"witness (x, y) = ({fmt(wx)}, {fmt(wy)})"
            rec.verdicts.append(Verdict(f"{name}.{clause}", verdict == "PASS", detail))
    rec.csv_paths.append(write_rows(out / "assumptions.csv", ("report", "clause", "verdict", "witness_x", "witness_y"),
                                    clause_rows))
    rec.csv_paths.append(write_rows(out / "estimates.csv", ("report", "estimate", "value"), est_rows))
    rec.tables.append(_table("estimates", ("report", "estimate", "value"), est_rows))


# ------------------------------------------------------------------ forward


def _manufactured_case(args):
    cfg, name, coef = args

    def body():
        c = coefficient_preset(coef)
        q_ex = manufactured_preset(name, cfg.grid.d)
        rows = []
        for f in cfg.ladder.factors:
            g = ladder_grid(cfg, f)
            src, b, q0 = manufactured_rhs(q_ex, c, g)
            q = solve_forward(ForwardProblem(c.on_grid(g), q0, boundary=b, source=src), g)
            rows.append((f, g.hx, g.hy, g.dt, float(np.max(np.abs(q - b)))))
        return {"rows": rows}

    return _guarded(body, f"manufactured[{name},c={coef}]")


def _drift_case(args):
    cfg, coef = args

    def body():
        g = main_grid(cfg)
        X, Y = g.mesh
        q0 = np.exp(-X**2) * np.cos(np.pi * Y / g.d)
        q0[g.boundary_mask] = 0.0
        zero = np.zeros(g.space_shape)
        q = CrankNicolson(coefficient_preset(coef).on_grid(g), g).run(q0.astype(complex), lambda n: zero)
        norms = discrete_l2_norm(q, g)
        return {"drift": float(np.max(np.abs(norms / norms[0] - 1.0))), "norm0": float(norms[0])}

    return _guarded(body, f"drift[c={coef}]")


def _run_forward(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    grid = main_grid(cfg)
    c = coefficient_preset(cfg.problem.c)
    cv = c.on_grid(grid)
    q0 = q0_preset(cfg.problem.q0).on_grid(grid)
    ct = cv + problem_gamma(cfg, grid, cv)
    q = solve_forward(ForwardProblem(ct, q0), grid)
    obs = observation(q, grid)
    rng = np.random.default_rng(cfg.seed)
    obs = add_noise(obs, cfg.problem.noise, rng)
    rec.csv_paths.append(write_trace(out / "observation.csv", obs))
    rec.csv_paths.append(write_field(out / "final_level.csv", q[-1], grid, t_value=float(grid.t[-1])))

    coefs = list(dict.fromkeys(["constant:1", cfg.problem.c]))
    man = [(cfg, name, coef) for name in cfg.problem.manufactured for coef in coefs]
    results = _map(_manufactured_case, man, jobs, rec) + _map(_drift_case, [(cfg, cf) for cf in coefs], jobs, rec)
    rec.verdicts += _error_verdicts(results)
    th = cfg.thresholds
    ladder_rows, table = [], []
    for r in results:
        if not r["ok"]:
            continue
        if "rows" in r:
            errs = [row[-1] for row in r["rows"]]
            order = finest_order(errs)
            path = write_rows(_case_path(out, r["case"]), ("factor", "hx", "hy", "dt", "max_error"), r["rows"])
            rec.csv_paths.append(path)
            ladder_rows += [(r["case"], *row) for row in r["rows"]]
            table.append((r["case"], errs[-1], order))
            rec.verdicts.append(Verdict(f"{r['case']}.order", order >= th.order_min,
                                        f"order {order:.3f} (min {th.order_min})"))
        else:
            rec.verdicts.append(Verdict(f"{r['case']}", r["drift"] <= th.drift_max,
                                        f"relative drift {r['drift']:.3e} (max {th.drift_max:.1e})"))
            table.append((r["case"], r["drift"], float("nan")))
    rec.csv_paths.append(write_rows(out / "manufactured_ladder.csv", ("case", "factor", "hx", "hy", "dt", "max_error"),
                                    ladder_rows))
    rec.tables.append(_table("solver verification", ("case", "value", "order"), table))


# ------------------------------------------------------------------ verify-carleman


def _conjugation_case(args):
    cfg, name, lam, s = args

    def body():
        c = coefficient_preset(cfg.problem.c)
        bt = beta_preset(cfg.weights.beta)
        rows = []
        for f in cfg.ladder.factors:
            g = ladder_grid(cfg, f, span="full")
            q = manufactured_preset(name, cfg.grid.d).on_spacetime(g)
            W = build_weights(bt, g, lam, s, cfg.weights.m)
            err, ref = conjugation_discrepancy(q, W, c)
            rows.append((f, g.hx, g.dt, err, ref, err / ref))
        return {"rows": rows}

    return _guarded(body, f"conjugation[{name},lambda={_g(lam)},s={_g(s)}]")


def _carleman_case(args):
    cfg, index = args

    def body():
        g = main_grid(cfg, span="full")
        c = coefficient_preset(cfg.problem.c)
        bt = beta_preset(cfg.weights.beta)
        if index < 0:
            q = np.zeros(g.shape, dtype=complex)
        else:
            q = carleman_field_battery(g, cfg.battery.size, np.random.default_rng(cfg.seed))[index]
        rows = []
        for lam in cfg.weights.lam:
            W0 = build_weights(bt, g, lam, cfg.weights.s[0], cfg.weights.m)
            for s in cfg.weights.s:
                rep = carleman_sides(q, c, W0.with_s(s), case_id=_field_case_id(index))
                rows.append({**rep.row(), "degenerate": rep.degenerate})
        return {"rows": rows}

    return _guarded(body, _field_case_id(index))


def _field_case_id(index):
    return "zero" if index < 0 else f"field_{index:03d}"


def _ratio_sweep_verdicts(rec, label, rows, key, th):
    """Finite ratios and bounded growth of the battery maximum between consecutive s."""
    table = []
    by_lam = {}
    for r in rows:
        by_lam.setdefault(r["lambda"], {}).setdefault(r["s"], []).append(r[key])
    for lam, per_s in by_lam.items():
        svals = sorted(per_s)
        finite = all(np.isfinite(v) for s in svals for v in per_s[s])
        rec.verdicts.append(Verdict(f"{label}.finite[lambda={_g(lam)}]", finite,
                                    f"{sum(len(per_s[s]) for s in svals)} ratios"))
        maxima = [max(per_s[s]) for s in svals]
        for (s0, s1), gr in zip(zip(svals, svals[1:]), _growths(maxima)):
            rec.verdicts.append(Verdict(f"{label}.growth[lambda={_g(lam)},s={_g(s0)}->{_g(s1)}]",
                                        bool(gr <= th.growth_max), f"max ratio grows by {gr:.4g} (max {th.growth_max})"))
        for s, m in zip(svals, maxima):
            table.append((lam, s, min(per_s[s]), m))
    rec.tables.append(_table(f"{label} battery ratios", ("lambda", "s", "min", "max"), table))


def _run_verify_carleman(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    th = cfg.thresholds
    conj = [(cfg, name, lam, s) for name in cfg.problem.manufactured for lam in cfg.ladder.lam for s in cfg.ladder.s]
    cases = [(cfg, i) for i in range(cfg.battery.size)] + [(cfg, -1)]
    results = _map(_conjugation_case, conj, jobs, rec) + _map(_carleman_case, cases, jobs, rec)
    rec.verdicts += _error_verdicts(results)

    conj_rows, table = [], []
    for r in results:
        if not r["ok"] or r["case"].startswith(("field", "zero")):
            continue
        rel = [row[-1] for row in r["rows"]]
        order = finest_order(rel)
        rec.csv_paths.append(write_rows(_case_path(out, r["case"]),
                                        ("factor", "hx", "dt", "discrepancy", "reference", "relative"), r["rows"]))
        conj_rows += [(r["case"], *row) for row in r["rows"]]
        table.append((r["case"], rel[-1], order))
        rec.verdicts.append(Verdict(f"{r['case']}.order", order >= th.order_min, f"order {order:.3f} (min {th.order_min})"))
    rec.csv_paths.append(write_rows(out / "conjugation_ladder.csv",
                                    ("case", "factor", "hx", "dt", "discrepancy", "reference", "relative"), conj_rows))
    rec.tables.append(_table("conjugation identity", ("case", "relative", "order"), table))

    header = ("case", "s", "lambda", "T_q", "T_grad", "T_M1", "T_M2", "T_bdry", "T_src", "lhs", "rhs", "ratio",
              "log_scale", "degenerate")
    all_rows = []
    for r in results:
        if not r["ok"] or not r["case"].startswith(("field", "zero")):
            continue
        rows = [tuple(row[h] for h in header) for row in r["rows"]]
        rec.csv_paths.append(write_rows(_case_path(out, r["case"]), header, rows))
        all_rows += r["rows"]
        if r["case"] == "zero":
            ok = all(row["degenerate"] for row in r["rows"])
            rec.verdicts.append(Verdict("carleman.zero_field_degenerate", ok, "all terms zero, excluded from ratios"))
    rec.csv_paths.append(write_rows(out / "carleman_ratios.csv", header,
                                    [tuple(row[h] for h in header) for row in all_rows]))
    live = [row for row in all_rows if not row["degenerate"]]
    _ratio_sweep_verdicts(rec, "carleman", live, "ratio", th)


# ------------------------------------------------------------------ verify-energy


def _solved_v(cfg: RunConfig, g: StripGrid, cv, gam):
    """(v, f) for the perturbation gam; the forward solution is dropped as soon as possible."""
    q0 = q0_preset(cfg.problem.q0).on_grid(g)
    qt = solve_forward(ForwardProblem(cv + gam, q0), g)
    v = solve_v(cv, gam, qt, q0, g)
    fsrc = source_v(gam, qt, g)
    return v, fsrc


def _energy_ladder_case(args):
    cfg, factor = args

    def body():
        c = coefficient_preset(cfg.problem.c)
        bt = beta_preset(cfg.weights.beta)
        g = ladder_grid(cfg, factor)
        cv = c.on_grid(g)
        v, fsrc = _solved_v(cfg, g, cv, problem_gamma(cfg, g, cv))
        b = cfg.battery
        residuals = {}
        for lam in cfg.ladder.lam:
            for s in cfg.ladder.s:
                Wf = build_weights(bt, g, lam, s, cfg.weights.m)
                res = []
                for kf, tf in zip(b.kappa, b.tau):
                    kap = float(g.t[int(round(kf * (g.nt - 1)))])
                    tau = float(g.t[int(round(tf * (g.nt - 1)))])
                    terms = energy_identity_terms(v, fsrc, cv, Wf, kap, tau)
                    res.append(terms["residual"] / terms["scale"])
                residuals[lam, s] = res
        del fsrc
        ve, full = extend_time(v, g)
        del v
        rows = []
        for lam in cfg.ladder.lam:
            for s in cfg.ladder.s:
                i_lhs, i_rhs = compute_I(ve, build_weights(bt, full, lam, s, cfg.weights.m), c)
                rows.append((factor, lam, s, i_lhs, i_rhs, abs(i_lhs - i_rhs) / i_rhs, *residuals[lam, s]))
        return {"rows": rows}

    return _guarded(body, f"ladder[factor={factor}]")


def _energy_I_case(args):
    """Both evaluations of I for one battery perturbation on the ladder base grid."""
    cfg, index = args

    def body():
        c = coefficient_preset(cfg.problem.c)
        bt = beta_preset(cfg.weights.beta)
        g = ladder_grid(cfg, 1)
        cv = c.on_grid(g)
        gam = _gammas(cfg, g, cv, np.random.default_rng(cfg.seed))[index]
        v, _ = _solved_v(cfg, g, cv, gam)
        ve, full = extend_time(v, g)
        rows = []
        for lam in cfg.ladder.lam:
            for s in cfg.ladder.s:
                i_lhs, i_rhs = compute_I(ve, build_weights(bt, full, lam, s, cfg.weights.m), c)
                rows.append({"case": f"gamma_{index:03d}", "s": s, "lambda": lam, "I_lhs": i_lhs, "I_rhs": i_rhs})
        return {"rows": rows}

    return _guarded(body, f"I_gamma_{index:03d}")


def _energy_battery_case(args):
    cfg, index = args

    def body():
        g = main_grid(cfg)
        c = coefficient_preset(cfg.problem.c)
        bt = beta_preset(cfg.weights.beta)
        cv = c.on_grid(g)
        gam = _gammas(cfg, g, cv, np.random.default_rng(cfg.seed))[index]
        v, fsrc = _solved_v(cfg, g, cv, gam)
        ve, full = extend_time(v, g)
        del v
        rows = []
        for lam in cfg.weights.lam:
            W0 = build_weights(bt, full, lam, cfg.weights.s[0], cfg.weights.m)
            for s in cfg.weights.s:
                W = W0.with_s(s)
                E0, rb, rs = energy_estimate_sides(ve, fsrc, c, W)
                ratio = E0 / (rb + rs) if rb + rs > 0 else float("inf")
                rows.append({"case": f"gamma_{index:03d}", "s": s, "lambda": lam, "E0": E0, "rhs_boundary": rb,
                             "rhs_source": rs, "ratio": ratio, "log_scale": W.log_scale(2.0)})
        return {"rows": rows}

    return _guarded(body, f"gamma_{index:03d}")


def _persist_dict_rows(rec, out, results, header, merged_name):
    rows = [row for r in results if r["ok"] for row in r["rows"]]
    for r in results:
        if r["ok"]:
            rec.csv_paths.append(write_rows(_case_path(out, r["case"]), header,
                                            [tuple(row[h] for h in header) for row in r["rows"]]))
    rec.csv_paths.append(write_rows(out / merged_name, header, [tuple(row[h] for h in header) for row in rows]))
    return rows


def _run_verify_energy(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    th = cfg.thresholds
    b = cfg.battery
    ladder = _map(_energy_ladder_case, [(cfg, f) for f in cfg.ladder.factors], jobs, rec)
    i_battery = _map(_energy_I_case, [(cfg, i) for i in range(b.size)], jobs, rec)
    battery = _map(_energy_battery_case, [(cfg, i) for i in range(b.size)], jobs, rec)
    rec.verdicts += _error_verdicts(ladder + i_battery + battery)

    pairs = [f"identity[kappa={_g(k)},tau={_g(t)}]" for k, t in zip(b.kappa, b.tau)]
    lhead = ("factor", "lambda", "s", "I_lhs", "I_rhs", "I_relative", *pairs)
    lrows = [row for r in ladder if r["ok"] for row in r["rows"]]
    for r in ladder:
        if r["ok"]:
            rec.csv_paths.append(write_rows(_case_path(out, r["case"]), lhead, r["rows"]))
    rec.csv_paths.append(write_rows(out / "energy_ladder.csv", lhead, lrows))
    table = []
    if all(r["ok"] for r in ladder):
        for lam in cfg.ladder.lam:
            for s in cfg.ladder.s:
                rows = sorted((row for row in lrows if row[1] == lam and row[2] == s), key=lambda row: row[0])
                tag = f"lambda={_g(lam)},s={_g(s)}"
                order = finest_order([row[5] for row in rows])
                rec.verdicts.append(Verdict(f"I_two_evaluations[{tag}].order", order >= th.order_min,
                                            f"order {order:.3f} (min {th.order_min})"))
                table.append((f"I[{tag}]", rows[-1][5], order))
                nonneg = all(row[3] >= 0 for row in rows)
                rec.verdicts.append(Verdict(f"I_nonnegative[ladder,{tag}]", nonneg,
                                            f"min I_lhs {min(row[3] for row in rows):.4g}"))
                for j, name in enumerate(pairs):
                    order = finest_order([row[6 + j] for row in rows])
                    rec.verdicts.append(Verdict(f"{name}[{tag}].order", order >= th.order_min,
                                                f"order {order:.3f} (min {th.order_min})"))
                    table.append((f"{name}[{tag}]", rows[-1][6 + j], order))
    rec.tables.append(_table("refinement ladders", ("quantity", "finest value", "order"), table))

    irows = _persist_dict_rows(rec, out, i_battery, ("case", "s", "lambda", "I_lhs", "I_rhs"), "I_battery.csv")
    if irows:
        rec.verdicts.append(Verdict("I_nonnegative[battery]", all(row["I_lhs"] >= 0 for row in irows),
                                    f"min I_lhs {min(row['I_lhs'] for row in irows):.4g} over {len(irows)} rows"))

    header = ("case", "s", "lambda", "E0", "rhs_boundary", "rhs_source", "ratio", "log_scale")
    brows = _persist_dict_rows(rec, out, battery, header, "energy_estimate.csv")
    if brows:
        _ratio_sweep_verdicts(rec, "energy_estimate", brows, "ratio", th)


# ------------------------------------------------------------------ verify-p0


def _p0_case(args):
    cfg, kind, index = args

    def body():
        g = main_grid(cfg)
        bt = beta_preset(cfg.weights.beta)
        q0f = q0_preset(cfg.problem.q0)
        rng = np.random.default_rng(cfg.seed)
        cv = coefficient_preset(cfg.problem.c).on_grid(g)
        gams = _gammas(cfg, g, cv, rng)
        gs = g_battery(g, cfg.battery.g_size, rng, battery_shape(cfg))
        rows = []
        for lam in cfg.weights.lam:
            W0 = build_weights(bt, g, lam, cfg.weights.s[0], cfg.weights.m)
            for s in cfg.weights.s:
                W = W0.with_s(s)
                if kind == "g":
                    lhs, rhs = p0_inequality_sides(gs[index], q0f, W)
                    rows.append({"case": f"g_{index:03d}", "s": s, "lambda": lam, "lhs": lhs, "rhs": rhs,
                                 "ratio": lhs / rhs if rhs > 0 else float("inf")})
                else:
                    gam = gams[index]
                    r = gamma_inequality_sides(gam, initial_v(gam, q0f.on_grid(g), g), q0f, W)
                    rows.append({"case": f"gamma_{index:03d}", "s": s, "lambda": lam, **r})
        return {"rows": rows, "kind": kind}

    return _guarded(body, f"{kind}_{index:03d}")


def _run_verify_p0(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    th = cfg.thresholds
    args = [(cfg, "g", i) for i in range(cfg.battery.g_size)] + [(cfg, "gamma", i) for i in range(cfg.battery.size)]
    results = _map(_p0_case, args, jobs, rec)
    rec.verdicts += _error_verdicts(results)
    gh = ("case", "s", "lambda", "lhs", "rhs", "ratio")
    mh = ("case", "s", "lambda", "lhs_gamma", "rhs_gamma", "ratio_gamma", "lhs_grad", "rhs_grad", "ratio_grad",
          "residual_gamma", "residual_dx", "residual_dy")
    grows, mrows = [], []
    for r in results:
        if not r["ok"]:
            continue
        head = gh if r["kind"] == "g" else mh
        rec.csv_paths.append(write_rows(_case_path(out, r["case"]), head, [tuple(x[h] for h in head) for x in r["rows"]]))
        (grows if r["kind"] == "g" else mrows).extend(r["rows"])
    rec.csv_paths.append(write_rows(out / "p0_ratios.csv", gh, [tuple(x[h] for h in gh) for x in grows]))
    rec.csv_paths.append(write_rows(out / "gamma_ratios.csv", mh, [tuple(x[h] for h in mh) for x in mrows]))
    if grows:
        _ratio_sweep_verdicts(rec, "p0", grows, "ratio", th)
    if mrows:
        _ratio_sweep_verdicts(rec, "gamma_bound", mrows, "ratio_gamma", th)
        _ratio_sweep_verdicts(rec, "gamma_gradient_bound", mrows, "ratio_grad", th)


# ------------------------------------------------------------------ verify-stability


def _stability_case(args):
    cfg, index, obs_values = args

    def body():
        g = main_grid(cfg)
        c = coefficient_preset(cfg.problem.c)
        bt = beta_preset(cfg.weights.beta)
        cv = c.on_grid(g)
        q0 = q0_preset(cfg.problem.q0).on_grid(g)
        gam = _gammas(cfg, g, cv, np.random.default_rng(cfg.seed))[index]
        obs = BoundaryTrace(TOP, obs_values, g)
        rows = []
        for scale in cfg.battery.scales:
            ct = cv + scale * gam
            obs_t = observation(solve_forward(ForwardProblem(ct, q0), g), g)
            for lam in cfg.weights.lam:
                W0 = build_weights(bt, g, lam, cfg.weights.s[0], cfg.weights.m)
                for s in cfg.weights.s:
                    sr = stability_ratio(cv, ct, obs, obs_t, W0.with_s(s))
                    rows.append({"case": f"gamma_{index:03d}", "scale": scale, "s": s, "lambda": lam,
                                 "numerator": sr.numerator, "denominator": sr.denominator, "ratio": sr.ratio,
                                 "degenerate": sr.degenerate, "unresolved": sr.unresolved})
        return {"rows": rows}

    return _guarded(body, f"gamma_{index:03d}")


def _run_verify_stability(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    th = cfg.thresholds
    g = main_grid(cfg)
    cv = coefficient_preset(cfg.problem.c).on_grid(g)
    q0 = q0_preset(cfg.problem.q0).on_grid(g)
    obs = observation(solve_forward(ForwardProblem(cv, q0), g), g)
    results = _map(_stability_case, [(cfg, i, obs.values) for i in range(cfg.battery.size)], jobs, rec)
    rec.verdicts += _error_verdicts(results)
    header = ("case", "scale", "s", "lambda", "numerator", "denominator", "ratio", "degenerate", "unresolved")
    rows = []
    for r in results:
        if r["ok"]:
            rec.csv_paths.append(write_rows(_case_path(out, r["case"]), header,
                                            [tuple(x[h] for h in header) for x in r["rows"]]))
            rows += r["rows"]
    rec.csv_paths.append(write_rows(out / "stability_ratios.csv", header, [tuple(x[h] for h in header) for x in rows]))
    if not rows:
        return
    bad = [x for x in rows if x["degenerate"] or x["unresolved"]]
    rec.verdicts.append(Verdict("stability.resolved", not bad, f"{len(bad)} degenerate or unresolved rows"))
    scales = cfg.battery.scales
    table = []
    for lam in cfg.weights.lam:
        for s in cfg.weights.s:
            tag = f"lambda={_g(lam)},s={_g(s)}"
            sel = [x for x in rows if x["lambda"] == lam and x["s"] == s]
            base = {x["case"]: x["ratio"] for x in sel if x["scale"] == scales[0]}
            vals = np.array(list(base.values()))
            spread = float(vals.max() / vals.min())
            rec.verdicts.append(Verdict(f"stability.spread[{tag}]", spread <= th.spread_max,
                                        f"max/min {spread:.4g} (max {th.spread_max})"))
            change = 0.0
            for other in scales[1:]:
                for x in sel:
                    if x["scale"] == other:
                        change = max(change, abs(x["ratio"] / base[x["case"]] - 1.0))
            if len(scales) > 1:
                rec.verdicts.append(Verdict(f"stability.scale_invariance[{tag}]", change <= th.scale_change_max,
                                            f"max relative change {change:.4g} (max {th.scale_change_max})"))
            table.append((lam, s, float(vals.min()), float(vals.max()), spread, change))
    rec.tables.append(_table("stability ratios", ("lambda", "s", "min", "max", "spread", "scale change"), table))


# ------------------------------------------------------------------ reconstruct


def inversion_problem(cfg: RunConfig, g: StripGrid) -> InversionProblem:
    inv = cfg.inversion
    cv = coefficient_preset(cfg.problem.c).on_grid(g)
    q0 = steady_lift(cv, q0_preset(cfg.problem.q0).on_grid(g), g)
    weight = None
    if inv.weighted_misfit:
        bt = beta_preset(cfg.weights.beta)
        weight = carleman_boundary_weight(build_weights(bt, g, cfg.weights.lam[0], cfg.weights.s[0], cfg.weights.m))
    window = box_window(g, inv.window_x, inv.window_y, inv.window_center)
    return InversionProblem(g, cv, q0, window, weight)


def synthetic_data(cfg: RunConfig, g: StripGrid) -> BoundaryTrace:
    """Observation for c + gamma computed on a refined grid, restricted to ``g``, plus noise."""
    refine = cfg.inversion.data_refinement
    fine = g.refined(refine) if refine > 1 else g
    cf = coefficient_preset(cfg.problem.c).on_grid(fine)
    q0 = steady_lift(cf, q0_preset(cfg.problem.q0).on_grid(fine), fine)
    data = observation(solve_forward(ForwardProblem(cf + problem_gamma(cfg, fine, cf), q0), fine), fine)
    if fine is not g:
        data = restrict_trace(data, g)
    return add_noise(data, cfg.problem.noise, np.random.default_rng(cfg.seed))


def _gradient_point(args):
    cfg, point, c0, data_values = args

    def body():
        g = main_grid(cfg)
        problem = inversion_problem(cfg, g)
        data = BoundaryTrace(TOP, data_values, g)
        rng = np.random.default_rng([cfg.seed, point])
        _, grad = misfit_and_gradient(c0, data, problem)
        h = cfg.inversion.fd_step
        rows = []
        for k in range(cfg.inversion.gradient_directions):
            d = rng.standard_normal(g.space_shape) * problem.window
            fd = (misfit(c0 + h * d, data, problem) - misfit(c0 - h * d, data, problem)) / (2 * h)
            an = float(np.sum(grad * d))
            rows.append((point, k, an, fd, abs(an - fd) / max(abs(fd), np.finfo(float).tiny)))
        return {"rows": rows}

    return _guarded(body, f"gradient_point_{point}")


def error_weights(cfg: RunConfig, grid: StripGrid):
    """Carleman weights at t = 0 used to measure the weighted H1 error of gamma.

    They live on a separate time horizon ``inversion.error_T`` so that the error
    norm does not depend on the (short) observation horizon.
    """
    inv = cfg.inversion
    gw = make_grid(L=grid.L, d=grid.d, T=inv.error_T, nx=grid.nx, ny=grid.ny, nt=8, t_clamp=inv.error_T / 100.0)
    return build_weights(beta_preset(cfg.weights.beta), gw, inv.error_lam, inv.error_s, cfg.weights.m)


def _run_reconstruct(cfg: RunConfig, out: Path, jobs: int, rec: RunRecord):
    th = cfg.thresholds
    inv = cfg.inversion
    g = main_grid(cfg)
    problem = inversion_problem(cfg, g)
    data = synthetic_data(cfg, g)
    cv = problem.c_background
    c_true = cv + problem_gamma(cfg, g, cv)
    rec.csv_paths.append(write_trace(out / "data.csv", data))

    # adjoint gradient vs central differences at random admissible points
    rng = np.random.default_rng(cfg.seed)
    X, Y = g.mesh
    points = []
    for p in range(inv.gradient_points):
        bump = poly_bump_values(X, Y, (rng.uniform(-0.5, 0.5), 0.0), (1.0, 0.3))
        points.append(problem.c_background * (1.0 + 0.02 * rng.standard_normal() * bump))
    grad_results = _map(_gradient_point, [(cfg, p, points[p], data.values) for p in range(len(points))], jobs, rec)
    rec.verdicts += _error_verdicts(grad_results)
    grows = [row for r in grad_results if r["ok"] for row in r["rows"]]
    rec.csv_paths.append(write_rows(out / "gradient_check.csv", ("point", "direction", "adjoint", "finite_difference",
                                                                 "relative_error"), grows))
    if grows:
        worst = max(row[-1] for row in grows)
        rec.verdicts.append(Verdict("inversion.gradient_check", worst <= th.gradient_rtol,
                                    f"max relative error {worst:.3e} over {len(grows)} directions (max {th.gradient_rtol})"))

    W_err = error_weights(cfg, g)

    def err(c_est):
        return float(np.sqrt(weighted_h1_norm2(c_est - c_true, W_err)))

    settings = DescentSettings(max_iter=inv.max_iter, reg_weight=inv.reg_weight, c_min_floor=inv.c_min_floor,
                               smoothing_length=inv.smoothing_length)
    res = reconstruct(data, problem.c_background, problem, settings, error_norm=err)
    rows = res.rows()
    header = ("iteration", "misfit", "reg", "objective", "h1_error", "step")
    rec.csv_paths.append(write_rows(out / "iterations.csv", header, [tuple(r[h] for h in header) for r in rows]))
    rec.csv_paths.append(write_field(out / "c_est.csv", res.c_est, g))
    obj = np.array(res.objective_history)
    monotone = bool(np.all(np.diff(obj) < 0))
    rec.verdicts.append(Verdict("inversion.monotone_objective", monotone, f"{len(obj) - 1} accepted steps"))
    e = res.h1_error_history
    reduction = 1.0 - e[-1] / e[0] if e[0] > 0 else 0.0
    rec.verdicts.append(Verdict("inversion.error_reduction", reduction >= th.error_reduction_min and
                                res.iterations <= inv.max_iter,
                                f"weighted H1 error {e[0]:.4g} -> {e[-1]:.4g} ({100 * reduction:.1f}% reduction, "
                                f"min {100 * th.error_reduction_min:.0f}%) in {res.iterations} iterations"))
    rec.verdicts.append(Verdict("inversion.c_est_positive", bool(np.min(res.c_est) > 0),
                                f"min c_est {np.min(res.c_est):.4g}"))
    rec.notes.append(f"stop reason: {res.stop_reason}")
    rec.tables.append(_table("reconstruction", ("iteration", "misfit", "objective", "h1_error"),
                             [(r["iteration"], r["misfit"], r["objective"], r["h1_error"]) for r in rows[::5] + rows[-1:]]))


# ------------------------------------------------------------------ entry point

_RUNNERS = {
    "check-assumptions": _run_check_assumptions,
    "forward": _run_forward,
    "verify-carleman": _run_verify_carleman,
    "verify-energy": _run_verify_energy,
    "verify-p0": _run_verify_p0,
    "verify-stability": _run_verify_stability,
    "reconstruct": _run_reconstruct,
}


def output_root(cfg: RunConfig, override=None) -> Path:
    """--out beats the SCHROSTRIP_OUT environment variable, which beats output.dir."""
    if override:
        return Path(override)
    env = os.environ.get("SCHROSTRIP_OUT")
    return Path(env) if env else Path(cfg.output.dir)


def run_command(cmd: str, cfg: RunConfig, out_root=None, jobs: int = 1) -> RunRecord:
    if cmd not in _RUNNERS:
        raise ValueError(f"unknown command {cmd!r}; expected one of {', '.join(COMMANDS)}")
    out = output_root(cfg, out_root) / cmd
    out.mkdir(parents=True, exist_ok=True)
    snapshot = emit_config(cfg)
    (out / "config.snapshot").write_text(snapshot)
    rec = RunRecord(cmd, snapshot, _version(), out_dir=str(out))
    start = time.perf_counter()
    try:
        _RUNNERS[cmd](cfg, out, max(1, int(jobs)), rec)
    except StripError as exc:
        rec.verdicts.append(Verdict(f"{cmd}.completed", False, f"{type(exc).__name__}: {exc}"))
    rec.wall_clock = time.perf_counter() - start
    rec.csv_paths = [str(p) for p in rec.csv_paths]
    (out / "summary.txt").write_text(rec.summary())
    (out / "record.json").write_text(json.dumps({
        "command": rec.command, "version": rec.version, "wall_clock_s": rec.wall_clock,
        "csv_paths": rec.csv_paths, "passed": rec.passed,
        "verdicts": [{"name": v.name, "passed": v.passed, "detail": v.detail} for v in rec.verdicts],
        "notes": rec.notes,
    }, indent=2) + "\n")
    return rec
