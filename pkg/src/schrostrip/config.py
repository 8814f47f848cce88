"""Run configuration: flat ``section.key = value`` text files.

Lists are comma separated, booleans are ``true``/``false``, ``#`` starts a
comment.  Keys left out take the documented defaults; keys marked inherit
(None) in the ladder block copy the grid and weights values at parse time, so
the emitted snapshot always lists every value that was actually used.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigParseError, InvalidArgument
from .presets import beta_preset, coefficient_preset, manufactured_preset, q0_preset

GAMMA_SHAPES = ("none", "poly_bump", "exp_bump")


@dataclass(frozen=True)
class GridBlock:
    L: float = 6.0
    d: float = 1.0
    T: float = 1.0
    nx: int = 121
    ny: int = 21
    nt: int = 101
    t_clamp: float | None = None  # None: T/100


@dataclass(frozen=True)
class WeightsBlock:
    beta: str | None = None  # mandatory
    m: float = 2.0
    lam: tuple[float, ...] = (1.0,)
    s: tuple[float, ...] = (10.0, 20.0, 40.0)


@dataclass(frozen=True)
class ProblemBlock:
    c: str | None = None  # mandatory
    q0: str = "plateau_exp_y"
    gamma: str = "poly_bump"
    gamma_amplitude: float = 0.04
    gamma_center: tuple[float, ...] = (0.3, 0.0)
    gamma_radii: tuple[float, ...] = (1.2, 0.45)
    gamma_power: int = 4
    noise: float = 0.0
    manufactured: tuple[str, ...] = ("gauss_cos_wave",)


@dataclass(frozen=True)
class LadderBlock:
    """Base grid and parameters of the refinement ladders (None: inherit)."""

    L: float | None = None
    T: float | None = None
    nx: int | None = None
    ny: int | None = None
    nt: int | None = None
    t_clamp: float | None = None
    factors: tuple[int, ...] = (1, 2, 4)
    lam: tuple[float, ...] | None = None
    s: tuple[float, ...] | None = None


@dataclass(frozen=True)
class BatteryBlock:
    size: int = 20
    g_size: int = 50
    x_center_max: float = 1.0
    x_radius_min: float = 0.8
    x_radius_max: float = 1.5
    y_offset_max: float = 0.15
    y_radius_min: float = 0.25
    amplitude_min: float = 0.01
    amplitude_max: float = 0.05
    scales: tuple[float, ...] = (1.0, 0.5)
    kappa: tuple[float, ...] = (0.0, 0.2, 0.3)
    tau: tuple[float, ...] = (0.4, 0.6, 0.9)


@dataclass(frozen=True)
class ThresholdBlock:
    order_min: float = 1.9
    growth_max: float = 2.0
    spread_max: float = 5.0
    scale_change_max: float = 0.25
    drift_max: float = 1e-10
    gradient_rtol: float = 1e-3
    error_reduction_min: float = 0.5


@dataclass(frozen=True)
class InversionBlock:
    max_iter: int = 50
    reg_weight: float = 0.0
    c_min_floor: float = 0.05
    smoothing_length: float = 0.6
    window_x: float = 2.2
    window_y: float = 0.42
    window_center: float = 0.0
    weighted_misfit: bool = False
    data_refinement: int = 2
    gradient_points: int = 3
    gradient_directions: int = 5
    fd_step: float = 1e-5
    error_T: float = 30.0
    error_lam: float = 1.0
    error_s: float = 10.0


@dataclass(frozen=True)
class OutputBlock:
    dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    grid: GridBlock = field(default_factory=GridBlock)
    weights: WeightsBlock = field(default_factory=WeightsBlock)
    problem: ProblemBlock = field(default_factory=ProblemBlock)
    ladder: LadderBlock = field(default_factory=LadderBlock)
    battery: BatteryBlock = field(default_factory=BatteryBlock)
    thresholds: ThresholdBlock = field(default_factory=ThresholdBlock)
    inversion: InversionBlock = field(default_factory=InversionBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    seed: int = 0

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = ("grid", "weights", "problem", "ladder", "battery", "thresholds", "inversion", "output")
MANDATORY = (("weights", "beta"), ("problem", "c"))
# file key -> attribute name where the attribute would shadow a keyword
_ALIASES = {"lambda": "lam", "error_lambda": "error_lam"}
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}


# ------------------------------------------------------------------ value codecs


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text):
    val = float(text)
    if not val.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(val)


_SCALARS = {"float": float, "int": _parse_int, "str": str, "bool": _parse_bool}


def _base_type(annotation: str):
    """(scalar name, is_list) for the annotation strings used above."""
    ann = annotation.replace(" | None", "")
    if ann.startswith("tuple["):
        return ann[len("tuple["):].split(",")[0], True
    return ann, False


def _parse_value(annotation: str, text: str):
    scalar, is_list = _base_type(annotation)
    conv = _SCALARS[scalar]
    if is_list:
        items = [p.strip() for p in text.split(",")]
        if not items or any(p == "" for p in items):
            raise ValueError("empty list entry")
        return tuple(conv(p) for p in items)
    return conv(text)


def _format_value(val) -> str:
    if isinstance(val, tuple):
        return ", ".join(_format_value(v) for v in val)
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


# ------------------------------------------------------------------ parse / emit


def _fields(block_cls):
    return {f.name: f for f in dataclasses.fields(block_cls)}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    blocks = {name: {} for name in SECTIONS}
    seed = None
    where = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if value == "":
            raise ConfigParseError(f"{source}:{lineno}: missing value for {key!r}")
        if key == "seed":
            try:
                seed = _parse_int(value)
            except ValueError as exc:
                raise ConfigParseError(f"{source}:{lineno}: malformed seed: {exc}") from None
            continue
        section, _, name = key.partition(".")
        if section not in blocks or not name:
            raise ConfigParseError(f"{source}:{lineno}: unknown key {key!r}")
        attr = _ALIASES.get(name, name)
        fields_ = _fields(type(getattr(RunConfig(), section)))
        if attr not in fields_ or attr in _REVERSE_ALIASES and name == attr:
            raise ConfigParseError(f"{source}:{lineno}: unknown key {key!r}")
        if attr in blocks[section]:
            raise ConfigParseError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            blocks[section][attr] = _parse_value(str(fields_[attr].type), value)
        except ValueError as exc:
            raise ConfigParseError(f"{source}:{lineno}: malformed value for {key!r}: {exc}") from None
        where[(section, attr)] = lineno

    for section, attr in MANDATORY:
        if attr not in blocks[section]:
            raise ConfigParseError(f"{source}: missing mandatory key {section}.{_REVERSE_ALIASES.get(attr, attr)}")

    kwargs = {}
    for section in SECTIONS:
        cls = type(getattr(RunConfig(), section))
        kwargs[section] = cls(**blocks[section])
    cfg = RunConfig(**kwargs, seed=0 if seed is None else seed)
    try:
        return resolve(cfg)
    except InvalidArgument as exc:
        line = where.get(getattr(exc, "key", None))
        prefix = f"{source}:{line}" if line else source
        raise ConfigParseError(f"{prefix}: {exc}") from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def _invalid(key, message):
    exc = InvalidArgument(message)
    exc.key = key
    return exc


def resolve(cfg: RunConfig) -> RunConfig:
    """Fill inherited values and validate; raises InvalidArgument tagged with the offending key."""
    g, w, p, lad = cfg.grid, cfg.weights, cfg.problem, cfg.ladder
    if g.t_clamp is None:
        cfg = cfg.replace("grid", t_clamp=g.T / 100.0)
        g = cfg.grid
    inherit = {k: getattr(g, k) for k in ("L", "T", "nx", "ny", "nt")}
    inherit.update(lam=w.lam, s=w.s)
    changes = {k: v for k, v in inherit.items() if getattr(lad, k) is None}
    if lad.t_clamp is None:
        T_lad = lad.T if lad.T is not None else g.T
        changes["t_clamp"] = g.t_clamp if T_lad == g.T else T_lad / 100.0
    if changes:
        cfg = cfg.replace("ladder", **changes)

    for key, name, lookup in ((("weights", "beta"), w.beta, beta_preset),
                              (("problem", "c"), p.c, coefficient_preset),
                              (("problem", "q0"), p.q0, q0_preset)):
        try:
            lookup(name)
        except InvalidArgument as exc:
            raise _invalid(key, str(exc)) from None
    for name in p.manufactured:
        try:
            manufactured_preset(name)
        except InvalidArgument as exc:
            raise _invalid(("problem", "manufactured"), str(exc)) from None
    if p.gamma not in GAMMA_SHAPES:
        raise _invalid(("problem", "gamma"), f"unknown gamma shape {p.gamma!r}; expected one of {GAMMA_SHAPES}")
    if len(p.gamma_center) != 2 or len(p.gamma_radii) != 2:
        raise _invalid(("problem", "gamma_center"), "gamma_center and gamma_radii need two entries")
    if p.noise < 0:
        raise _invalid(("problem", "noise"), "noise must be >= 0")
    if w.m <= 1:
        raise _invalid(("weights", "m"), "m must be > 1")
    if any(v <= 0 for v in w.lam + w.s):
        raise _invalid(("weights", "s"), "lambda and s must be positive")
    if any(f < 1 for f in cfg.ladder.factors):
        raise _invalid(("ladder", "factors"), "refinement factors must be >= 1")
    b = cfg.battery
    if b.size < 1 or b.g_size < 1:
        raise _invalid(("battery", "size"), "battery sizes must be >= 1")
    if not 0 < b.x_radius_min <= b.x_radius_max or b.x_center_max < 0:
        raise _invalid(("battery", "x_radius_min"), "need 0 < x_radius_min <= x_radius_max and x_center_max >= 0")
    if len(b.kappa) != len(b.tau) or any(not 0 <= k < t <= 1 for k, t in zip(b.kappa, b.tau)):
        raise _invalid(("battery", "kappa"), "kappa and tau must pair up with 0 <= kappa < tau <= 1")
    inv = cfg.inversion
    if inv.reg_weight < 0:
        raise _invalid(("inversion", "reg_weight"), "reg_weight must be >= 0")
    if inv.max_iter < 1 or inv.data_refinement < 1:
        raise _invalid(("inversion", "max_iter"), "max_iter and data_refinement must be >= 1")
    return cfg


def emit_config(cfg: RunConfig) -> str:
    """Every value, defaulted or not, in parseable form."""
    lines = []
    for section in SECTIONS:
        block = getattr(cfg, section)
        for f in dataclasses.fields(block):
            val = getattr(block, f.name)
            if val is None:
                continue
            lines.append(f"{section}.{_REVERSE_ALIASES.get(f.name, f.name)} = {_format_value(val)}")
        lines.append("")
    lines.append(f"seed = {cfg.seed}")
    return "\n".join(lines) + "\n"
