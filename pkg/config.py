"""
Config Module for SurrogateMPC
Strict parser and canonical writer for experiment configuration files

Files are INI-like with dotted section names and `key = value` (or `key: value`)
lines; `#` and `;` start comments. Every key is optional except `[plant] kind`
and `[reference] segments`; defaults are listed in DEFAULTS. Example:

    [plant]
    kind = VanDerPol

    [reference]
    mask = 1
    segments = 1.0 @ 20; 0.0 @ 20; -1.0 @ 20

Reference segments are `values @ seconds` separated by `;`, with one value per
tracked channel separated by commas. The mask lists tracked observation
channels counting from 1.
"""

import configparser
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import ConfigError, ReferenceTrajectory
from datagen import ExcitationSpec
from mpc import HorizonSpec
from online import BufferPolicy, OnlineSpec
from plants import DEFAULT_PARAMETERS, PlantConfig, PlantKind, make_plant
from training import CRBMConfig, StageConfig, TrainConfig

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Dict[str, str]] = {
    "plant": {"kind": "", "dt": "0.1", "dt_plant": "0.01", "regime": ""},
    "excitation": {"duration_s": "2000", "hold_s": "0.5", "u_min": "-2", "u_max": "2", "dt": "0.1",
                   "episodes": "1", "symmetrize": "false", "validation_fraction": "0.1"},
    "model": {"M": "10", "N": "5", "d": "3", "h_dim": "32", "hidden": "64"},
    "train": {"crbm_pretrain": "false", "single_step": "true", "multi_step": "true", "clip_norm": "5.0"},
    "train.stage2": {"epochs": "30", "batch_size": "128", "learning_rate": "0.002"},
    "train.stage3": {"epochs": "30", "batch_size": "128", "learning_rate": "0.002"},
    "train.crbm": {"epochs": "10", "hidden_units": "50", "learning_rate": "0.001", "batch_size": "128"},
    "horizon": {"N": "5", "dt": "0.1", "alpha": "0", "beta": "0.01", "u_min": "-2", "u_max": "2",
                "max_iters": "50", "grad_tol": "1e-6"},
    "online": {"interval_s": "25", "epochs": "10", "learning_rate": "0.0002", "batch_size": "64",
               "symmetrize": "true", "buffer_policy": "interval-only", "aggregate_intervals": "4"},
    "reference": {"mask": "1", "segments": ""},
    "run": {"duration_s": "", "warmup_s": "4", "seed": "0", "out": "", "y0": "",
            "sweep_seeds": "5", "sweep_fractions": "0.1, 0.5, 1.0", "workers": "1"},
}
REQUIRED = {("plant", "kind"), ("reference", "segments")}
SECTIONS = list(DEFAULTS) + ["plant.parameters"]


@dataclass(frozen=True)
class ModelDims:
    M: int = 10
    N: int = 5
    d: int = 3
    h_dim: int = 32
    hidden: int = 64


@dataclass(frozen=True)
class DataSpec:
    """Episode collection settings on top of the excitation"""
    episodes: int = 1
    symmetrize: bool = False
    validation_fraction: float = 0.1


@dataclass(frozen=True)
class ReferenceSpec:
    segments: Tuple[Tuple[Tuple[float, ...], float], ...]
    mask: Tuple[int, ...] = (0,)

    @property
    def duration_s(self) -> float:
        return sum(duration for _, duration in self.segments)

    def build(self, dt: float) -> ReferenceTrajectory:
        return ReferenceTrajectory.piecewise_constant(self.segments, dt, self.mask)


@dataclass(frozen=True)
class RunSpec:
    duration_s: float = 60.0
    warmup_s: float = 4.0
    seed: int = 0
    out: str = ""
    y0: Optional[Tuple[float, ...]] = None
    sweep_seeds: int = 5
    sweep_fractions: Tuple[float, ...] = (0.1, 0.5, 1.0)
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, validated as a whole"""

    plant: PlantConfig
    excitation: ExcitationSpec
    data: DataSpec
    model: ModelDims
    train: TrainConfig
    horizon: HorizonSpec
    online: OnlineSpec
    reference: ReferenceSpec
    run: RunSpec
    source_text: str = field(default="", compare=False, repr=False)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with a new master seed propagated to every seeded stage"""
        return replace(self, run=replace(self.run, seed=seed),
                       excitation=replace(self.excitation, seed=seed),
                       train=replace(self.train, seed=seed),
                       online=replace(self.online, seed=seed))


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _floats(text: str) -> Tuple[float, ...]:
    values = tuple(float(x) for x in text.replace(" ", "").split(",") if x)
    if not values:
        raise ValueError("expected a comma-separated list of numbers")
    return values


def _segments(text: str) -> Tuple[Tuple[Tuple[float, ...], float], ...]:
    segments = []
    for part in text.split(";"):
        if not part.strip():
            continue
        values, sep, duration = part.partition("@")
        if not sep:
            raise ValueError(f"segment {part.strip()!r} must look like 'values @ seconds'")
        segments.append((_floats(values), float(duration)))
    if not segments:
        raise ValueError("reference needs at least one segment")
    return tuple(segments)


class _Reader:
    """Typed access to one parsed file that records every problem instead of stopping at the first"""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser
        self.problems: List[str] = []

    def get(self, section: str, key: str, convert: Callable, fallback=None):
        raw = self.parser.get(section, key, fallback=None) if self.parser.has_section(section) else None
        if raw is None:
            if (section, key) in REQUIRED:
                self.problems.append(f"[{section}] {key} is required")
                return fallback
            raw = DEFAULTS[section][key]
        try:
            return convert(raw)
        except ValueError as e:
            self.problems.append(f"[{section}] {key}: {e}")
            return fallback


def _make_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=", ":"),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                       default_section="__defaults__")
    parser.optionxform = str
    return parser


def parse_config_text(text: str) -> ExperimentConfig:
    """
    Parse configuration text

    Args:
        text: File contents

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Syntax error (with line number) or every constraint violation found
    """
    parser = _make_parser()
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError([f"line {e.lineno}: key outside of any section"]) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError([f"line {e.lineno}: {e.message.splitlines()[0]}"]) from None
    except configparser.ParsingError as e:
        raise ConfigError([f"line {lineno}: cannot parse {line.strip()!r}" for lineno, line in e.errors]) from None

    problems: List[str] = []
    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
        elif section != "plant.parameters":
            problems.extend(f"unknown key [{section}] {key}" for key in parser[section]
                            if key not in DEFAULTS[section])

    r = _Reader(parser)
    kind = r.get("plant", "kind", str, "")
    parameters: Dict[str, float] = {}
    if parser.has_section("plant.parameters"):
        try:
            allowed = DEFAULT_PARAMETERS[PlantKind(kind)]
        except ValueError:
            allowed = {}
        for key, raw in parser["plant.parameters"].items():
            if allowed and key not in allowed:
                problems.append(f"unknown key [plant.parameters] {key} for plant {kind}")
                continue
            try:
                parameters[key] = float(raw)
            except ValueError:
                problems.append(f"[plant.parameters] {key}: expected a number, got {raw!r}")
    if kind and kind not in {k.value for k in PlantKind}:
        problems.append(f"[plant] kind: unknown plant {kind!r}")

    plant = PlantConfig(kind=kind, parameters=parameters, dt_plant=r.get("plant", "dt_plant", float, 0.01),
                        dt=r.get("plant", "dt", float, 0.1),
                        regime=r.get("plant", "regime", lambda s: _int(s) if s.strip() else None, None))
    seed = r.get("run", "seed", _int, 0)
    excitation = ExcitationSpec(
        duration_s=r.get("excitation", "duration_s", float, 2000.0), seed=seed,
        hold_s=r.get("excitation", "hold_s", float, 0.5), u_min=r.get("excitation", "u_min", float, -2.0),
        u_max=r.get("excitation", "u_max", float, 2.0), dt=r.get("excitation", "dt", float, 0.1),
    )
    data = DataSpec(episodes=r.get("excitation", "episodes", _int, 1),
                    symmetrize=r.get("excitation", "symmetrize", _bool, False),
                    validation_fraction=r.get("excitation", "validation_fraction", float, 0.1))
    model = ModelDims(**{key: r.get("model", key, _int, getattr(ModelDims, key)) for key in DEFAULTS["model"]})

    def stage(section: str) -> StageConfig:
        return StageConfig(epochs=r.get(section, "epochs", _int, 30), batch_size=r.get(section, "batch_size", _int, 128),
                           learning_rate=r.get(section, "learning_rate", float, 2e-3))

    train = TrainConfig(
        crbm_pretrain=r.get("train", "crbm_pretrain", _bool, False),
        single_step=r.get("train", "single_step", _bool, True),
        multi_step=r.get("train", "multi_step", _bool, True),
        crbm=CRBMConfig(epochs=r.get("train.crbm", "epochs", _int, 10),
                        hidden_units=r.get("train.crbm", "hidden_units", _int, 50),
                        learning_rate=r.get("train.crbm", "learning_rate", float, 1e-3),
                        batch_size=r.get("train.crbm", "batch_size", _int, 128)),
        stage2=stage("train.stage2"), stage3=stage("train.stage3"),
        clip_norm=r.get("train", "clip_norm", float, 5.0), seed=seed,
    )
    horizon = HorizonSpec(
        N=r.get("horizon", "N", _int, 5), dt=r.get("horizon", "dt", float, 0.1),
        alpha=r.get("horizon", "alpha", float, 0.0), beta=r.get("horizon", "beta", float, 0.01),
        u_min=r.get("horizon", "u_min", _floats, (-2.0,)), u_max=r.get("horizon", "u_max", _floats, (2.0,)),
        max_iters=r.get("horizon", "max_iters", _int, 50), grad_tol=r.get("horizon", "grad_tol", float, 1e-6),
    )
    policy = r.get("online", "buffer_policy", BufferPolicy, BufferPolicy.INTERVAL_ONLY)
    online = OnlineSpec(
        interval_s=r.get("online", "interval_s", float, 25.0), epochs=r.get("online", "epochs", _int, 10),
        learning_rate=r.get("online", "learning_rate", float, 2e-4),
        batch_size=r.get("online", "batch_size", _int, 64), symmetrize=r.get("online", "symmetrize", _bool, True),
        buffer_policy=policy, aggregate_intervals=r.get("online", "aggregate_intervals", _int, 4), seed=seed,
    )
    mask = tuple(i - 1 for i in r.get("reference", "mask", lambda s: tuple(_int(x) for x in _floats(s)), (1,)))
    reference = ReferenceSpec(segments=r.get("reference", "segments", _segments, ()), mask=mask)
    y0 = r.get("run", "y0", lambda s: _floats(s) if s.strip() else None, None)
    duration = r.get("run", "duration_s", lambda s: float(s) if s.strip() else None, None)
    run = RunSpec(duration_s=reference.duration_s if duration is None else duration,
                  warmup_s=r.get("run", "warmup_s", float, 4.0),
                  seed=seed, out=r.get("run", "out", str, ""), y0=y0,
                  sweep_seeds=r.get("run", "sweep_seeds", _int, 5),
                  sweep_fractions=r.get("run", "sweep_fractions", _floats, (0.1, 0.5, 1.0)),
                  workers=r.get("run", "workers", _int, 1))

    config = ExperimentConfig(plant, excitation, data, model, train, horizon, online, reference, run, text)
    problems += r.problems
    if not r.problems:
        problems += validate_config(config)
    if problems:
        raise ConfigError(problems)
    return config


def parse_config(path: str) -> ExperimentConfig:
    """Read and parse a configuration file; an unreadable file raises OSError"""
    with open(path) as f:
        text = f.read()
    return parse_config_text(text)


def validate_config(config: ExperimentConfig) -> List[str]:
    """Cross-field checks; returns every violation"""
    problems: List[str] = []
    problems += config.excitation.validate()
    problems += config.train.validate()
    problems += config.horizon.validate()
    problems += config.online.validate(config.horizon.dt)

    dts = {"plant": config.plant.dt, "excitation": config.excitation.dt, "horizon": config.horizon.dt}
    if any(not math.isclose(v, config.plant.dt, rel_tol=1e-12) for v in dts.values()):
        problems.append("dt must agree across sections: " + ", ".join(f"[{k}] dt={v}" for k, v in dts.items()))
    if config.plant.dt_plant <= 0 or not math.isclose(config.plant.dt / config.plant.dt_plant,
                                                      round(config.plant.dt / config.plant.dt_plant), rel_tol=1e-9):
        problems.append(f"[plant] dt_plant={config.plant.dt_plant} does not divide dt={config.plant.dt}")

    dims = config.model
    if dims.M < 1 or dims.N < 1 or dims.d < 0 or dims.h_dim < 1 or dims.hidden < 1:
        problems.append(f"[model] needs M, N, h_dim, hidden >= 1 and d >= 0, got {dims}")
    if config.data.episodes < 1:
        problems.append("[excitation] episodes must be >= 1")
    if not 0 <= config.data.validation_fraction < 1:
        problems.append("[excitation] validation_fraction must lie in [0, 1)")

    try:
        kind = PlantKind(config.plant.kind)
    except ValueError:
        kind = None
    if kind is not None:
        try:
            plant = make_plant(config.plant)
        except ValueError as e:
            problems.append(f"[plant] {e}")
        else:
            if max(len(config.horizon.u_min), len(config.horizon.u_max)) not in (1, plant.m):
                problems.append(f"[horizon] bounds need 1 or {plant.m} values for {kind.value}")
            if config.reference.mask and (min(config.reference.mask) < 0 or max(config.reference.mask) >= plant.p):
                problems.append(f"[reference] mask must lie in 1..{plant.p} for {kind.value}")
            if config.run.y0 is not None and len(config.run.y0) != plant.state_dim:
                problems.append(f"[run] y0 needs {plant.state_dim} values for {kind.value}")

    mask = config.reference.mask
    if len(set(mask)) != len(mask):
        problems.append("[reference] mask has repeated channels")
    for values, duration in config.reference.segments:
        if len(values) not in (1, len(mask)):
            problems.append(f"[reference] segment {values} needs 1 or {len(mask)} values")
        steps = duration / config.horizon.dt
        if duration <= 0 or not math.isclose(steps, round(steps), rel_tol=1e-9):
            problems.append(f"[reference] segment duration {duration} is not a positive multiple of dt")
    if config.reference.segments and config.reference.duration_s + 1e-9 < config.run.duration_s:
        problems.append(f"[reference] covers {config.reference.duration_s} s, [run] duration_s is "
                        f"{config.run.duration_s} s")
    if config.run.warmup_s < 0 or config.run.warmup_s >= config.run.duration_s:
        problems.append("[run] warmup_s must lie in [0, duration_s)")
    warmup_steps = config.run.warmup_s / config.horizon.dt if config.horizon.dt > 0 else 0.0
    if not math.isclose(warmup_steps, round(warmup_steps), rel_tol=1e-9, abs_tol=1e-9):
        problems.append(f"[run] warmup_s={config.run.warmup_s} is not a multiple of dt={config.horizon.dt}")
    if config.run.sweep_seeds < 1 or any(not 0 < f <= 1 for f in config.run.sweep_fractions):
        problems.append("[run] sweep_seeds must be >= 1 and sweep_fractions in (0, 1]")
    if config.run.workers < 1:
        problems.append("[run] workers must be >= 1")
    return problems


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, BufferPolicy):
        return value.value
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text listing every key; parse_config_text(serialize_config(c)) == c"""
    sections: Dict[str, Dict[str, object]] = {
        "plant": {"kind": config.plant.kind, "dt": config.plant.dt, "dt_plant": config.plant.dt_plant,
                  "regime": "" if config.plant.regime is None else config.plant.regime},
        "plant.parameters": dict(sorted(config.plant.parameters.items())),
        "excitation": {"duration_s": config.excitation.duration_s, "hold_s": config.excitation.hold_s,
                       "u_min": config.excitation.u_min, "u_max": config.excitation.u_max,
                       "dt": config.excitation.dt, "episodes": config.data.episodes,
                       "symmetrize": config.data.symmetrize,
                       "validation_fraction": config.data.validation_fraction},
        "model": {key: getattr(config.model, key) for key in DEFAULTS["model"]},
        "train": {"crbm_pretrain": config.train.crbm_pretrain, "single_step": config.train.single_step,
                  "multi_step": config.train.multi_step, "clip_norm": config.train.clip_norm},
        "train.stage2": {key: getattr(config.train.stage2, key) for key in DEFAULTS["train.stage2"]},
        "train.stage3": {key: getattr(config.train.stage3, key) for key in DEFAULTS["train.stage3"]},
        "train.crbm": {key: getattr(config.train.crbm, key) for key in DEFAULTS["train.crbm"]},
        "horizon": {key: getattr(config.horizon, key) for key in DEFAULTS["horizon"]},
        "online": {key: getattr(config.online, key) for key in DEFAULTS["online"]},
        "reference": {"mask": tuple(i + 1 for i in config.reference.mask),
                      "segments": "; ".join(f"{_fmt(values)} @ {_fmt(float(duration))}"
                                            for values, duration in config.reference.segments)},
        "run": {"duration_s": config.run.duration_s, "warmup_s": config.run.warmup_s, "seed": config.run.seed,
                "out": config.run.out, "y0": config.run.y0 or "", "sweep_seeds": config.run.sweep_seeds,
                "sweep_fractions": config.run.sweep_fractions, "workers": config.run.workers},
    }
    lines: List[str] = []
    for name, values in sections.items():
        if not values and name == "plant.parameters":
            continue
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {_fmt(value)}" for key, value in values.items())
        lines.append("")
    return "\n".join(lines)


def minimal_config(kind: str, segments: Sequence[Tuple[Sequence[float], float]], mask: Sequence[int] = (1,)
                   ) -> ExperimentConfig:
    """Config with every default filled in; mask counts from 1"""
    segments_text = "; ".join(
        f"{_fmt(tuple(float(v) for v in np.atleast_1d(values)))} @ {float(duration)!r}" for values, duration in segments)
    text = f"[plant]\nkind = {kind}\n\n[reference]\nmask = {_fmt(tuple(mask))}\nsegments = {segments_text}\n"
    return parse_config_text(text)
