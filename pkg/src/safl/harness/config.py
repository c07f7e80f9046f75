"""Experiment configuration files.

The format is INI-like: ``[section]`` headers followed by ``key = value``
lines, ``#`` or ``;`` comments.  Keys are case-sensitive.  List values are
comma-separated; an integer item may be written as an inclusive range
``lo..hi``.  Booleans accept true/false/yes/no/1/0.  Optional values take
the literal ``none``.  Unknown sections or keys are errors.

    [experiment]
    scenario = sconvex-rate
    output = runs/sconvex

    [sweep]
    R = 128, 256, 512
    seeds = 0..19

Overrides use dotted names, e.g. ``algorithm.q=0.8``.  The only
environment override is ``SAFL_OUTPUT_DIR`` for the output directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError

SCENARIOS = (
    "sconvex-rate",
    "nonconvex-rate",
    "fedavg-bias",
    "speedup",
    "mnist-lr",
    "impossibility",
    "pac",
    "positively-related",
)


def _kind(k: str, default=None, **kw):
    return field(default=default, metadata={"kind": k}, **kw)


def _list(k: str, default):
    return field(default_factory=lambda: list(default), metadata={"kind": k})


@dataclass
class ExperimentSection:
    scenario: str = _kind("str", "sconvex-rate")
    output: str = _kind("str", "runs/out")


@dataclass
class PopulationSection:
    M: int = _kind("int", 10)
    d: int = _kind("int", 10)
    spread: float = _kind("float", 1.0)
    hessian: float = _kind("float", 1.0)
    sigma: float = _kind("float", 0.1)
    sigma_s: float = _kind("float", 0.1)
    shift: float = _kind("float", 0.0)
    pop_seed: int = _kind("int", 0)
    n_per_client: int = _kind("int", 100)
    hidden: int = _kind("int", 16)
    activation: str = _kind("str", "tanh")
    batch_size: int = _kind("int", 16)


@dataclass
class ParticipationSection:
    variant: str = _kind("str", "excluded")
    m: int = _kind("int", 5)
    s: int = _kind("int", 4)
    p: int = _kind("int", 10)


@dataclass
class AlgorithmSection:
    algorithm: str = _kind("str", "safari")
    q: float = _kind("float", 0.5)
    eta_c: float | None = _kind("optfloat", None)
    eta_s: float = _kind("float", 0.1)
    K: int = _kind("int", 5)
    R: int = _kind("int", 1000)
    couple_steps: bool = _kind("bool", True)
    step_schedule: str = _kind("str", "constant")
    step_scale: float = _kind("float", 1.0)
    x0: float = _kind("float", 1.0)
    server_steps: int = _kind("int", 1)
    rs_rc_low: float | None = _kind("optfloat", None)
    rs_rc_high: float | None = _kind("optfloat", None)
    track_local_grads: bool = _kind("bool", True)
    tail_fraction: float = _kind("float", 0.5)


@dataclass
class SweepSection:
    seeds: list = _list("ints", [0])
    R: list = _list("ints", [])
    q: list = _list("floats", [])
    s: list = _list("ints", [])
    p: list = _list("ints", [])
    n_T: list = _list("ints", [])
    mk: list = _list("pairs", [])


@dataclass
class LearnabilitySection:
    M: int = _kind("int", 10)
    omega: list = _list("floats", [0.25, 0.5, 0.75])
    n: list = _list("ints", [20, 200])
    trials: int = _kind("int", 10_000)
    a: float = _kind("float", 0.0)
    b: float = _kind("float", 1.0)
    a2: float = _kind("float", 0.25)
    b2: float = _kind("float", 0.75)
    t_star: float = _kind("float", 0.5)
    server_fraction: float = _kind("float", 0.1)
    n_grid: list = _list("ints", [100, 1000, 10_000, 100_000])
    pac_trials: int = _kind("int", 200)
    t_grid_points: int = _kind("int", 41)
    mixture_lambda1: float = _kind("float", 1.0)


@dataclass
class DataSection:
    train_images: str | None = _kind("optstr", None)
    train_labels: str | None = _kind("optstr", None)
    test_images: str | None = _kind("optstr", None)
    test_labels: str | None = _kind("optstr", None)
    n_T: int = _kind("int", 1000)
    l2_reg: float = _kind("float", 0.0)
    local_lr: float = _kind("float", 0.1)
    server_lr: float = _kind("float", 0.1)
    batch_size: int = _kind("int", 64)
    rounds: int = _kind("int", 150)
    local_epochs: int = _kind("int", 1)
    server_epochs: int = _kind("int", 1)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    population: PopulationSection = field(default_factory=PopulationSection)
    participation: ParticipationSection = field(default_factory=ParticipationSection)
    algorithm: AlgorithmSection = field(default_factory=AlgorithmSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    learnability: LearnabilitySection = field(default_factory=LearnabilitySection)
    data: DataSection = field(default_factory=DataSection)

    @property
    def scenario(self) -> str:
        return self.experiment.scenario

    @property
    def output(self) -> Path:
        return Path(self.experiment.output)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d["experiment"].pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "experiment": ExperimentSection,
    "population": PopulationSection,
    "participation": ParticipationSection,
    "algorithm": AlgorithmSection,
    "sweep": SweepSection,
    "learnability": LearnabilitySection,
    "data": DataSection,
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> list[int]:
    out: list[int] = []
    for item in (p.strip() for p in s.split(",")):
        if not item:
            continue
        if ".." in item:
            lo, hi = (int(v) for v in item.split("..", 1))
            if hi < lo:
                raise ValueError(f"empty range {item!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(item))
    return out


def _parse_pairs(s: str) -> list[list[int]]:
    out = []
    for item in (p.strip() for p in s.split(",")):
        if item:
            a, b = item.lower().split("x")
            out.append([int(a), int(b)])
    return out


_PARSERS = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": _parse_bool,
    "optfloat": lambda s: None if s.strip().lower() == "none" else float(s),
    "optstr": lambda s: None if s.strip().lower() == "none" else s.strip(),
    "ints": _parse_ints,
    "floats": lambda s: [float(p) for p in s.split(",") if p.strip()],
    "pairs": _parse_pairs,
}


def _set(cfg: ExperimentConfig, section: str, key: str, raw: str) -> None:
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown section [{section}]")
    sec = getattr(cfg, section)
    kinds = {f.name: f.metadata["kind"] for f in dataclasses.fields(sec)}
    if key not in kinds:
        raise ConfigError(f"unknown key {section}.{key}")
    try:
        value = _PARSERS[kinds[key]](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    setattr(sec, key, value)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}; expected one of {', '.join(SCENARIOS)}")
    alg = cfg.algorithm
    if alg.algorithm not in ("safari", "fedavg", "sgd"):
        raise ConfigError("algorithm.algorithm must be safari, fedavg or sgd")
    if alg.step_schedule not in ("constant", "log_over_r", "inv_sqrt_r"):
        raise ConfigError("algorithm.step_schedule must be constant, log_over_r or inv_sqrt_r")
    if not 0.0 <= alg.q <= 1.0 or any(not 0.0 <= q <= 1.0 for q in cfg.sweep.q):
        raise ConfigError("q values must lie in [0, 1]")
    if cfg.participation.variant not in ("full", "uniform", "excluded", "adversarial"):
        raise ConfigError("participation.variant must be full, uniform, excluded or adversarial")
    if cfg.population.activation not in ("tanh", "relu"):
        raise ConfigError("population.activation must be tanh or relu")
    if not cfg.sweep.seeds:
        raise ConfigError("sweep.seeds must not be empty")
    return cfg


def load_config(path=None, overrides=(), output: str | None = None) -> ExperimentConfig:
    """Read a config file (optional), apply dotted overrides, validate."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        name, raw = item.split("=", 1)
        if "." not in name:
            raise ConfigError(f"override must name a section: {name!r}")
        section, key = name.strip().split(".", 1)
        _set(cfg, section, key, raw)
    env_out = os.environ.get("SAFL_OUTPUT_DIR")
    if env_out:
        cfg.experiment.output = env_out
    if output is not None:
        cfg.experiment.output = output
    return validate(cfg)
