"""YAML run configuration.

Sections and defaults (``model`` and ``grid`` are required)::

    model:                 # explicit parameters, or `fixture: <name>` plus overrides
      q: 2.0
      T: 1.0
      a: 0.0
      beta / sigma / sigma_bar / eta / lam:   number or {family: ..., ...}
      marks: [{z: 1.0, weight: 1.0, gamma: .inf}]
      Lambda: 1.0, kappa: 1.0, kappa0: 1.0
    grid:
      y_max: 5.0           # absolute upper end of the signal domain
      n_space: 401
      n_time: 200
      layer_steps: null    # null -> n_time // 5
      layer_ratio: 1.2
      scheme: strang       # strang | imex
      neumann: ghost       # ghost | one_sided
    ladder:
      M_schedule: [10.0]
      t_cut: 0.9
      eps_ladder: 1.0e-3
      tau_mono: null       # null -> 10 x measured scheme error
    mc:
      n_paths: 1000
      dt: 0.01
      seed: 0
      x0: 1.0
      y0: null             # null -> a
      strategies: [optimal-feedback, twap]
      reflection: bridge   # bridge | projection
      dump_paths: 0        # per-path CSV dumps for the first k paths
    output:
      directory: out
      formats: [csv, npz]
    verify:
      catalog: [oracle]
      suites: [validate, envelope, monotonicity, comparison, skorokhod, decay, holder]
      n_paths: 200
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import fixtures
from .model import Mark, ModelParams, as_coefficient, coefficient_to_dict

REQUIRED_SECTIONS = ("model", "grid")


class ConfigError(ValueError):
    pass


@dataclass
class GridSection:
    y_max: float = 5.0
    n_space: int = 401
    n_time: int = 200
    layer_steps: int | None = None
    layer_ratio: float = 1.2
    scheme: str = "strang"
    neumann: str = "ghost"


@dataclass
class LadderSection:
    M_schedule: list[float] = field(default_factory=lambda: [10.0])
    t_cut: float = 0.9
    eps_ladder: float = 1e-3
    tau_mono: float | None = None


@dataclass
class McSection:
    n_paths: int = 1000
    dt: float = 0.01
    seed: int = 0
    x0: float = 1.0
    y0: float | None = None
    strategies: list[str] = field(default_factory=lambda: ["optimal-feedback", "twap"])
    reflection: str = "bridge"
    dump_paths: int = 0


@dataclass
class OutputSection:
    directory: str = "out"
    formats: list[str] = field(default_factory=lambda: ["csv", "npz"])


@dataclass
class VerifySection:
    catalog: list[str] = field(default_factory=lambda: ["oracle"])
    suites: list[str] = field(
        default_factory=lambda: ["validate", "envelope", "monotonicity", "comparison", "skorokhod", "decay", "holder"]
    )
    n_paths: int = 200


@dataclass
class RunConfig:
    model: ModelParams
    grid: GridSection
    ladder: LadderSection = field(default_factory=LadderSection)
    mc: McSection = field(default_factory=McSection)
    output: OutputSection = field(default_factory=OutputSection)
    verify: VerifySection = field(default_factory=VerifySection)

    def to_dict(self) -> dict:
        return {
            "model": model_to_dict(self.model),
            "grid": asdict(self.grid),
            "ladder": asdict(self.ladder),
            "mc": asdict(self.mc),
            "output": asdict(self.output),
            "verify": asdict(self.verify),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        """Stable hash of the resolved configuration."""
        text = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def model_to_dict(p: ModelParams) -> dict:
    return {
        "q": float(p.q),
        "T": float(p.T),
        "a": float(p.a),
        "beta": coefficient_to_dict(p.beta),
        "sigma": coefficient_to_dict(p.sigma),
        "sigma_bar": coefficient_to_dict(p.sigma_bar),
        "eta": coefficient_to_dict(p.eta),
        "lam": coefficient_to_dict(p.lam),
        "marks": [{"z": float(m.z), "weight": float(m.weight), "gamma": coefficient_to_dict(m.gamma)} for m in p.marks],
        "Lambda": float(p.Lambda),
        "kappa": float(p.kappa),
        "kappa0": float(p.kappa0),
    }


_MODEL_KEYS = {"q", "T", "a", "beta", "sigma", "sigma_bar", "eta", "lam", "marks", "Lambda", "kappa", "kappa0"}


def model_from_dict(d: dict) -> ModelParams:
    d = dict(d)
    base = {}
    if "fixture" in d:
        name = d.pop("fixture")
        try:
            base = model_to_dict(fixtures.get(name))
        except KeyError as e:
            raise ConfigError(f"model: {e.args[0]}") from None
    unknown = set(d) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"model: unknown keys {sorted(unknown)}")
    base.update(d)
    missing = _MODEL_KEYS - {"marks", "Lambda", "kappa", "kappa0"} - set(base)
    if missing:
        raise ConfigError(f"model: missing keys {sorted(missing)}")
    Lambda = float(base.get("Lambda", 1.0))
    try:
        marks = tuple(
            Mark(float(m["z"]), float(m["weight"]), as_coefficient(m.get("gamma", math.inf), Lambda))
            for m in base.get("marks", [])
        )
        return ModelParams(
            q=float(base["q"]),
            T=float(base["T"]),
            a=float(base["a"]),
            beta=as_coefficient(base["beta"], Lambda),
            sigma=as_coefficient(base["sigma"], Lambda),
            sigma_bar=as_coefficient(base["sigma_bar"], Lambda),
            eta=as_coefficient(base["eta"], Lambda),
            lam=as_coefficient(base["lam"], Lambda),
            marks=marks,
            Lambda=Lambda,
            kappa=float(base.get("kappa", 1.0)),
            kappa0=float(base.get("kappa0", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}") from None


def _section(cls, name: str, d):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    try:
        return cls(**copy.deepcopy(d))
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None


def _coerce(cfg: RunConfig) -> RunConfig:
    g = cfg.grid
    g.y_max, g.layer_ratio = float(g.y_max), float(g.layer_ratio)
    g.n_space, g.n_time = int(g.n_space), int(g.n_time)
    if g.layer_steps is not None:
        g.layer_steps = int(g.layer_steps)
    if g.scheme not in ("strang", "imex"):
        raise ConfigError(f"grid: unknown scheme {g.scheme!r}")
    if g.neumann not in ("ghost", "one_sided"):
        raise ConfigError(f"grid: unknown neumann option {g.neumann!r}")
    if g.n_space < 3 or g.n_time < 1:
        raise ConfigError("grid: need n_space >= 3 and n_time >= 1")
    if not g.y_max > cfg.model.a:
        raise ConfigError("grid: y_max must exceed a")
    lad = cfg.ladder
    lad.M_schedule = [float(m) for m in lad.M_schedule]
    if not lad.M_schedule or any(b < a for a, b in zip(lad.M_schedule, lad.M_schedule[1:])):
        raise ConfigError("ladder: M_schedule must be a nonempty nondecreasing list")
    lad.t_cut, lad.eps_ladder = float(lad.t_cut), float(lad.eps_ladder)
    if lad.tau_mono is not None:
        lad.tau_mono = float(lad.tau_mono)
    if not 0 <= lad.t_cut < cfg.model.T:
        raise ConfigError("ladder: t_cut must lie in [0, T)")
    mc = cfg.mc
    mc.n_paths, mc.seed, mc.dump_paths = int(mc.n_paths), int(mc.seed), int(mc.dump_paths)
    mc.dt, mc.x0 = float(mc.dt), float(mc.x0)
    if mc.y0 is not None:
        mc.y0 = float(mc.y0)
    mc.strategies = list(mc.strategies)
    if mc.n_paths < 0 or not mc.dt > 0:
        raise ConfigError("mc: need n_paths >= 0 and dt > 0")
    if mc.reflection not in ("bridge", "projection"):
        raise ConfigError(f"mc: unknown reflection scheme {mc.reflection!r}")
    bad = set(mc.strategies) - {"optimal-feedback", "twap", "no-dark-pool-feedback"}
    if bad:
        raise ConfigError(f"mc: unknown strategies {sorted(bad)}")
    cfg.output.formats = list(cfg.output.formats)
    cfg.verify.catalog = list(cfg.verify.catalog)
    cfg.verify.suites = list(cfg.verify.suites)
    cfg.verify.n_paths = int(cfg.verify.n_paths)
    return cfg


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping of sections")
    for name in REQUIRED_SECTIONS:
        if name not in d:
            raise ConfigError(f"missing required section '{name}'")
    unknown = set(d) - {"model", "grid", "ladder", "mc", "output", "verify"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    model = model_from_dict(d["model"] or {})
    cfg = RunConfig(
        model=model,
        grid=_section(GridSection, "grid", d["grid"]),
        ladder=_section(LadderSection, "ladder", d.get("ladder")),
        mc=_section(McSection, "mc", d.get("mc")),
        output=_section(OutputSection, "output", d.get("output")),
        verify=_section(VerifySection, "verify", d.get("verify")),
    )
    return _coerce(cfg)


def parse_config(text: str) -> RunConfig:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from None
    return config_from_dict(d)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)
