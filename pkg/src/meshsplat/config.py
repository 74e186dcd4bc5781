"""Run configuration: one JSON file drives every CLI subcommand.

Parsing is strict: unknown keys anywhere raise ConfigError with the
offending path, and "seed" is mandatory. Every other section falls back
to module defaults, so a minimal config is {"seed": 0}.
"""

from __future__ import annotations

import json
from dataclasses import (dataclass, field, fields as dc_fields,
                         replace as dc_replace)

from .adaptation import AdaptationConfig
from .bench import BenchmarkConfig
from .errors import ConfigError
from .objectives import LossWeights


@dataclass
class PriorHyper:
    embed_dim: int = 128
    group_latent: int = 16
    hidden_layers: int = 3
    hidden_width: int = 64
    max_offset: float = 0.02
    lr: float = 1e-3
    steps: int = 200


@dataclass
class InitSpec:
    """How the `init` subcommand produces the starting weights."""

    mode: str = "subject"        # subject (bake + distill) | cold (random)
    distill_steps: int = 700
    distill_lr: float = 3e-3
    facing_min: float = 0.2
    outlier_tol: float = 0.25

    def __post_init__(self):
        if self.mode not in ("subject", "cold"):
            raise ConfigError(
                f"init.mode must be subject or cold, got {self.mode!r}")
        if self.distill_steps < 0:
            raise ConfigError("init.distill_steps must be >= 0")
        if self.distill_lr <= 0:
            raise ConfigError("init.distill_lr must be > 0")
        if self.facing_min <= 0:
            raise ConfigError("init.facing_min must be > 0")
        if self.outlier_tol <= 0:
            raise ConfigError("init.outlier_tol must be > 0")


@dataclass
class EnhancerSpec:
    kind: str = "identity"          # identity | oracle | remote
    url: str | None = None          # remote only
    timeout: float = 30.0
    oracle_bench: str | None = None  # bench root holding the ground truth

    def __post_init__(self):
        if self.kind not in ("identity", "oracle", "remote"):
            raise ConfigError(
                f"enhancer.kind must be identity, oracle, or remote, "
                f"got {self.kind!r}")
        if self.kind == "remote" and not self.url:
            raise ConfigError("enhancer.kind remote requires enhancer.url")
        if self.kind == "oracle" and not self.oracle_bench:
            raise ConfigError(
                "enhancer.kind oracle requires enhancer.oracle_bench")


@dataclass
class RendererSpec:
    mode: str = "tiled"
    tile_size: int = 16
    threads: int | None = None

    def __post_init__(self):
        if self.mode not in ("tiled", "brute"):
            raise ConfigError(
                f"renderer.mode must be tiled or brute, got {self.mode!r}")
        if self.tile_size < 1:
            raise ConfigError("renderer.tile_size must be >= 1")


@dataclass
class RunConfig:
    seed: int
    output_dir: str | None = None
    uv_size: int = 64
    loss: LossWeights = field(default_factory=LossWeights)
    prior: PriorHyper = field(default_factory=PriorHyper)
    init: InitSpec = field(default_factory=InitSpec)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    enhancer: EnhancerSpec = field(default_factory=EnhancerSpec)
    renderer: RendererSpec = field(default_factory=RendererSpec)
    bench: BenchmarkConfig | None = None


def _build(cls, obj, path, coerce=()):
    """Construct a dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in dc_fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        if key in coerce and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config: top level must be an object")
    known = {"seed", "output_dir", "uv_size", "loss", "prior", "init",
             "adaptation", "enhancer", "renderer", "bench"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"run config: unknown keys {sorted(unknown)}")
    if "seed" not in doc:
        raise ConfigError("run config: missing required key 'seed'")
    cfg = RunConfig(seed=int(doc["seed"]))
    if "output_dir" in doc:
        cfg.output_dir = doc["output_dir"]
    if "uv_size" in doc:
        cfg.uv_size = int(doc["uv_size"])
        if cfg.uv_size < 1:
            raise ConfigError("uv_size must be >= 1")
    if "loss" in doc:
        cfg.loss = _build(LossWeights, doc["loss"], "loss")
    if "prior" in doc:
        cfg.prior = _build(PriorHyper, doc["prior"], "prior")
    if "init" in doc:
        cfg.init = _build(InitSpec, doc["init"], "init")
    if "adaptation" in doc:
        cfg.adaptation = _build(AdaptationConfig, doc["adaptation"],
                                "adaptation",
                                coerce=("yaw_range", "pitch_range"))
    # Adaptation randomness inherits the run seed unless set explicitly.
    if "seed" not in doc.get("adaptation", {}):
        cfg.adaptation = dc_replace(cfg.adaptation, seed=cfg.seed)
    if "enhancer" in doc:
        cfg.enhancer = _build(EnhancerSpec, doc["enhancer"], "enhancer")
    if "renderer" in doc:
        cfg.renderer = _build(RendererSpec, doc["renderer"], "renderer")
    if "bench" in doc:
        cfg.bench = _build(
            BenchmarkConfig, doc["bench"], "bench",
            coerce=("yaw_range", "pitch_range", "background"))
    return cfg


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_run_config(doc)
