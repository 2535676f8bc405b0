"""Declarative pipeline configuration (YAML) with environment overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .detector import TrainConfig
from .synthesis import STRATEGIES

ENV_GENERATOR_URL = "BOXOOD_GENERATOR_URL"
ENV_EMBEDDER_URL = "BOXOOD_EMBEDDER_URL"
ENV_SEED = "BOXOOD_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    in_annotations: str = ""
    in_images: str | None = None
    in_test_annotations: str | None = None
    ood_test_annotations: str | None = None
    output_root: str = "runs"


@dataclass
class ServiceConfig:
    mock: bool = True
    url: str | None = None
    timeout: float = 120.0
    retries: int = 2
    max_in_flight: int = 1
    dim: int = 64


@dataclass
class MetricsConfig:
    iou_threshold: float = 0.5
    include_reference_rows: bool = True


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    strategy: str = "generic"
    sigma: float | list[float] | None = None
    n_outlier_images: int = 5000
    generator: ServiceConfig = field(default_factory=ServiceConfig)
    embedder: ServiceConfig = field(default_factory=ServiceConfig)
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    train_baseline: bool = True
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    @property
    def sigmas(self) -> list[float | None]:
        if self.strategy == "generic":
            return [None]
        return list(self.sigma) if isinstance(self.sigma, (list, tuple)) else [self.sigma]

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(os.path.expandvars(os.path.expanduser(p)))
        return path if path.is_absolute() else Path(self.base_dir) / path

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return self.digest()[:12]

    def run_dir(self) -> Path:
        return self.resolve(self.paths.output_root) / self.run_id


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict, base_dir: str = ".", env: dict | None = None) -> PipelineConfig:
    data = dict(data or {})
    env = os.environ if env is None else env
    nested = {
        "paths": Paths, "generator": ServiceConfig, "embedder": ServiceConfig,
        "train": TrainConfig, "metrics": MetricsConfig,
    }
    kwargs = {}
    for key, cls in nested.items():
        kwargs[key] = _build(cls, data.pop(key, None), key)
    top = {f.name for f in fields(PipelineConfig)} - set(nested) - {"base_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    kwargs.update(data)
    cfg = PipelineConfig(base_dir=str(base_dir), **kwargs)

    if env.get(ENV_GENERATOR_URL):
        cfg.generator.url, cfg.generator.mock = env[ENV_GENERATOR_URL], False
    if env.get(ENV_EMBEDDER_URL):
        cfg.embedder.url, cfg.embedder.mock = env[ENV_EMBEDDER_URL], False
    if env.get(ENV_SEED):
        try:
            cfg.seed = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    cfg.train.seed = cfg.seed
    validate(cfg)
    return cfg


def load_config(path, env: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return from_dict(data, base_dir=str(path.parent), env=env)


def validate(cfg: PipelineConfig, stages: tuple[str, ...] = ()) -> None:
    """Check everything that can be checked without touching the filesystem for writing."""
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {cfg.strategy!r}")
    if cfg.strategy == "distance":
        if cfg.sigma is None or cfg.sigma == []:
            raise ConfigError("distance strategy requires sigma (a value or a sweep list)")
        for s in cfg.sigmas:
            if not isinstance(s, (int, float)) or s < 0:
                raise ConfigError(f"sigma values must be non-negative numbers, got {s!r}")
        if not cfg.embedder.mock and not cfg.embedder.url:
            raise ConfigError("embedder.url required when embedder.mock is false")
    if not cfg.generator.mock and not cfg.generator.url:
        raise ConfigError("generator.url required when generator.mock is false")
    if cfg.n_outlier_images < 0 or cfg.workers < 1:
        raise ConfigError("n_outlier_images must be >= 0 and workers >= 1")
    if not 0 < cfg.metrics.iou_threshold < 1:
        raise ConfigError("metrics.iou_threshold must lie in (0, 1)")
    if not cfg.paths.in_annotations:
        raise ConfigError("paths.in_annotations is required")
    checks = [("in_annotations", cfg.paths.in_annotations)]
    if "evaluate" in stages:
        for key in ("in_test_annotations", "ood_test_annotations"):
            if not getattr(cfg.paths, key):
                raise ConfigError(f"paths.{key} is required for evaluation")
            checks.append((key, getattr(cfg.paths, key)))
    for key, value in checks:
        if not cfg.resolve(value).is_file():
            raise ConfigError(f"paths.{key} does not exist: {cfg.resolve(value)}")
