"""Experiment configuration: one strict JSON document per run.

Unknown keys are rejected rather than ignored so a typo in a sweep config
fails loudly instead of silently running the defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

from .adapters import ConfigError
from .outliers import SweepProtocol

ADAPTER_KINDS = ("lora", "gralora", "hybrid")


@dataclass
class GeometryConfig:
    m: int = 256
    n: int = 256
    t: int = 512

    def __post_init__(self):
        for name, v in (("m", self.m), ("n", self.n), ("t", self.t)):
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"geometry.{name} must be a positive integer, got {v!r}")


@dataclass
class AdapterConfig:
    kind: str = "gralora"
    r: int = 32
    k: int = 4
    alpha: Optional[float] = None
    ratio: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter.kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        if not isinstance(self.r, int) or self.r < 1:
            raise ConfigError(f"adapter.r must be a positive integer, got {self.r!r}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"adapter.k must be a positive integer, got {self.k!r}")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"adapter.ratio must lie in [0, 1], got {self.ratio!r}")


@dataclass
class OutlierConfig:
    channels: Tuple[int, ...] = (85,)
    magnitude_ratio: float = 100.0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.magnitude_ratio < 1.0:
            raise ConfigError(
                f"outlier.magnitude_ratio must be >= 1, got {self.magnitude_ratio!r}"
            )


@dataclass
class SweepConfig:
    """Axes for the sweep subcommands; ``seeds`` may be given as a count."""

    ranks: Tuple[int, ...] = (8, 16, 32, 64)
    k_values: Tuple[int, ...] = (1, 2, 4)
    ratios: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    seeds: Tuple[int, ...] = tuple(range(20))

    def __post_init__(self):
        if isinstance(self.seeds, int):
            self.seeds = tuple(range(self.seeds))
        self.ranks = tuple(self.ranks)
        self.k_values = tuple(self.k_values)
        self.ratios = tuple(self.ratios)
        self.seeds = tuple(self.seeds)
        for name, axis in (
            ("ranks", self.ranks),
            ("k_values", self.k_values),
            ("ratios", self.ratios),
            ("seeds", self.seeds),
        ):
            if len(axis) == 0:
                raise ConfigError(f"sweep.{name} must not be empty")
        for ratio in self.ratios:
            if not 0.0 <= ratio <= 1.0:
                raise ConfigError(f"sweep.ratios entries must lie in [0, 1], got {ratio!r}")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "lion_decoupled"):
            raise ConfigError(f"optimizer.kind must be sgd or lion_decoupled, got {self.kind!r}")
        if self.lr < 0.0:
            raise ConfigError(f"optimizer.lr must be >= 0, got {self.lr!r}")


@dataclass
class TrainConfig:
    structure: str = "low_rank"
    teacher_rank: int = 4
    grid: int = 4
    noise_std: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    steps_per_epoch: int = 25

    def __post_init__(self):
        for name, v in (
            ("teacher_rank", self.teacher_rank),
            ("grid", self.grid),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("steps_per_epoch", self.steps_per_epoch),
        ):
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {v!r}")


@dataclass
class GradcheckConfig:
    """Geometry for finite-difference runs; kept small, the cost is O(params x forward)."""

    m: int = 24
    n: int = 24
    t: int = 8
    r: int = 8
    k: int = 4
    h: float = 1e-5
    tol: float = 1e-5

    def __post_init__(self):
        if self.h <= 0.0 or self.tol <= 0.0:
            raise ConfigError("gradcheck.h and gradcheck.tol must be positive")


@dataclass
class ProtocolConfig:
    """Mirrors the deviation-sweep measurement knobs."""

    t: int = 128
    train_steps: int = 60
    measure_batches: int = 8
    lr: float = 3e-6
    optimizer: str = "sgd"
    teacher_scale: float = 1.0
    noise_std: float = 0.0

    def to_protocol(self) -> SweepProtocol:
        return SweepProtocol(
            t=self.t,
            train_steps=self.train_steps,
            measure_batches=self.measure_batches,
            lr=self.lr,
            optimizer=self.optimizer,
            teacher_scale=self.teacher_scale,
            noise_std=self.noise_std,
        )


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "out"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    outlier: OutlierConfig = field(default_factory=OutlierConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


_SECTIONS = {
    "geometry": GeometryConfig,
    "adapter": AdapterConfig,
    "outlier": OutlierConfig,
    "sweep": SweepConfig,
    "optimizer": OptimizerConfig,
    "train": TrainConfig,
    "gradcheck": GradcheckConfig,
    "protocol": ProtocolConfig,
}


def _build_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a JSON object, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {path}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {path} section: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTIONS:
            kwargs[name] = _build_section(_SECTIONS[name], value, name)
        else:
            kwargs[name] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def validate_experiment(cfg: ExperimentConfig) -> None:
    """Cross-section checks run before any subcommand touches real work.

    Adapter construction is the divisibility authority, so build one (cheap at
    these sizes) rather than restating its rules here.
    """
    from .adapters import init_adapter
    from .outliers import OutlierSpec

    init_adapter(
        cfg.adapter.kind, cfg.geometry.m, cfg.geometry.n, cfg.adapter.r,
        k=cfg.adapter.k if cfg.adapter.kind != "lora" else 1,
        alpha=cfg.adapter.alpha, ratio=cfg.adapter.ratio, seed=0,
    )
    spec = OutlierSpec(cfg.outlier.channels, cfg.outlier.magnitude_ratio)
    try:
        spec.validate_for(cfg.geometry.n)
    except IndexError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
