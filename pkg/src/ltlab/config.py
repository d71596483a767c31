"""Run configuration: dataclasses mirroring the TOML sections.

A config file has sections [data], [model], [loss], [bank], [optim] and
[run]; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataConfig:
    profile: str = "exponential"  # "exponential" or "pareto"
    classes: int = 10
    n_max: int = 500
    imbalance: float = 100.0
    n_min: int = 5
    dim: int = 16
    separation: float = 3.0
    noise_sigma: float = 0.25
    test_per_class: int = 100
    csv_path: Optional[str] = None


@dataclass
class ModelConfig:
    encoder_widths: list[int] = field(default_factory=lambda: [64, 64])
    embedding_dim: int = 32
    head_kind: str = "linear"  # "linear" or "cosine"
    gamma_t: float = 0.05


@dataclass
class LossConfig:
    kind: str = "cibl"  # ce | summed | paco | cibl | ncibl
    lambda_ce: float = 1.0
    lambda_scl: float = 0.05
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.05


@dataclass
class BankConfig:
    queue_capacity: int = 1024
    momentum_m: float = 0.999


@dataclass
class OptimConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 50
    schedule: str = "cosine"  # "cosine" or "step"
    warmup_epochs: int = 5
    milestones: list[list[float]] = field(default_factory=list)  # [[epoch, factor]]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: Optional[str] = None


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def copy(self) -> "TrainConfig":
        return from_dict(self.to_dict())

    def set_by_path(self, path: str, value: Any) -> None:
        """Assign e.g. 'loss.lambda_scl' = 0.05; used by parameter sweeps."""
        parts = path.split(".")
        if len(parts) != 2:
            raise ValueError(f"parameter path must be section.key, got {path!r}")
        section, key = parts
        if not hasattr(self, section):
            raise ValueError(f"unknown config section {section!r}")
        sub = getattr(self, section)
        if key not in {f.name for f in fields(sub)}:
            raise ValueError(f"unknown config key {path!r}")
        setattr(sub, key, value)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "bank": BankConfig,
    "optim": OptimConfig,
    "run": RunConfig,
}


def _build_section(cls, values: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    return cls(**values)


def from_dict(raw: dict[str, Any]) -> TrainConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    kwargs = {
        name: _build_section(cls, raw.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    return TrainConfig(**kwargs)


def load_config(path: str | Path) -> TrainConfig:
    """Parse a TOML config file; parse errors carry file and line context."""
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from exc
    try:
        return from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc
