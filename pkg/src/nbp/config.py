"""One JSON document describing a whole experiment.

Sections: ``schedule``, ``denoiser``, ``diffusion``, ``data``, ``train`` and
``eval``.  Missing sections and keys take their defaults; unknown keys and
other schema versions are rejected with a message naming the offending key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, init_params
from .diffusion import AlignmentSpec, DiffusionModel
from .schedule import ScheduleConfig, build_schedule
from .synthdata import GPTaskConfig, KernelSpec, default_lengthscale
from .trainer import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionFlags:
    bridge_enabled: bool = True
    alignment: AlignmentSpec = field(default_factory=AlignmentSpec)

    def to_dict(self) -> dict:
        return {"bridge_enabled": self.bridge_enabled, "alignment": self.alignment.to_dict()}


@dataclass(frozen=True)
class EvalProtocol:
    n_samples: int = 128
    repaint: int = 5
    seed: int = 0
    n_tasks: int = 64

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2 to fit a covariance")
        if self.repaint < 1 or self.n_tasks < 1:
            raise ValueError("repaint and n_tasks must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionFlags = field(default_factory=DiffusionFlags)
    data: GPTaskConfig = field(default_factory=GPTaskConfig)
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec("squared_exponential", default_lengthscale(1)))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "schedule": self.schedule.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "data": self.data.to_dict(),
            "kernel": self.kernel.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(d, {f.name for f in dataclasses.fields(cls)}, "")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version!r} is not supported (expected {CONFIG_VERSION})")
        try:
            diff = d.get("diffusion", {})
            _reject_unknown(diff, {"bridge_enabled", "alignment"}, "diffusion.")
            _reject_unknown(diff.get("alignment", {}), {"kind", "weight", "bias"}, "diffusion.alignment.")
            return cls(
                schedule=_section(ScheduleConfig, d, "schedule"),
                denoiser=_section(DenoiserConfig, d, "denoiser"),
                diffusion=DiffusionFlags(
                    bridge_enabled=bool(diff.get("bridge_enabled", True)),
                    alignment=AlignmentSpec.from_dict(diff.get("alignment", {})),
                ),
                data=_section(GPTaskConfig, d, "data", GPTaskConfig.from_dict),
                kernel=_section(KernelSpec, d, "kernel"),
                train=_section(TrainConfig, d, "train"),
                eval=_section(EvalProtocol, d, "eval"),
                version=version,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def validate(self) -> None:
        self.schedule.validate()
        self.denoiser.validate()
        if self.diffusion.alignment.kind == "identity" and self.data.D_x != 1:
            raise ConfigError("identity alignment needs D_x == D_y == 1 for GP tasks; use mean_projection")


def _reject_unknown(d: dict, known: set, prefix: str) -> None:
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def _section(cls, d: dict, name: str, build=None):
    sub = d.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"section {name!r} must be an object")
    _reject_unknown(sub, {f.name for f in dataclasses.fields(cls)}, name + ".")
    if build is not None:
        return build(sub)
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()})


def build_model(rc: RunConfig, params: dict[str, np.ndarray] | None = None) -> DiffusionModel:
    """Model described by ``rc``; fresh weights from ``rc.train.seed`` unless ``params`` is given."""
    rc.validate()
    if params is None:
        params = init_params(rc.denoiser, rc.train.seed)
    return DiffusionModel(
        schedule=build_schedule(rc.schedule),
        denoiser=rc.denoiser,
        params=params,
        alignment=rc.diffusion.alignment,
        bridge_enabled=rc.diffusion.bridge_enabled,
    )
