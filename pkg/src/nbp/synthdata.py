"""Gaussian-process regression tasks for meta-learning.

A task is one function drawn from a GP prior, observed with Gaussian noise
at a set of inputs, and split into context and target points by a masking
protocol:

* ``random``  - interpolation: targets are a random subset of the points.
* ``window``  - reconstruction: targets form one contiguous stretch (per masked
  channel for multichannel tasks).
* ``suffix``  - forecasting: targets are the points after a cutoff in input order.

Multichannel tasks (``n_channels > 1``) mimic multi-electrode recordings:
each channel is an independent GP draw over a shared regular time grid and
the inputs are ``(time, channel index)`` pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

KERNEL_KINDS = ("squared_exponential", "matern52")
MASK_MODES = ("random", "window", "suffix")


class GramFactorizationError(np.linalg.LinAlgError):
    """Gram matrix stayed indefinite after the largest jitter."""


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "squared_exponential"
    lengthscale: float = 0.25

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNEL_KINDS}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GPTaskConfig:
    D_x: int = 1
    n_context_range: tuple[int, int] = (1, 10)
    n_target: int = 50
    noise_sigma: float = 0.05
    x_domain: tuple[float, float] = (-2.0, 2.0)
    mask_mode: str = "random"
    n_channels: int = 1
    n_masked_channels: int = 1

    def __post_init__(self):
        lo, hi = self.n_context_range
        if not 1 <= lo <= hi:
            raise ValueError(f"need 1 <= lo <= hi for n_context_range, got {self.n_context_range}")
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.D_x < 1:
            raise ValueError("D_x must be >= 1")
        if not self.x_domain[0] < self.x_domain[1]:
            raise ValueError("x_domain must be an increasing interval")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}; expected one of {MASK_MODES}")
        if self.n_channels < 1 or not 1 <= self.n_masked_channels <= self.n_channels:
            raise ValueError("need 1 <= n_masked_channels <= n_channels")
        if self.n_channels > 1 and self.D_x != 2:
            raise ValueError("multichannel tasks use (time, channel) inputs, so D_x must be 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_context_range"] = list(self.n_context_range)
        d["x_domain"] = list(self.x_domain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GPTaskConfig":
        d = dict(d)
        if "n_context_range" in d:
            d["n_context_range"] = tuple(d["n_context_range"])
        if "x_domain" in d:
            d["x_domain"] = tuple(d["x_domain"])
        return cls(**d)


@dataclass
class Task:
    x: np.ndarray  # (N, D_x)
    y: np.ndarray  # (N, D_y)
    context_mask: np.ndarray  # (N,) bool, True = context
    kernel: KernelSpec
    seed: int
    config: GPTaskConfig = field(default_factory=GPTaskConfig)

    @property
    def n_context(self) -> int:
        return int(self.context_mask.sum())

    @property
    def n_target(self) -> int:
        return int((~self.context_mask).sum())

    def context(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.context_mask], self.y[self.context_mask]

    def target(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[~self.context_mask], self.y[~self.context_mask]


def default_lengthscale(D_x: int) -> float:
    if D_x < 1:
        raise ValueError("D_x must be >= 1")
    return math.sqrt(D_x) / 4.0


def kernel_eval(spec: KernelSpec, x1, x2) -> float:
    x1, x2 = np.atleast_1d(np.asarray(x1, float)), np.atleast_1d(np.asarray(x2, float))
    if x1.shape != x2.shape:
        raise ValueError(f"points differ in dimension: {x1.shape} vs {x2.shape}")
    r = float(np.linalg.norm(x1 - x2))
    return float(_kernel_from_distance(spec, np.array(r)))


def _kernel_from_distance(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    ell = spec.lengthscale
    if spec.kind == "squared_exponential":
        return np.exp(-(r**2) / (2 * ell**2))
    a = math.sqrt(5.0) * r / ell
    return (1.0 + a + a**2 / 3.0) * np.exp(-a)


def gram(spec: KernelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    diff = x[:, None, :] - x[None, :, :]
    K = _kernel_from_distance(spec, np.sqrt(np.sum(diff**2, axis=-1)))
    return 0.5 * (K + K.T)


def jittered_cholesky(K: np.ndarray, start: float = 1e-8, stop: float = 1e-4) -> np.ndarray:
    """Cholesky factor of K + jitter * mean(diag) * I, growing jitter x10 until it works."""
    scale = float(np.mean(np.diag(K))) if K.size else 1.0
    jitter = start
    eye = np.eye(K.shape[0])
    while jitter <= stop * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise GramFactorizationError(f"Gram matrix not positive definite even with jitter {stop:g}")


def sample_gp_values(
    x: np.ndarray,
    kernel: KernelSpec,
    noise_sigma: float,
    rng: np.random.Generator,
    n_draws: int | None = None,
) -> np.ndarray:
    """Noisy GP prior draws at ``x``: (N,) or (n_draws, N).

    The latent function is drawn once per distinct input, so coincident inputs
    share the function value exactly; observation noise is independent per point.
    """
    x = np.asarray(x, float).reshape(len(x), -1)
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    L = jittered_cholesky(gram(kernel, uniq))
    shape = (len(uniq),) if n_draws is None else (n_draws, len(uniq))
    z = rng.standard_normal(shape)
    f = z @ L.T
    f = f[..., inverse]
    return f + noise_sigma * rng.standard_normal(f.shape)


def _mask(n: int, n_target: int, order: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Context mask over points listed in ``order`` (ascending input order)."""
    is_target = np.zeros(n, dtype=bool)
    if mode == "random":
        is_target[rng.choice(n, size=n_target, replace=False)] = True
    elif mode == "window":
        start = int(rng.integers(0, n - n_target + 1))
        is_target[order[start : start + n_target]] = True
    else:
        is_target[order[n - n_target :]] = True
    return ~is_target


def sample_gp_task(cfg: GPTaskConfig, kernel: KernelSpec, seed: int) -> Task:
    """Deterministic function of ``(cfg, kernel, seed)``."""
    rng = np.random.default_rng(seed)
    if cfg.n_channels > 1:
        return _sample_multichannel(cfg, kernel, seed, rng)
    lo, hi = cfg.n_context_range
    n_context = int(rng.integers(lo, hi + 1))
    n = n_context + cfg.n_target
    a, b = cfg.x_domain
    x = rng.uniform(a, b, size=(n, cfg.D_x))
    y = sample_gp_values(x, kernel, cfg.noise_sigma, rng).reshape(n, 1)
    order = np.argsort(x[:, 0], kind="stable")
    mask = _mask(n, cfg.n_target, order, cfg.mask_mode, rng)
    return Task(x=x, y=y, context_mask=mask, kernel=kernel, seed=int(seed), config=cfg)


def _sample_multichannel(cfg: GPTaskConfig, kernel: KernelSpec, seed: int, rng: np.random.Generator) -> Task:
    """Channels share a time grid; ``n_target`` points are hidden in each masked channel.

    The time grid has ``n_target + hi`` points so that every channel has room for
    the largest context count.
    """
    lo, hi = cfg.n_context_range
    n_times = cfg.n_target + hi
    a, b = cfg.x_domain
    times = np.linspace(a, b, n_times)
    xs, ys, masks = [], [], []
    masked = set(rng.choice(cfg.n_channels, size=cfg.n_masked_channels, replace=False).tolist())
    order = np.arange(n_times)
    for c in range(cfg.n_channels):
        y_c = sample_gp_values(times[:, None], kernel, cfg.noise_sigma, rng)
        if c in masked:
            m = _mask(n_times, cfg.n_target, order, cfg.mask_mode, rng)
        else:
            m = np.ones(n_times, dtype=bool)
        xs.append(np.stack([times, np.full(n_times, float(c))], axis=1))
        ys.append(y_c[:, None])
        masks.append(m)
    return Task(
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        context_mask=np.concatenate(masks),
        kernel=kernel,
        seed=int(seed),
        config=cfg,
    )


def task_seed(base_seed: int, *indices: int) -> int:
    """Stable 63-bit seed for the task at ``indices`` under ``base_seed``."""
    ss = np.random.SeedSequence([int(base_seed), *map(int, indices)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# -- line-delimited task files -----------------------------------------------------


def task_to_record(task: Task) -> dict:
    return {
        "seed": task.seed,
        "config": task.config.to_dict(),
        "kernel": task.kernel.to_dict(),
        "n": int(task.x.shape[0]),
        "d_x": int(task.x.shape[1]),
        "d_y": int(task.y.shape[1]),
        "x": [float(v) for v in task.x.reshape(-1)],
        "y": [float(v) for v in task.y.reshape(-1)],
        "mask": [int(v) for v in task.context_mask],
    }


def task_from_record(rec: dict) -> Task:
    n, d_x, d_y = rec["n"], rec["d_x"], rec["d_y"]
    return Task(
        x=np.asarray(rec["x"], float).reshape(n, d_x),
        y=np.asarray(rec["y"], float).reshape(n, d_y),
        context_mask=np.asarray(rec["mask"], dtype=bool),
        kernel=KernelSpec(**rec["kernel"]),
        seed=int(rec["seed"]),
        config=GPTaskConfig.from_dict(rec["config"]),
    )


def write_tasks(path, tasks: Iterable[Task]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_record(task), separators=(",", ":")))
            fh.write("\n")


def read_tasks(path) -> list[Task]:
    return list(iter_tasks(path))


def iter_tasks(path) -> Iterator[Task]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield task_from_record(json.loads(line))
