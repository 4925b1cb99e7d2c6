"""Training loop: warmup/cosine learning rate, Adam, EMA weights, checkpoints.

Every source of randomness is derived from ``(seed, step)``: the tasks of a
step come from :func:`nbp.synthdata.task_seed` and the timestep/noise draws
from ``default_rng([seed, step])``.  A checkpoint therefore only has to store
parameters, optimizer moments and the step counter to resume bit-identically.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .diffusion import LOSS_KINDS, DiffusionModel, training_loss
from .synthdata import GPTaskConfig, KernelSpec, Task, sample_gp_task, task_seed

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "epoch", "lr", "train_loss")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    tasks_per_epoch: int = 1024
    batch_size: int = 32
    lr_start: float = 2e-5
    lr_peak: float = 1e-3
    lr_end: float = 1e-5
    warmup_epochs: int = 20
    decay_epochs: int = 200
    ema_decay: float = 0.995
    seed: int = 0
    loss_kind: str = "l2"
    log_every: int = 1
    checkpoint_every: int = 0  # epochs between intermediate checkpoints; 0 = final only
    grad_clip: float = 10.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.warmup_epochs < 0 or self.decay_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.tasks_per_epoch < self.batch_size:
            raise ValueError("need 1 <= batch_size <= tasks_per_epoch")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def steps_per_epoch(self) -> int:
        return self.tasks_per_epoch // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, cosine decay to the end value, then constant."""
    warm = cfg.warmup_epochs * cfg.steps_per_epoch
    decay = cfg.decay_epochs * cfg.steps_per_epoch
    if step < warm:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / warm
    k = step - warm
    if k >= decay:
        return cfg.lr_end
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * k / decay))


def ema_update(shadow: dict[str, np.ndarray], raw: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if shadow.keys() != raw.keys():
        raise ValueError("EMA and raw parameters have different names")
    out = {}
    for name, s in shadow.items():
        r = raw[name]
        if s.shape != r.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {s.shape} vs {r.shape}")
        out[name] = (decay * s + (1.0 - decay) * r).astype(s.dtype)
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: (g * factor).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "TrainState":
        return cls(
            params={k: v.copy() for k, v in params.items()},
            ema={k: v.copy() for k, v in params.items()},
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    b1, b2 = cfg.adam_b1, cfg.adam_b2
    n = state.step + 1
    c1 = 1.0 - b1**n
    c2 = 1.0 - b2**n
    for name, g in grads.items():
        dt = state.params[name].dtype
        m = (b1 * state.m[name] + (1.0 - b1) * g).astype(dt)
        v = (b2 * state.v[name] + (1.0 - b2) * g * g).astype(dt)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        state.params[name] = (state.params[name] - update).astype(dt)


class NonFiniteLossError(nx.NonFiniteError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


def batch_tasks(data_cfg: GPTaskConfig, kernel: KernelSpec, seed: int, step: int, cfg: TrainConfig) -> list[Task]:
    epoch, k = divmod(step, cfg.steps_per_epoch)
    first = k * cfg.batch_size
    return [
        sample_gp_task(data_cfg, kernel, task_seed(seed, epoch, first + i))
        for i in range(cfg.batch_size)
    ]


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, run_config: dict, train_seed: int) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float32 blob)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    index = []
    offset = 0
    chunks = []
    for group in ("params", "ema", "m", "v"):
        for name, arr in getattr(state, group).items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            index.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset, "dtype": "<f4"})
            chunks.append(data.tobytes())
            offset += data.nbytes
    manifest = {
        "format": "nbp-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": run_config,
        "step": state.step,
        "rng": {"seed": train_seed, "step": state.step},
        "blob": blob_path.name,
        "arrays": index,
    }
    tmp_blob = blob_path.with_name(blob_path.name + ".tmp")
    tmp_blob.write_bytes(b"".join(chunks))
    os.replace(tmp_blob, blob_path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[TrainState, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != "nbp-checkpoint":
        raise ValueError(f"{path} is not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "ema": {}, "m": {}, "v": {}}
    for entry in manifest["arrays"]:
        group, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=count, offset=entry["offset"])
        groups[group][name] = arr.astype(np.float32).reshape(shape)
    state = TrainState(step=int(manifest["step"]), **groups)
    return state, manifest


# -- metrics -------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


class MetricsLog:
    """Append-only metrics CSV plus a separate wall-clock CSV.

    Wall time is kept out of ``metrics.csv`` so that reruns produce
    byte-identical metric files.
    """

    def __init__(self, out_dir: Path, resume_step: int | None = None):
        self.path = out_dir / "metrics.csv"
        self.timing_path = out_dir / "timing.csv"
        if resume_step is None or not self.path.exists():
            self._write_header(self.path, METRIC_FIELDS)
            self._write_header(self.timing_path, ("step", "wall_time"))
        else:
            self._truncate(self.path, resume_step)
            if self.timing_path.exists():
                self._truncate(self.timing_path, resume_step)
            else:
                self._write_header(self.timing_path, ("step", "wall_time"))

    @staticmethod
    def _write_header(path: Path, fields) -> None:
        path.write_text(",".join(fields) + "\n", encoding="utf-8")

    @staticmethod
    def _truncate(path: Path, step: int) -> None:
        lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < step]
        path.write_text("".join(kept), encoding="utf-8")

    def append(self, row: dict, wall_time: float) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(",".join(_fmt(row[k]) for k in METRIC_FIELDS) + "\n")
        with open(self.timing_path, "a", encoding="utf-8") as fh:
            fh.write(f"{row['step']},{wall_time:.6f}\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [
            {"step": int(r["step"]), "epoch": int(r["epoch"]), "lr": float(r["lr"]), "train_loss": float(r["train_loss"])}
            for r in csv.DictReader(fh)
        ]


# -- the loop ------------------------------------------------------------------------


def train(
    model: DiffusionModel,
    data_cfg: GPTaskConfig,
    kernel: KernelSpec,
    cfg: TrainConfig,
    out_dir,
    run_config: dict | None = None,
    resume: TrainState | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainState:
    """Optimize ``model.params`` in place of a fresh or resumed state.

    Writes ``metrics.csv``/``timing.csv``, ``checkpoint.json`` (+ ``.bin``) at
    the end, and ``checkpoint_step<N>.json`` every ``checkpoint_every`` epochs.
    The returned state's ``ema`` weights are the ones to evaluate with.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_config = run_config or {}
    state = resume if resume is not None else TrainState.fresh(model.params)
    metrics = MetricsLog(out_dir, resume_step=state.step if resume is not None else None)
    t0 = time.perf_counter()
    ckpt_every_steps = cfg.checkpoint_every * cfg.steps_per_epoch

    while state.step < cfg.total_steps:
        step = state.step
        tasks = batch_tasks(data_cfg, kernel, cfg.seed, step, cfg)
        rng = np.random.default_rng([cfg.seed, step])
        model.params = state.params
        loss, grads = training_loss(tasks, model, rng, cfg.loss_kind)
        if not math.isfinite(loss):
            raise NonFiniteLossError(step, loss)
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        adam_step(state, grads, lr, cfg)
        state.ema = ema_update(state.ema, state.params, cfg.ema_decay)
        state.step += 1
        if step % cfg.log_every == 0:
            row = {"step": step, "epoch": step // cfg.steps_per_epoch, "lr": lr, "train_loss": loss}
            metrics.append(row, time.perf_counter() - t0)
            if progress is not None:
                progress(row)
        if ckpt_every_steps and state.step % ckpt_every_steps == 0 and state.step < cfg.total_steps:
            save_checkpoint(out_dir / f"checkpoint_step{state.step}.json", state, run_config, cfg.seed)

    model.params = state.params
    save_checkpoint(out_dir / "checkpoint.json", state, run_config, cfg.seed)
    return state
