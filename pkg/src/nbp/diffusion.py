"""Bridge diffusion over function values.

Forward kernel, closed-form marginal, posterior-mean oracle, reverse step with
the bridge correction, the noise-prediction training loss, and the
conditional sampler with RePaint-style repeats.  A model built with
``bridge_enabled=False`` runs on a schedule whose gamma terms are zero, so
every formula here collapses to plain DDPM.

Diffusion states are kept in float64; only the denoiser runs at the
parameters' precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .denoiser import DenoiserConfig, predict_noise
from .schedule import NoiseSchedule

ALIGNMENT_KINDS = ("identity", "mean_projection", "custom_affine")
LOSS_KINDS = ("l2", "l1")


@dataclass(frozen=True)
class AlignmentSpec:
    kind: str = "identity"
    weight: tuple | None = None  # (D_x, D_y) nested tuple, custom_affine only
    bias: tuple | None = None  # (D_y,)

    def __post_init__(self):
        if self.kind not in ALIGNMENT_KINDS:
            raise ValueError(f"unknown alignment {self.kind!r}; expected one of {ALIGNMENT_KINDS}")
        if self.kind == "custom_affine" and self.weight is None:
            raise ValueError("custom_affine alignment needs a weight matrix")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.weight is not None:
            out["weight"] = [list(r) for r in self.weight]
        if self.bias is not None:
            out["bias"] = list(self.bias)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "AlignmentSpec":
        weight = d.get("weight")
        bias = d.get("bias")
        return cls(
            kind=d.get("kind", "identity"),
            weight=None if weight is None else tuple(tuple(float(v) for v in r) for r in weight),
            bias=None if bias is None else tuple(float(v) for v in bias),
        )


def align(x: np.ndarray, spec: AlignmentSpec, d_y: int) -> np.ndarray:
    """Project inputs (..., D_x) onto the output space (..., D_y) for the bridge terms."""
    x = np.asarray(x, dtype=np.float64)
    d_x = x.shape[-1]
    if spec.kind == "identity":
        if d_x != d_y:
            raise ValueError(f"identity alignment needs D_x == D_y, got {d_x} and {d_y}")
        return x
    if spec.kind == "mean_projection":
        return np.repeat(x.mean(axis=-1, keepdims=True), d_y, axis=-1)
    w = np.asarray(spec.weight, dtype=np.float64)
    if w.shape != (d_x, d_y):
        raise ValueError(f"affine alignment weight has shape {w.shape}, need {(d_x, d_y)}")
    out = x @ w
    if spec.bias is not None:
        out = out + np.asarray(spec.bias, dtype=np.float64)
    return out


@dataclass(frozen=True)
class SamplerConfig:
    repaint_repeats: int = 5
    seed: int = 0
    record_trajectory: bool = False
    # "gamma_bar" matches the forward marginal's endpoint; "gamma" is the literal alternative
    init: str = "gamma_bar"

    def __post_init__(self):
        if self.repaint_repeats < 1:
            raise ValueError("repaint_repeats must be >= 1")
        if self.init not in ("gamma_bar", "gamma"):
            raise ValueError("init must be 'gamma_bar' or 'gamma'")


@dataclass
class DiffusionModel:
    schedule: NoiseSchedule
    denoiser: DenoiserConfig
    params: dict[str, np.ndarray]
    alignment: AlignmentSpec = field(default_factory=AlignmentSpec)
    bridge_enabled: bool = True

    def __post_init__(self):
        if not self.bridge_enabled and self.schedule.bridge:
            self.schedule = self.schedule.without_bridge()
        if self.bridge_enabled and not self.schedule.bridge:
            raise ValueError("bridge_enabled model given a schedule with the bridge removed")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def predict(self, x, y_t, t, params=None) -> nx.Tensor:
        """Noise estimate for batched (B, N, D_x) inputs and (B, N, D_y) states."""
        self.schedule.check_t(t)
        p = self.params if params is None else params
        y_t = np.asarray(y_t).astype(self.dtype, copy=False)
        x = np.asarray(x).astype(self.dtype, copy=False)
        return predict_noise(x, y_t, np.asarray(t), self.denoiser, p)


def _coef(arr: np.ndarray, t, ndim: int) -> np.ndarray | float:
    """Index a schedule array by a scalar or per-batch timestep, shaped to broadcast."""
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        return float(arr[int(t_arr)])
    return arr[t_arr].reshape(t_arr.shape + (1,) * (ndim - t_arr.ndim))


def q_step(y_prev, x_a, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """One forward transition: sqrt(1 - beta_t) y_prev + gamma_t x_a + sqrt(beta_t) eps."""
    schedule.check_t(t)
    y_prev = np.asarray(y_prev, dtype=np.float64)
    nd = y_prev.ndim
    beta = _coef(schedule.beta, t, nd)
    return np.sqrt(1.0 - beta) * y_prev + _coef(schedule.gamma, t, nd) * x_a + np.sqrt(beta) * eps


def q_marginal_sample(y0, x_a, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Draw from q(y_t | y_0, x) given the standard-normal ``eps``."""
    schedule.check_t(t)
    y0 = np.asarray(y0, dtype=np.float64)
    nd = y0.ndim
    ab = _coef(schedule.alpha_bar, t, nd)
    om = _coef(schedule.one_minus_alpha_bar, t, nd)
    return np.sqrt(ab) * y0 + _coef(schedule.gamma_bar, t, nd) * x_a + np.sqrt(om) * eps


def posterior_mean_oracle(y_t, y0, x_a, t, schedule: NoiseSchedule) -> np.ndarray:
    """Mean of q(y_{t-1} | y_t, y_0, x) from the product of the two Gaussians.

    Test oracle only: it needs the clean ``y0``.
    """
    schedule.check_t(t)
    y_t = np.asarray(y_t, dtype=np.float64)
    nd = y_t.ndim
    b = _coef(schedule.beta, t, nd)
    om = _coef(schedule.one_minus_alpha_bar, t, nd)
    ab_prev = _coef(schedule.alpha_bar, np.asarray(t) - 1, nd)
    om_prev = _coef(schedule.one_minus_alpha_bar, np.asarray(t) - 1, nd)
    g = _coef(schedule.gamma, t, nd)
    gb_prev = _coef(schedule.gamma_bar, np.asarray(t) - 1, nd)
    c_yt = np.sqrt(1.0 - b) * om_prev / om
    c_y0 = b * np.sqrt(ab_prev) / om
    c_x = (b * gb_prev - np.sqrt(1.0 - b) * om_prev * g) / om
    return c_yt * y_t + c_y0 * y0 + c_x * x_a


def reverse_mean(y_t, x_a, t, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Denoising term plus the bridge correction c_bridge[t] * x_a."""
    schedule.check_t(t)
    y_t = np.asarray(y_t, dtype=np.float64)
    nd = y_t.ndim
    b = _coef(schedule.beta, t, nd)
    om = _coef(schedule.one_minus_alpha_bar, t, nd)
    denoise = (y_t - b / np.sqrt(om) * eps_hat) / np.sqrt(1.0 - b)
    return denoise + _coef(schedule.c_bridge, t, nd) * x_a


def reverse_variance(t, schedule: NoiseSchedule) -> float:
    schedule.check_t(t)
    return float(schedule.beta_tilde[t])


# -- training ----------------------------------------------------------------------


def _point_loss(diff: nx.Tensor, loss_kind: str) -> nx.Tensor:
    if loss_kind == "l2":
        return nx.square(diff)
    if loss_kind == "l1":
        return nx.absolute(diff)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def training_loss(
    tasks: Sequence,
    model: DiffusionModel,
    rng: np.random.Generator,
    loss_kind: str = "l2",
    with_grad: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Noise-prediction loss over a batch of tasks, with parameter gradients.

    For each task (in order) one ``t ~ U{1..T}`` and one ``eps ~ N(0, I)`` of the
    task's output shape are drawn from ``rng``.  All points of a task are denoised
    jointly.  Tasks of equal size are stacked into one denoiser call; the loss is
    the mean over tasks of each task's mean pointwise loss.
    """
    if not tasks:
        raise ValueError("empty batch")
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    T = model.schedule.T
    draws = []
    for task in tasks:
        t = int(rng.integers(1, T + 1))
        eps = rng.standard_normal(task.y.shape)
        draws.append((t, eps))

    groups: dict[tuple, list[int]] = {}
    for i, task in enumerate(tasks):
        groups.setdefault(task.y.shape, []).append(i)

    def build(params) -> nx.Tensor:
        total = None
        for idx in groups.values():
            x = np.stack([tasks[i].x for i in idx])
            y0 = np.stack([tasks[i].y for i in idx])
            x_a = align(x, model.alignment, y0.shape[-1])
            t = np.array([draws[i][0] for i in idx])
            eps = np.stack([draws[i][1] for i in idx])
            y_t = q_marginal_sample(y0, x_a, t, eps, model.schedule)
            eps_hat = model.predict(x, y_t, t, params)
            diff = nx.sub(eps_hat, eps.astype(model.dtype))
            part = nx.reduce_sum(_point_loss(diff, loss_kind))
            # every task in the group has the same point count, so per-task means share a divisor
            part = nx.scale(part, 1.0 / (len(tasks) * diff.value[0].size))
            total = part if total is None else nx.add(total, part)
        return total

    if not with_grad:
        return float(build(model.params).value), {}
    with nx.Tape() as tape:
        watched = tape.watch(model.params)
        loss = build(watched)
        if loss.tape is None:
            # the denoiser ignored its parameters (e.g. a stub); nothing to differentiate
            return float(loss.value), {k: np.zeros_like(v) for k, v in model.params.items()}
        grads = tape.backward(loss)
    return float(loss.value), grads


# -- sampling ----------------------------------------------------------------------


def initial_state(xa_target: np.ndarray, schedule: NoiseSchedule, init: str, rng: np.random.Generator, n_samples: int):
    """Starting point of the reverse chain: endpoint mean plus standard-normal noise, (S, N_T, D_y)."""
    endpoint = schedule.gamma_bar[schedule.T] if init == "gamma_bar" else schedule.gamma[schedule.T]
    return endpoint * xa_target + rng.standard_normal((n_samples,) + xa_target.shape)


def conditional_sample(
    x_context: np.ndarray,
    y_context: np.ndarray,
    x_target: np.ndarray,
    model: DiffusionModel,
    sampler: SamplerConfig,
    n_samples: int = 1,
    d_y: int | None = None,
) -> np.ndarray | tuple[np.ndarray, list[np.ndarray]]:
    """Draw ``n_samples`` joint samples of the target outputs, shape (S, N_T, D_y).

    Random draws are taken from ``default_rng(sampler.seed)`` in this order:
    the target initialization noise; then for each t = T..1 and each repeat,
    the context noise, the reverse-step noise (skipped when its variance is 0)
    and, between repeats, the forward re-noising of the target block.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    if x_target.ndim != 2 or x_target.shape[0] == 0:
        raise ValueError("need at least one target point, x_target of shape (N_T, D_x)")
    x_context = np.asarray(x_context, dtype=np.float64).reshape(-1, x_target.shape[1])
    n_c = x_context.shape[0]
    if d_y is None:
        if y_context is None or np.size(y_context) == 0:
            raise ValueError("d_y is required when there is no context")
        d_y = np.asarray(y_context).reshape(n_c, -1).shape[1]
    y_context = np.asarray(y_context, dtype=np.float64).reshape(n_c, d_y)
    sched = model.schedule
    T = sched.T
    S = n_samples
    rng = np.random.default_rng(sampler.seed)

    x_all = np.concatenate([x_target, x_context], axis=0)
    n_t = x_target.shape[0]
    xa_all = align(x_all, model.alignment, d_y)
    xa_t, xa_c = xa_all[:n_t], xa_all[n_t:]
    x_batch = np.broadcast_to(x_all, (S,) + x_all.shape)

    y_tgt = initial_state(xa_t, sched, sampler.init, rng, S)
    trajectory = [y_tgt.copy()] if sampler.record_trajectory else None

    for t in range(T, 0, -1):
        sqrt_ab = np.sqrt(sched.alpha_bar[t])
        sd_ctx = np.sqrt(sched.one_minus_alpha_bar[t])
        var = sched.beta_tilde[t]
        t_batch = np.full(S, t)
        for j in range(sampler.repaint_repeats):
            y_ctx = sqrt_ab * y_context + sched.gamma_bar[t] * xa_c + sd_ctx * rng.standard_normal((S, n_c, d_y))
            y_all = np.concatenate([y_tgt, y_ctx], axis=1)
            eps_hat = model.predict(x_batch, y_all, t_batch).value.astype(np.float64)
            mean = reverse_mean(y_all[:, :n_t], xa_t, t, eps_hat[:, :n_t], sched)
            if var > 0:
                y_prev = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
            else:
                y_prev = mean
            if j < sampler.repaint_repeats - 1:
                y_tgt = q_step(y_prev, xa_t, t, rng.standard_normal(y_prev.shape), sched)
            else:
                y_tgt = y_prev
        if trajectory is not None:
            trajectory.append(y_tgt.copy())
    if trajectory is not None:
        return y_tgt, trajectory
    return y_tgt


def unconditional_sample(x: np.ndarray, model: DiffusionModel, sampler: SamplerConfig, n_samples: int = 1, d_y: int = 1):
    x = np.asarray(x, dtype=np.float64)
    return conditional_sample(
        np.zeros((0, x.shape[1])), np.zeros((0, d_y)), x, model, sampler, n_samples=n_samples, d_y=d_y
    )
