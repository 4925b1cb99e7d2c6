"""Per-timestep coefficients of the input-anchored (bridge) diffusion.

All arrays have length ``T + 1`` and are indexed directly by the timestep
``t``.  Index 0 holds the boundary values (``alpha_bar[0] = 1``,
``gamma_bar[0] = 0``); per-step quantities such as ``beta`` carry a neutral
placeholder there (``beta[0] = 0``, ``gamma[0] = 0``).

Everything is computed in float64: with ``beta_end = 0.5`` the cumulative
product ``alpha_bar[T]`` is of order 1e-65, far below float32 range.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

SCHEDULE_KINDS = ("cosine", "linear")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    T: int = 500
    beta_start: float = 3e-4
    beta_end: float = 0.5

    def validate(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got beta_start={self.beta_start}, beta_end={self.beta_end}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable table of diffusion coefficients for t = 0..T."""

    config: ScheduleConfig
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    one_minus_alpha_bar: np.ndarray
    snr: np.ndarray
    gamma: np.ndarray
    gamma_bar: np.ndarray
    beta_tilde: np.ndarray
    c_bridge: np.ndarray
    bridge: bool = True

    @property
    def T(self) -> int:
        return self.config.T

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t!r}")

    def without_bridge(self) -> "NoiseSchedule":
        """The ablation schedule: gamma, gamma_bar and the correction forced to zero."""
        zeros = np.zeros_like(self.gamma)
        return replace(self, gamma=zeros, gamma_bar=zeros.copy(), c_bridge=zeros.copy(), bridge=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "beta", "alpha_bar", "snr", "gamma", "gamma_bar", "beta_tilde", "c_bridge"])
        for t in range(1, self.T + 1):
            writer.writerow(
                [t]
                + [
                    repr(float(a[t]))
                    for a in (
                        self.beta,
                        self.alpha_bar,
                        self.snr,
                        self.gamma,
                        self.gamma_bar,
                        self.beta_tilde,
                        self.c_bridge,
                    )
                ]
            )
        return buf.getvalue()


def beta_ramp(config: ScheduleConfig) -> np.ndarray:
    """beta_1..beta_T hitting ``beta_start`` and ``beta_end`` exactly at the ends."""
    T = config.T
    if T == 1:
        return np.array([config.beta_start], dtype=np.float64)
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    if config.kind == "cosine":
        ramp = 0.5 * (1.0 - np.cos(np.pi * frac))
    else:
        ramp = frac
    betas = config.beta_start + (config.beta_end - config.beta_start) * ramp
    betas[0], betas[-1] = config.beta_start, config.beta_end
    return betas


def gamma_bar_direct(alpha_bar: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Cumulative bridge coefficient by the explicit sum over s <= t.

    Independent of the recurrence used in :func:`build_schedule`; O(T^2).
    """
    T = len(alpha_bar) - 1
    out = np.zeros(T + 1)
    for t in range(1, T + 1):
        s = np.arange(1, t + 1)
        out[t] = np.sum(gamma[s] * np.sqrt(alpha_bar[t] / alpha_bar[s]))
    return out


def build_schedule(config: ScheduleConfig, bridge: bool = True) -> NoiseSchedule:
    config.validate()
    T = config.T
    beta = np.zeros(T + 1)
    beta[1:] = beta_ramp(config)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha[0] = 1 so alpha_bar[0] = 1
    # 1 - alpha_bar loses most of its digits to cancellation when the betas are tiny
    one_minus = -np.expm1(np.cumsum(np.log1p(-beta)))

    snr = np.full(T + 1, np.inf)
    snr[1:] = alpha_bar[1:] / one_minus[1:]

    gamma = np.zeros(T + 1)
    gamma[1:] = snr[T] / snr[1:]
    gamma[T] = 1.0

    gamma_bar = np.zeros(T + 1)
    sqrt_alpha = np.sqrt(alpha)
    for t in range(1, T + 1):
        gamma_bar[t] = gamma[t] + sqrt_alpha[t] * gamma_bar[t - 1]

    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = beta[1:] * one_minus[:-1] / one_minus[1:]

    c_bridge = np.zeros(T + 1)
    c_bridge[1:] = -gamma[1:] / sqrt_alpha[1:]

    sched = NoiseSchedule(
        config=config,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        one_minus_alpha_bar=one_minus,
        snr=snr,
        gamma=gamma,
        gamma_bar=gamma_bar,
        beta_tilde=beta_tilde,
        c_bridge=c_bridge,
    )
    for arr in (beta, alpha, alpha_bar, one_minus, snr, gamma, gamma_bar, beta_tilde, c_bridge):
        arr.setflags(write=False)

    direct = gamma_bar_direct(alpha_bar, gamma)
    residual = float(np.max(np.abs(direct - gamma_bar)))
    if residual > 1e-12 * max(1.0, float(np.max(np.abs(gamma_bar)))):
        raise ArithmeticError(f"gamma_bar recurrence disagrees with direct sum (residual {residual:.3e})")

    return sched if bridge else sched.without_bridge()


def bridge_correction_coeff(s: NoiseSchedule, t: int) -> float:
    """Coefficient of x in the reverse mean, -gamma_t / sqrt(1 - beta_t)."""
    s.check_t(t)
    return float(-s.gamma[t] / math.sqrt(1.0 - s.beta[t]))


def bridge_correction_coeff_unsimplified(s: NoiseSchedule, t: int) -> float:
    """The same coefficient before collapsing the posterior-variance factor."""
    s.check_t(t)
    b, om, om_prev = s.beta[t], s.one_minus_alpha_bar[t], s.one_minus_alpha_bar[t - 1]
    return float(-(b + (1.0 - b) * om_prev) * s.gamma[t] / (math.sqrt(1.0 - b) * om))


def snr_form_coeff(s: NoiseSchedule, t: int) -> float:
    """The correction written directly through the cumulative products."""
    s.check_t(t)
    if not s.bridge:
        return 0.0
    T = s.T
    ab, abT = s.alpha_bar[t], s.alpha_bar[T]
    om, omT = s.one_minus_alpha_bar[t], s.one_minus_alpha_bar[T]
    return float(-(1.0 / math.sqrt(1.0 - s.beta[t])) * (abT * om) / (ab * omT))
