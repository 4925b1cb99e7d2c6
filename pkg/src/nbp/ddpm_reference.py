"""Plain DDPM written out directly, with no bridge terms anywhere.

Kept deliberately separate from :mod:`nbp.diffusion` and :mod:`nbp.schedule`:
it derives its own cumulative products from the raw betas and walks the
reverse chain with its own loop.  A bridge-disabled model must agree with it.
The random draws follow the same documented order as the main sampler and
training loss so the two can be compared on a shared seed.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

EpsFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class DDPMReference:
    def __init__(self, betas: Sequence[float]):
        self.betas = [float(b) for b in betas]
        self.T = len(self.betas)
        self.alpha_bars = [1.0]
        for b in self.betas:
            self.alpha_bars.append(self.alpha_bars[-1] * (1.0 - b))

    def beta(self, t: int) -> float:
        return self.betas[t - 1]

    def q_step(self, y_prev, t: int, eps):
        b = self.beta(t)
        return math.sqrt(1.0 - b) * np.asarray(y_prev, float) + math.sqrt(b) * np.asarray(eps, float)

    def q_marginal(self, y0, t: int, eps):
        ab = self.alpha_bars[t]
        return math.sqrt(ab) * np.asarray(y0, float) + math.sqrt(1.0 - ab) * np.asarray(eps, float)

    def reverse_mean(self, y_t, t: int, eps_hat):
        b = self.beta(t)
        ab = self.alpha_bars[t]
        return (np.asarray(y_t, float) - b / math.sqrt(1.0 - ab) * np.asarray(eps_hat, float)) / math.sqrt(1.0 - b)

    def posterior_variance(self, t: int) -> float:
        return self.beta(t) * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])

    def training_loss(self, ys: Sequence[np.ndarray], xs: Sequence[np.ndarray], eps_fn: EpsFn, rng, loss_kind="l2") -> float:
        """Mean over tasks of the mean pointwise loss; one task per denoiser call."""
        draws = [(int(rng.integers(1, self.T + 1)), rng.standard_normal(np.shape(y))) for y in ys]
        total = 0.0
        for y, x, (t, eps) in zip(ys, xs, draws):
            y_t = self.q_marginal(y, t, eps)
            eps_hat = np.asarray(eps_fn(x[None], y_t[None], np.array([t]))[0], float)
            d = eps_hat - eps
            total += float(np.mean(d * d if loss_kind == "l2" else np.abs(d)))
        return total / len(ys)

    def conditional_sample(self, x_c, y_c, x_t, eps_fn: EpsFn, repeats: int, seed: int, n_samples: int):
        rng = np.random.default_rng(seed)
        x_t = np.asarray(x_t, float)
        x_c = np.asarray(x_c, float).reshape(-1, x_t.shape[1])
        y_c = np.asarray(y_c, float).reshape(len(x_c), -1)
        d_y = y_c.shape[1]
        n_t, n_c = len(x_t), len(x_c)
        x_all = np.broadcast_to(np.concatenate([x_t, x_c]), (n_samples, n_t + n_c, x_t.shape[1]))
        y = rng.standard_normal((n_samples, n_t, d_y))
        for t in range(self.T, 0, -1):
            ab = self.alpha_bars[t]
            var = self.posterior_variance(t)
            for j in range(repeats):
                noisy_c = math.sqrt(ab) * y_c + math.sqrt(1.0 - ab) * rng.standard_normal((n_samples, n_c, d_y))
                joint = np.concatenate([y, noisy_c], axis=1)
                eps_hat = np.asarray(eps_fn(x_all, joint, np.full(n_samples, t)), float)
                mean = self.reverse_mean(y, t, eps_hat[:, :n_t])
                y = mean + math.sqrt(var) * rng.standard_normal(mean.shape) if var > 0 else mean
                if j < repeats - 1:
                    y = self.q_step(y, t, rng.standard_normal(y.shape))
        return y
