"""Bi-dimensional attention noise model.

Inputs are batched: ``x`` is (B, N, D_x), ``y_t`` is (B, N, D_y) and ``t`` is
(B,).  Each (n, d) cell of the grid embeds the pair ``(x[n, d], y_t[n, d])``
(or ``y_t[n, 0]`` when ``D_y == 1``), giving a (B, N, D, H) latent grid.

Each block normalizes the grid, attends along the point axis N and the
feature axis D separately, sums the two, and applies a ReLU.  That skip
signal is accumulated across blocks and also fed back into the residual
stream through a per-block feedforward map.  The accumulated skips are
averaged over D, concatenated back onto every cell, and a small per-cell MLP
produces the noise estimate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx

Params = Mapping[str, "np.ndarray | nx.Tensor"]


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 8
    t_embed_dim: int = 64

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be a positive multiple of heads ({self.heads})")
        if self.t_embed_dim < 2 or self.t_embed_dim % 2:
            raise ValueError("t_embed_dim must be an even integer >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


_ATTN = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (2, H),
        "embed.b": (H,),
        "time.w": (cfg.t_embed_dim, H),
        "time.b": (H,),
    }
    for layer in range(cfg.layers):
        for axis in ("n", "d"):
            for name in _ATTN:
                shapes[f"block{layer}.attn_{axis}.{name}"] = (H, H) if name[0] == "w" else (H,)
        shapes[f"block{layer}.ff.w"] = (H, H)
        shapes[f"block{layer}.ff.b"] = (H,)
    shapes["head.w1"] = (2 * H, H)
    shapes["head.b1"] = (H,)
    shapes["head.w2"] = (H, 1)
    shapes["head.b2"] = (1,)
    return shapes


def init_params(cfg: DenoiserConfig, seed: int, dtype=np.float32, zero_head: bool = True) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, and (by default) a zero final head layer."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        elif zero_head and name == "head.w2":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features with geometric frequencies from 1 down to 1e-4."""
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1))
    angles = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(dtype)


def _cell_features(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    B, N, Dx = x.shape
    if y.shape[:2] != (B, N):
        raise ValueError(f"x {x.shape} and y {y.shape} disagree on batch/point axes")
    Dy = y.shape[2]
    if Dy == Dx:
        yy = y
    elif Dy == 1:
        yy = np.broadcast_to(y, (B, N, Dx))
    else:
        raise ValueError(f"output dimension {Dy} must equal the input dimension {Dx} or be 1")
    return np.stack([x, yy], axis=-1)


def preprocess(x, y_t, t, cfg: DenoiserConfig, params: Params) -> nx.Tensor:
    """Embed every (point, feature) cell and add the projected timestep embedding."""
    x = np.asarray(x)
    y_t = np.asarray(y_t)
    dtype = getattr(params["embed.w"], "value", params["embed.w"]).dtype
    feats = _cell_features(x, y_t).astype(dtype, copy=False)
    B, N, D, _ = feats.shape
    H = cfg.hidden
    s = nx.linear(feats, params["embed.w"], params["embed.b"])
    temb = timestep_embedding(np.asarray(t).reshape(B), cfg.t_embed_dim, dtype)
    tproj = nx.linear(temb, params["time.w"], params["time.b"])
    tgrid = nx.broadcast_to(nx.reshape(tproj, (B, 1, 1, H)), (B, N, D, H))
    return nx.add(s, tgrid)


def _mhsa(z: nx.Tensor, params: Params, prefix: str, heads: int, axis: int) -> nx.Tensor:
    """Multi-head self-attention along ``axis`` (1 = points, 2 = features) of a (B, N, D, H) grid."""
    B, N, D, H = z.shape
    L = z.shape[axis]
    w = lambda name: params[prefix + name]  # noqa: E731
    if L == 1:
        # softmax over a single key is exactly 1, so the block is value then output projection
        w_vo = nx.matmul(w("wv"), w("wo"))
        b_vo = nx.add(nx.reshape(nx.linear(nx.reshape(w("bv"), (1, H)), w("wo")), (H,)), w("bo"))
        return nx.linear(z, w_vo, b_vo)
    dh = H // heads
    # (B, N, D, heads, dh) -> (B, other, heads, L, dh)
    perm = (0, 2, 3, 1, 4) if axis == 1 else (0, 1, 3, 2, 4)
    inverse = tuple(int(i) for i in np.argsort(perm))

    def split_heads(a):
        return nx.transpose(nx.reshape(a, (B, N, D, heads, dh)), perm)

    q = split_heads(nx.scale(nx.linear(z, w("wq"), w("bq")), 1.0 / math.sqrt(dh)))
    k = split_heads(nx.linear(z, w("wk"), w("bk")))
    v = split_heads(nx.linear(z, w("wv"), w("bv")))
    swap = (0, 1, 2, 4, 3)
    # scores laid out as (key, query): normalizing over the strided key axis is much
    # cheaper in numpy than reducing along a short contiguous axis
    scores_kq = nx.matmul(k, nx.transpose(q, swap))
    att = nx.transpose(nx.softmax(scores_kq, axis=-2), swap)
    out = nx.transpose(nx.matmul(att, v), inverse)
    return nx.linear(nx.reshape(out, (B, N, D, H)), w("wo"), w("bo"))


def bi_block(s: nx.Tensor, params: Params, layer: int, cfg: DenoiserConfig) -> tuple[nx.Tensor, nx.Tensor]:
    """One bi-dimensional attention block on a (B, N, D, H) grid.

    Returns ``(s_next, skip)`` where ``skip = relu(MHSA_N(z) + MHSA_D(z))`` on
    the normalized grid ``z`` and ``s_next = s + ff(skip)``.
    """
    p = f"block{layer}."
    z = nx.layer_norm(s, axis=-1)
    att_n = _mhsa(z, params, p + "attn_n.", cfg.heads, axis=1)
    att_d = _mhsa(z, params, p + "attn_d.", cfg.heads, axis=2)
    skip = nx.relu(nx.add(att_n, att_d))
    s_next = nx.add(s, nx.linear(skip, params[p + "ff.w"], params[p + "ff.b"]))
    return s_next, skip


def predict_noise(x, y_t, t, cfg: DenoiserConfig, params: Params) -> nx.Tensor:
    """Noise estimate with the same shape as ``y_t``."""
    x = np.asarray(x)
    y_t = np.asarray(y_t)
    if x.ndim != 3 or y_t.ndim != 3:
        raise ValueError("expected batched inputs: x (B, N, D_x) and y_t (B, N, D_y)")
    B, N, D = x.shape
    H = cfg.hidden
    s = preprocess(x, y_t, t, cfg, params)
    acc = None
    for layer in range(cfg.layers):
        s, skip = bi_block(s, params, layer, cfg)
        acc = skip if acc is None else nx.add(acc, skip)
    pooled = nx.reduce_mean(acc, axis=2)
    pooled = nx.broadcast_to(nx.reshape(pooled, (B, N, 1, H)), (B, N, D, H))
    h = nx.concat([pooled, acc], axis=-1)
    h = nx.relu(nx.linear(h, params["head.w1"], params["head.b1"]))
    out = nx.reshape(nx.linear(h, params["head.w2"], params["head.b2"]), (B, N, D))
    if y_t.shape[2] == D:
        return out
    return nx.reshape(nx.reduce_mean(out, axis=2), (B, N, 1))
