"""Dense arrays with reverse-mode differentiation.

Values are plain numpy arrays.  Operations return :class:`Tensor` objects;
when a :class:`Tape` is active and at least one operand is tracked, the op
also records a backward rule.  The tape keeps nodes in creation order, which
is a valid topological order, so :func:`backward` is a single reverse sweep.

Broadcasting is deliberately narrow: elementwise ops need identical shapes,
``matmul`` broadcasts a 2-D right operand over leading batch axes, and
``linear`` adds a bias over leading axes.  Anything else goes through an
explicit ``broadcast_to``.

Every arithmetic op checks its result for NaN/Inf and raises
:class:`NonFiniteError`; purely structural ops (reshape, transpose, relu,
broadcast, concat, gather) cannot create non-finite values from finite
inputs and skip the check.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "scale",
    "mul",
    "matmul",
    "linear",
    "relu",
    "softmax",
    "layer_norm",
    "transpose",
    "reshape",
    "broadcast_to",
    "reduce_mean",
    "reduce_sum",
    "concat",
    "gather_rows",
    "square",
    "absolute",
    "numerical_gradient",
    "relative_error",
]


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "tape")

    def __init__(self, value, parents=(), backward_fn=None, tape=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, tracked={self.tracked})"


_ACTIVE: list["Tape"] = []


class Tape:
    """Records operations for one backward pass.  Single owner, not thread-safe."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Register named leaf arrays whose gradients :func:`backward` will return."""
        out = {}
        for name, value in params.items():
            leaf = Tensor(np.asarray(value), tape=self)
            self.params[name] = leaf
            out[name] = leaf
        return out

    def _record(self, value, parents, backward_fn) -> Tensor:
        node = Tensor(value, parents, backward_fn, self)
        self.nodes.append(node)
        return node

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every watched parameter."""
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise ValueError("loss must be a scalar Tensor")
    if loss.tape is not tape:
        raise ValueError("loss was not produced under this tape (detached from the parameters)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not isinstance(parent, Tensor) or parent.tape is not tape:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {
        name: grads.get(id(leaf), np.zeros_like(leaf.value)).reshape(leaf.value.shape)
        for name, leaf in tape.params.items()
    }


def _val(a):
    return a.value if isinstance(a, Tensor) else np.asarray(a)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if _ACTIVE and a.tape is _ACTIVE[-1]:
                return a.tape
    return None


def _emit(value, parents: Sequence, backward_fn: Callable, check: bool = True) -> Tensor:
    # a sum over finite values is finite unless it overflows, which is also a failure worth raising
    if check and not np.isfinite(np.add.reduce(value, axis=None)):
        raise NonFiniteError("operation produced a non-finite value")
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape._record(value, tuple(parents), backward_fn)


def _check_same(a, b, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} does not exist for a {ndim}-d array")
    return axis % ndim


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    _check_same(va, vb, "add")
    return _emit(va + vb, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    _check_same(va, vb, "sub")
    return _emit(va - vb, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Tensor:
    va = _val(a)
    return _emit(va * va.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def mul(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    _check_same(va, vb, "mul")
    return _emit(va * vb, (a, b), lambda g: (g * vb, g * va))


def square(a) -> Tensor:
    va = _val(a)
    return _emit(va * va, (a,), lambda g: (2 * g * va,))


def absolute(a) -> Tensor:
    va = _val(a)
    return _emit(np.abs(va), (a,), lambda g: (g * np.sign(va),))


def relu(a) -> Tensor:
    va = _val(a)
    mask = va > 0
    return _emit(np.where(mask, va, 0).astype(va.dtype, copy=False), (a,), lambda g: (g * mask,), check=False)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with either equal leading batch axes or a shared 2-D ``b``."""
    va, vb = _val(a), _val(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-d")
    if va.shape[-1] != vb.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ {va.shape} @ {vb.shape}")
    shared = vb.ndim == 2
    if not shared and va.shape[:-2] != vb.shape[:-2]:
        raise ValueError(f"matmul: batch axes differ {va.shape[:-2]} vs {vb.shape[:-2]}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(vb, -1, -2))
        if shared:
            gb = va.reshape(-1, va.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(va, -1, -2), g)
        return ga, gb

    return _emit(np.matmul(va, vb), (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out), ``b`` is (out,)."""
    vx, vw = _val(x), _val(w)
    if vw.ndim != 2 or vx.shape[-1] != vw.shape[0]:
        raise ValueError(f"linear: cannot apply weight {vw.shape} to input {vx.shape}")
    flat = vx.reshape(-1, vx.shape[-1])
    out = flat @ vw
    if b is not None:
        vb = _val(b)
        if vb.shape != (vw.shape[1],):
            raise ValueError(f"linear: bias shape {vb.shape} does not match output width {vw.shape[1]}")
        out = out + vb
    out = out.reshape(vx.shape[:-1] + (vw.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ vw.T).reshape(vx.shape)
        gw = flat.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, parents, bw)


# -- normalizations -----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    va = _val(a)
    axis = _axis(axis, va.ndim, "softmax")
    e = va - va.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (e * (g - (g * e).sum(axis=axis, keepdims=True)),)

    return _emit(e, (a,), bw)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization over ``axis`` (no affine part)."""
    va = _val(a)
    axis = _axis(axis, va.ndim, "layer_norm")
    mu = va.mean(axis=axis, keepdims=True)
    xc = va - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + va.dtype.type(eps))
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit(xhat, (a,), bw)


# -- shape manipulation -----------------------------------------------------------


def transpose(a, axes: Sequence[int]) -> Tensor:
    va = _val(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(va, axes), (a,), lambda g: (np.transpose(g, inverse),), check=False)


def reshape(a, shape: Sequence[int]) -> Tensor:
    va = _val(a)
    return _emit(va.reshape(tuple(shape)), (a,), lambda g: (g.reshape(va.shape),), check=False)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; ``a`` must have the same rank with size-1 axes to expand."""
    va = _val(a)
    shape = tuple(shape)
    if va.ndim != len(shape) or any(s != d and s != 1 for s, d in zip(va.shape, shape)):
        raise ValueError(f"broadcast_to: cannot expand {va.shape} to {shape}")
    expanded = tuple(i for i, (s, d) in enumerate(zip(va.shape, shape)) if s == 1 and d != 1)
    return _emit(
        np.broadcast_to(va, shape),
        (a,),
        lambda g: (g.sum(axis=expanded, keepdims=True),),
        check=False,
    )


def reduce_sum(a, axis=None) -> Tensor:
    va = _val(a)
    if axis is None:
        return _emit(va.sum(), (a,), lambda g: (np.broadcast_to(g, va.shape),))
    axis = _axis(axis, va.ndim, "reduce_sum")
    return _emit(
        va.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), va.shape),),
    )


def reduce_mean(a, axis=None) -> Tensor:
    va = _val(a)
    n = va.size if axis is None else va.shape[_axis(axis, va.ndim, "reduce_mean")]
    return scale(reduce_sum(a, axis), 1.0 / n)


def concat(arrays: Sequence, axis: int = -1) -> Tensor:
    vals = [_val(a) for a in arrays]
    axis = _axis(axis, vals[0].ndim, "concat")
    for v in vals[1:]:
        if v.ndim != vals[0].ndim or any(
            i != axis and s != r for i, (s, r) in enumerate(zip(v.shape, vals[0].shape))
        ):
            raise ValueError("concat: shape mismatch off the concatenation axis")
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit(
        np.concatenate(vals, axis=axis),
        tuple(arrays),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        check=False,
    )


def gather_rows(a, index: Iterable[int]) -> Tensor:
    """Select rows (axis 0); repeated indices accumulate gradient."""
    va = _val(a)
    idx = np.asarray(list(index) if not isinstance(index, np.ndarray) else index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(va)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(va[idx], (a,), bw, check=False)


# -- finite-difference oracle ------------------------------------------------------


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |x_i|)`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), taken over the whole array."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / denom

