"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a closure that maps the output adjoint to the input
adjoints; ``Tensor.backward`` walks the graph in reverse topological order.
The engine also carries the binary cross-entropy loss, an Adam optimizer over
a named parameter store, and a seedable random stream factory.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "NonFiniteError",
    "EmptyBatch",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "gelu",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "concat",
    "stack",
    "mean_pool",
    "getitem",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "blend",
    "embedding_lookup",
    "linear",
    "bce_loss",
    "ParamStore",
    "adam_step",
    "Rng",
    "glorot_uniform",
]

CHECKPOINT_VERSION = "climacredit-params/1"

_GRAD_ENABLED = True


class ShapeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class EmptyBatch(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("implicit backward needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"seed gradient {grad.shape} != output {self.shape}")

        order = _topological_order(self)
        adjoints = {id(self): grad}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = adjoints.get(key)
                adjoints[key] = pg if prev is None else prev + pg


def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def blend(a, b, m) -> Tensor:
    """``a * m + b * (1 - m)``; ``m`` may be a constant array (e.g. a padding mask)."""
    a, b, m = _as_tensor(a), _as_tensor(b), _as_tensor(m)
    ad, bd, md = a.data, b.data, m.data
    out = bd + md * (ad - bd)

    def backward(g):
        return (
            _unbroadcast(g * md, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * (1.0 - md), bd.shape) if b.requires_grad else None,
            _unbroadcast(g * (ad - bd), md.shape) if m.requires_grad else None,
        )

    return _result(out, (a, b, m), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-form GELU; smooth everywhere, which keeps finite-difference checks clean."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _result(out, (x,), lambda g: (g / xd,))


# -- linear algebra and structure ------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch("matmul needs operands with at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(out, tuple(tensors), backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx) -> Tensor:
    x = _as_tensor(x)
    out = x.data[idx]
    shape = x.shape
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _result(out, (x,), lambda g: (g.reshape(original),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def mean_pool(x, mask=None, axis: int = 1) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is true.

    Rows with no valid position pool to zero.
    """
    x = _as_tensor(x)
    if mask is None:
        return tmean(x, axis=axis)
    m = np.asarray(mask, dtype=np.float64)
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    counts = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    weights = np.broadcast_to(m / counts, x.shape)
    out = (x.data * weights).sum(axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _result(out, (x,), backward)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is false get exactly zero mass."""
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-9) -> Tensor:
    """Normalise the last axis to zero mean and unit (population) variance."""
    x = _as_tensor(x)
    parents = [x]
    gain_t = _as_tensor(gain) if gain is not None else None
    bias_t = _as_tensor(bias) if bias is not None else None
    if gain_t is not None:
        parents.append(gain_t)
    if bias_t is not None:
        parents.append(bias_t)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat
    if gain_t is not None:
        out = out * gain_t.data
    if bias_t is not None:
        out = out + bias_t.data
    reduce_axes = tuple(range(xd.ndim - 1))

    def backward(g):
        gxhat = g * gain_t.data if gain_t is not None else g
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gain_t is not None:
            grads.append((g * xhat).sum(axis=reduce_axes).reshape(gain_t.shape))
        if bias_t is not None:
            grads.append(g.sum(axis=reduce_axes).reshape(bias_t.shape))
        return tuple(grads)

    return _result(out, tuple(parents), backward)


def embedding_lookup(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch("embedding id out of range")
    out = table.data[ids]
    rows, dim = table.shape

    def backward(g):
        full = np.zeros((rows, dim))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, dim))
        return (full,)

    return _result(out, (table,), backward)


# -- loss -------------------------------------------------------------------


def bce_loss(predictions, labels, eps: float = 1e-7, pos_weight: float | None = None) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [eps, 1 - eps].

    ``pos_weight`` optionally scales the positive-class term.
    """
    p = _as_tensor(predictions)
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    n = p.data.size
    if n == 0:
        raise EmptyBatch("bce_loss on an empty batch")
    w_pos = 1.0 if pos_weight is None else float(pos_weight)
    pc = np.clip(p.data, eps, 1.0 - eps)
    terms = w_pos * y * np.log(pc) + (1.0 - y) * np.log1p(-pc)
    loss = np.asarray(-terms.sum() / n)
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        dp = -(w_pos * y / pc - (1.0 - y) / (1.0 - pc)) / n
        return (g * dp * inside,)

    return _result(loss, (p,), backward)


# -- parameters and optimisation -------------------------------------------


class ParamStore:
    """Named parameters plus Adam moment buffers and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.frozen: set[str] = set()

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            self.frozen.add(n)
            self.params[n].requires_grad = False

    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[n].data.size for n in names))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for n, arr in values.items():
            if self.params[n].data.shape != arr.shape:
                raise ShapeMismatch(f"{n}: {arr.shape} != {self.params[n].data.shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def digest(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params if names is None else names):
            arr = np.ascontiguousarray(self.params[n].data)
            h.update(n.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "params": [
                {"name": n, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                for n, t in self.params.items()
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ParamStore":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        store = cls()
        for entry in doc["params"]:
            store.add(entry["name"], np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        return store

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def adam_step(
    store: ParamStore,
    lr: float,
    gradients: dict[str, np.ndarray] | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update of every non-frozen parameter, in place.

    Gradients default to each parameter's accumulated ``grad``; a missing
    gradient counts as zero. Any non-finite gradient aborts before mutation.
    """
    names = store.trainable()
    grads = {}
    for n in names:
        g = gradients.get(n) if gradients is not None else store.params[n].grad
        g = np.zeros_like(store.params[n].data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != store.params[n].data.shape:
            raise ShapeMismatch(f"gradient for {n} has shape {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {n}")
        grads[n] = g
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for n, g in grads.items():
        m = store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        v = store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * g * g
        store.params[n].data = store.params[n].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# -- randomness ---------------------------------------------------------------


class Rng:
    """Seed plus named substreams: (seed, name) always yields the same sequence."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, name: str) -> np.random.Generator:
        key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))

    def child(self, name: str) -> "Rng":
        return Rng(int(self.stream(name).integers(0, 2**63 - 1)))


def glorot_uniform(gen: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))
