"""Dense float64 tensors with reverse-mode gradients.

A global tape records ops in creation order (a valid topological order);
`backward` walks it once in reverse from a scalar loss and then clears it.
Broadcasting follows numpy semantics with gradients reduced back to the input
shape; only leading-dimension batch use is relied on elsewhere.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ShapeError

_TAPE: list["Tensor"] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _record(out: Tensor, parents: tuple[Tensor, ...], bwd) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
        _TAPE.append(out)
    return out


def _accum(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += grad


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d theta into every reachable gradient buffer.

    The loss must be scalar. The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    reachable = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable.add(id(node))
        stack.extend(node._parents)
    _accum(loss, np.ones_like(loss.values))
    for node in reversed(_TAPE):
        if id(node) in reachable and node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
    clear_tape()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)

    def bwd(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)
    return _record(out, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values + b.values)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values - b.values)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values * b.values)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.values, a.shape))
        _accum(b, _unbroadcast(g * a.values, b.shape))
    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.values * c)

    def bwd(g):
        _accum(a, g * c)
    return _record(out, (a,), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(t, g[tuple(idx)])
    return _record(out, tuple(tensors), bwd)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.values.T)

    def bwd(g):
        _accum(a, g.T)
    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.values.reshape(shape))

    def bwd(g):
        _accum(a, g.reshape(a.shape))
    return _record(out, (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.values[start:stop])

    def bwd(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        _accum(a, full)
    return _record(out, (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather; also the embedding lookup (scatter-add on backward)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.values[idx])

    def bwd(g):
        flat = g.reshape(len(idx), -1)
        _accum(a, kernels.segment_sum(flat, idx, a.shape[0]).reshape(a.shape))
    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    v = np.where(a.values >= 0, 1.0 / (1.0 + np.exp(-a.values)),
                 np.exp(a.values) / (1.0 + np.exp(a.values)))
    out = Tensor(v)

    def bwd(g):
        _accum(a, g * v * (1.0 - v))
    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))

    def bwd(g):
        _accum(a, g * (a.values > 0))
    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    v = np.tanh(a.values)
    out = Tensor(v)

    def bwd(g):
        _accum(a, g * (1.0 - v * v))
    return _record(out, (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.values.mean(axis=axis))
    denom = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.full_like(a.values, g / denom))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) / denom,
                                      a.shape).copy())
    return _record(out, (a,), bwd)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.values.sum(axis=axis))

    def bwd(g):
        if axis is None:
            _accum(a, np.full_like(a.values, g))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())
    return _record(out, (a,), bwd)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    m = a.values.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.values - m)
    s = e.sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(np.log(s) + m, axis=axis))

    def bwd(g):
        _accum(a, np.expand_dims(g, axis) * (e / s))
    return _record(out, (a,), bwd)


def sumsq(a: Tensor, axis: int | None = None) -> Tensor:
    """Squared L2 norm over `axis` (all elements when None)."""
    out = Tensor((a.values ** 2).sum(axis=axis))

    def bwd(g):
        if axis is None:
            _accum(a, 2.0 * a.values * g)
        else:
            _accum(a, 2.0 * a.values * np.expand_dims(g, axis))
    return _record(out, (a,), bwd)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: evaluation is the identity."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    out = Tensor(a.values * keep)

    def bwd(g):
        _accum(a, g * keep)
    return _record(out, (a,), bwd)


def segment_mean(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Per-bucket mean of rows; empty buckets yield zero rows."""
    segments = np.asarray(segments, dtype=np.int64)
    means, counts = kernels.segment_mean(a.values, segments, num_segments)
    out = Tensor(means)
    inv = 1.0 / np.maximum(counts, 1)

    def bwd(g):
        _accum(a, (g * inv[:, None])[segments])
    return _record(out, (a,), bwd)


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    out = Tensor(kernels.segment_sum(a.values, segments, num_segments))

    def bwd(g):
        _accum(a, g[segments])
    return _record(out, (a,), bwd)


def segment_max(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    values, argmax = kernels.segment_max(a.values, segments, num_segments)
    out = Tensor(values)

    def bwd(g):
        full = np.zeros_like(a.values)
        seg_idx, col_idx = np.nonzero(argmax >= 0)
        full[argmax[seg_idx, col_idx], col_idx] += g[seg_idx, col_idx]
        _accum(a, full)
    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# composites used across the model (no new backward rules)
# ---------------------------------------------------------------------------

def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stably via logsumexp over a stacked zero column."""
    flat = reshape(a, (a.size, 1))
    zeros = Tensor(np.zeros((a.size, 1)))
    return reshape(logsumexp(concat([zeros, flat], axis=1), axis=1), a.shape)


def abs_(a: Tensor) -> Tensor:
    return add(relu(a), relu(scale(a, -1.0)))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed from logits."""
    t = Tensor(np.asarray(targets, dtype=np.float64))
    return mean(sub(softplus(logits), mul(logits, t)))


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

def init_param(shape: tuple[int, ...], fan_in: int, seed: int,
               fan_out: int | None = None) -> Tensor:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_out is None:
        fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Adam:
    """Adaptive-moment optimizer; `step` also zeroes the gradients."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            g[:] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[:] = 0.0


# ---------------------------------------------------------------------------
# checkpoint wire format: 8-byte LE header length, JSON index, then per
# tensor an 8-byte LE byte count followed by little-endian float64 data.
# ---------------------------------------------------------------------------

_MAGIC = b"RGNNTNSR"


def save_tensors(path: str | Path, named: dict[str, Tensor | np.ndarray]) -> None:
    names = sorted(named)
    index = []
    payloads = []
    for name in names:
        t = named[name]
        arr = np.ascontiguousarray(
            t.values if isinstance(t, Tensor) else t, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape),
                      "nbytes": int(arr.nbytes)})
        payloads.append(arr.tobytes())
    header = json.dumps({"tensors": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"not a tensor checkpoint: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        out = {}
        for entry in header["tensors"]:
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            if nbytes != entry["nbytes"]:
                raise ValueError(f"corrupt checkpoint near {entry['name']!r}")
            arr = np.frombuffer(fh.read(nbytes), dtype="<f8")
            out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        return out
