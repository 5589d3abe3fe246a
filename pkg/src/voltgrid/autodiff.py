"""Minimal reverse-mode automatic differentiation over 2-D float64 arrays.

Graphs are recorded dynamically on every forward pass. Only leaf tensors
created with ``requires_grad=True`` keep a persistent ``grad``; repeated
``backward`` calls accumulate into those leaves until they are zeroed.
"""
from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (used for rollouts)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return a


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = _as2d(value)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def item(self) -> float:
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / float(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = ""
    out.op = op
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = _lift(a)
        return _make(a.value * s, (a,), lambda g: (g * s,), "scale")
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), back, "mul")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.value + s, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return _make(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def row_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), back, "row_softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Fused, max-shifted log of the row softmax."""
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.value.size
    return _make(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def sum_cols(a: Tensor) -> Tensor:
    """Row-wise sum, ``n x m -> n x 1``."""
    m = a.shape[1]
    return _make(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, m, axis=1),),
                 "sum_cols")


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean, ``n x m -> 1 x m``."""
    n = a.shape[0]
    return _make(a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),),
                 "mean_rows")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.value[start:stop], (a,), back, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.value[:, start:stop], (a,), back, "slice_cols")


def concat_rows(parts) -> Tensor:
    parts = [_lift(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: mismatched widths {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), tuple(parts), back, "concat_rows")


def concat_cols(parts) -> Tensor:
    parts = [_lift(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: mismatched heights {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back, "concat_cols")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    take_a = a.value <= b.value
    return _make(np.where(take_a, a.value, b.value), (a, b),
                 lambda g: (g * take_a, g * ~take_a), "minimum")


def take_cols(a: Tensor, idx) -> Tensor:
    """Pick column ``idx[r]`` from every row ``r``; returns ``n x 1``."""
    idx = np.asarray(idx, dtype=int).ravel()
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_cols: {idx.shape[0]} indices for shape {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _make(a.value[rows, idx][:, None], (a,), back, "take_cols")


# block ops: a batch of B graphs with n nodes each is stacked as (B*n) x F rows


def block_propagate(adj: np.ndarray, x: Tensor) -> Tensor:
    """Left-multiply every n-row block of ``x`` by the constant ``n x n`` matrix ``adj``."""
    n = adj.shape[0]
    if adj.shape != (n, n) or x.shape[0] % n:
        raise ShapeError(f"block_propagate: adjacency {adj.shape} with input {x.shape}")
    b, f = x.shape[0] // n, x.shape[1]
    out = np.matmul(adj, x.value.reshape(b, n, f)).reshape(b * n, f)

    def back(g):
        return (np.matmul(adj.T, g.reshape(b, n, f)).reshape(b * n, f),)

    return _make(out, (x,), back, "block_propagate")


def block_mean(x: Tensor, n: int) -> Tensor:
    """Mean over the rows of every n-row block: ``(B*n) x F -> B x F``."""
    if x.shape[0] % n:
        raise ShapeError(f"block_mean: {x.shape} is not a stack of {n}-row blocks")
    b, f = x.shape[0] // n, x.shape[1]
    out = x.value.reshape(b, n, f).mean(axis=1)

    def back(g):
        return (np.repeat(g / n, n, axis=0),)

    return _make(out, (x,), back, "block_mean")


def block_gather(x: Tensor, n: int, idx) -> Tensor:
    """Concatenate selected rows of every n-row block: ``(B*n) x F -> B x (k*F)``."""
    idx = np.asarray(idx, dtype=int)
    if x.shape[0] % n:
        raise ShapeError(f"block_gather: {x.shape} is not a stack of {n}-row blocks")
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
        raise ShapeError(f"block_gather: node ids {idx.tolist()} out of range for {n} nodes")
    b, f = x.shape[0] // n, x.shape[1]
    k = idx.size
    out = x.value.reshape(b, n, f)[:, idx, :].reshape(b, k * f)

    def back(g):
        full = np.zeros((b, n, f))
        np.add.at(full, (slice(None), idx), g.reshape(b, k, f))
        return (full.reshape(b * n, f),)

    return _make(out, (x,), back, "block_gather")


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every reachable leaf that requires it."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


class Parameter:
    """A named trainable leaf plus its Adam moment estimates."""

    def __init__(self, value, name: str):
        self.tensor = Tensor(value, requires_grad=True, name=name)
        self.name = name
        self.m = np.zeros_like(self.tensor.value)
        self.v = np.zeros_like(self.tensor.value)
        self.t = 0

    @property
    def value(self) -> np.ndarray:
        return self.tensor.value

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def grad_norm(params) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad ** 2) for p in params])))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = grad_norm(params)
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad[...] *= scale
    return total


def adam_step(params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    for p in params:
        g = p.grad
        p.t += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.t)
        v_hat = p.v / (1.0 - beta2 ** p.t)
        p.tensor.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


# checkpoint: b"VGCKPT" | u16 version | u32 header_len | header json | u32 count |
#   per array: u16 name_len | name | u8 ndim | u32 dims... | float64 little-endian row-major
CHECKPOINT_MAGIC = b"VGCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(head)), head,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", data, off)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off += 6
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            arrays[name] = np.frombuffer(data[off:off + size], dtype="<f8").reshape(shape).astype(np.float64)
            off += size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return header, arrays
