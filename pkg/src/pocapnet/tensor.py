"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the operations the phase-recognition model needs are provided. Each op
records its parents and a closure that pushes the output gradient back into
them; :func:`backward` walks the recorded graph in reverse topological order
and frees it afterwards.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"PSTN"


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ParameterError(ValueError):
    """An op argument is outside its valid range."""


class ContractError(RuntimeError):
    """An op was called in a state its contract forbids."""


class FormatError(ValueError):
    """Serialized bytes are not a valid tensor record."""


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def to_bytes(self) -> bytes:
        return serialize(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Create an op output; the graph edge is only recorded when a parent is tracked."""
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, _parents=tuple(parents) if tracked else (), _op=op)
    if tracked:
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
    out_data = a.data + b.data

    def _backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _node(out_data, (a, b), "add", _backward)


def add_columns(x: Tensor, v: Tensor) -> Tensor:
    """Add the column vector ``v`` (length D) to every column of ``x`` (D x T)."""
    if x.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != x.shape[0]:
        raise DimensionError(f"add_columns: cannot add {list(v.shape)} to columns of {list(x.shape)}")
    out_data = x.data + v.data[:, None]

    def _backward(g):
        x.accumulate(g)
        v.accumulate(g.sum(axis=1))

    return _node(out_data, (x, v), "add_columns", _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {list(a.shape)} and {list(b.shape)} differ")
    out_data = a.data * b.data

    def _backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return _node(out_data, (a, b), "mul", _backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def _backward(g):
        x.accumulate(g * c)

    return _node(x.data * c, (x,), "scale", _backward)


def sum_all(x: Tensor) -> Tensor:
    def _backward(g):
        x.accumulate(np.broadcast_to(g, x.shape))

    return _node(np.array(x.data.sum()), (x,), "sum", _backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _backward(g):
        x.accumulate(g * positive)

    return _node(np.where(positive, x.data, 0.0), (x,), "relu", _backward)


def softmax_cols(x: Tensor) -> Tensor:
    """Column-wise softmax of a C x T tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_cols expects a 2-d tensor, got {list(x.shape)}")
    if x.shape[0] < 1:
        raise ParameterError("softmax_cols needs at least one row")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def _backward(g):
        x.accumulate(p * (g - (g * p).sum(axis=0, keepdims=True)))

    return _node(p, (x,), "softmax", _backward)


def dropout(x: Tensor, p: float, train_mode: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def _backward(g):
        x.accumulate(g * keep)

    return _node(x.data * keep, (x,), "dropout", _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map applied to every column: ``weight @ x + bias``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("linear expects a 2-d input and a 2-d weight")
    d_out, d_in = weight.shape
    if x.shape[0] != d_in:
        raise DimensionError(f"linear: weight expects {d_in} input rows, input has {x.shape[0]}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear: bias shape {list(bias.shape)} != [{d_out}]")
    out_data = weight.data @ x.data
    if bias is not None:
        out_data += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        if x.requires_grad:
            x.accumulate(weight.data.T @ g)
        if weight.requires_grad:
            weight.accumulate(g @ x.data.T)
        if bias is not None:
            bias.accumulate(g.sum(axis=1))

    return _node(out_data, parents, "linear", _backward)


def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal 1-d convolution, C_in x T -> C_out x T.

    The input is left-padded with ``(K - 1) * dilation`` zeros, so output
    column t sees input columns ``t - (K-1)*dilation .. t`` only. Tap k of the
    kernel multiplies the input ``(K - 1 - k) * dilation`` steps in the past,
    matching the usual cross-correlation convention.
    """
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise DimensionError("conv1d_causal expects input [C_in, T] and weight [C_out, C_in, K]")
    c_out, c_in, k = weight.shape
    if k < 1:
        raise ParameterError("kernel width must be >= 1")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv1d_causal: weight expects {c_in} input channels, input has {x.shape[0]}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d_causal: bias shape {list(bias.shape)} != [{c_out}]")
    t = x.shape[1]
    pad = (k - 1) * dilation
    xp = np.zeros((c_in, t + pad))
    xp[:, pad:] = x.data
    # cols[k] = input shifted so that column t holds x[:, t - (K-1-k)*dilation]
    cols = np.stack([xp[:, j * dilation: j * dilation + t] for j in range(k)])  # K x C_in x T
    w_k = weight.data.transpose(2, 0, 1)  # K x C_out x C_in
    out_data = np.matmul(w_k, cols).sum(axis=0) + bias.data[:, None]

    def _backward(g):
        if weight.requires_grad:
            weight.accumulate(np.matmul(g[None], cols.transpose(0, 2, 1)).transpose(1, 2, 0))
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=1))
        if x.requires_grad:
            g_cols = np.matmul(w_k.transpose(0, 2, 1), g[None])  # K x C_in x T
            g_xp = np.zeros_like(xp)
            for j in range(k):
                g_xp[:, j * dilation: j * dilation + t] += g_cols[j]
            x.accumulate(g_xp[:, pad:])

    return _node(out_data, (x, weight, bias), "conv1d_causal", _backward)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every tracked tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The graph is freed
    afterwards, so a second call on the same loss is an error.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")
    if loss._freed:
        raise ContractError("graph already freed by an earlier backward()")
    order = _topo_order(loss)
    loss.accumulate(np.ones(loss.shape))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            # interior nodes drop their graph and transient grad
            node._parents = ()
            node._backward = None
            node._freed = True
            node.grad = None


# ---------------------------------------------------------------------------
# serialization


def serialize(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape)
    return header + t.data.astype("<f8", copy=False).tobytes(order="C")


def deserialize(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor record starting at ``offset``; returns (tensor, next offset)."""
    if buf[offset: offset + 4] != MAGIC:
        raise FormatError(f"bad tensor magic at byte {offset}")
    try:
        (rank,) = struct.unpack_from("<I", buf, offset + 4)
        dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    except struct.error as exc:
        raise FormatError(f"truncated tensor header at byte {offset}") from exc
    start = offset + 8 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + 8 * n
    if end > len(buf):
        raise FormatError(f"truncated tensor payload at byte {offset}: need {8 * n} bytes")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(dims)
    return Tensor(data), end


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = deserialize(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor record")
    return t


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
