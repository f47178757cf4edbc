"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` walks the recorded graph in
reverse topological order and accumulates into ``grad`` of every leaf that
has ``requires_grad=True``.

Binary elementwise ops require identical shapes. The only implicit broadcast
is a 1-D bias of length ``shape[-1]`` in :func:`add`; anything else needs an
explicit :func:`expand`.

Training runs in float32. Wrap code in ``with precision(np.float64):`` for
gradient checks.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, FormatError

_state = threading.local()


def get_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype of newly created tensors (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = get_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=get_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a, b, opname):
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    """Elementwise sum. ``b`` may also be a 1-D bias matching ``a.shape[-1]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)), "add_bias")
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    """Multiply by a Python scalar."""
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def gelu(a):
    """tanh approximation of GELU."""
    x = a.data
    k = x.dtype.type(math.sqrt(2.0 / math.pi))
    c = x.dtype.type(0.044715)
    u = k * (x + c * x * x * x)
    th = np.tanh(u)
    out = 0.5 * x * (1 + th)

    def bw(g):
        du = k * (1 + 3 * c * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * du),)

    return _result(out, (a,), bw, "gelu")


def silu(a):
    x = a.data
    with np.errstate(over="ignore"):  # exp(-x) -> inf gives the correct limit s = 0
        s = 1 / (1 + np.exp(-x))
    out = x * s
    return _result(out, (a,), lambda g: (g * (s * (1 + x * (1 - s))),), "silu")


# ------------------------------------------------------------------- shaping


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand(a, shape):
    """Broadcast size-1 axes of ``a`` to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tuple(tensors), bw, "concat")


def index_rows(a, idx):
    """Gather along axis 0 (embedding lookup); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (out,)

    return _result(a.data[idx], (a,), bw, "index_rows")


# --------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def mse(pred, target):
    """Mean of squared differences, as a scalar tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _result(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse")


# ------------------------------------------------------------------- linalg


def matmul(a, b):
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is ``(k, n)`` (shared weight) or
    ``(..., k, n)`` with the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if b.ndim == 2:
        def bw(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def bw(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _result(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` for ``x`` of shape ``(..., in)`` and ``w`` of shape ``(in, out)``."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(a):
    """Softmax along the last axis with per-row max subtraction."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


def softmax_rows(a):
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    return softmax(a)


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def cosine(a, b, eps=1e-12):
    """Cosine similarity of the flattened tensors; 0 when either norm is below ``eps``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "cosine")
    av, bv = a.data.reshape(-1), b.data.reshape(-1)
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    if na < eps or nb < eps:
        return _result(np.asarray(0.0, dtype=a.data.dtype), (a, b), lambda g: (np.zeros_like(a.data), np.zeros_like(b.data)), "cosine")
    dot = float(av @ bv)
    c = min(1.0, max(-1.0, dot / (na * nb)))

    def bw(g):
        g = float(g)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return ga.astype(a.data.dtype), gb.astype(b.data.dtype)

    return _result(np.asarray(c, dtype=a.data.dtype), (a, b), bw, "cosine")


# ----------------------------------------------------------------- backward


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: int


@dataclass
class ComputeGraph:
    """Topologically ordered op records reachable from one output tensor."""

    nodes: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        order, seen = [], set()
        stack = [(output, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        records = [OpRecord(n.op, tuple(id(p) for p in n._parents), id(n)) for n in order if not n.is_leaf]
        return cls(order, records)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss, graph=None, inputs=()):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable trainable leaf.

    Gradients accumulate across calls; call ``zero_grad`` between steps.
    Leaves listed in ``inputs`` that the loss does not depend on get a zero
    gradient instead of staying ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                g = np.zeros_like(node.data) if g is None else g
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=p.data.dtype).reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    for leaf in inputs:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    return graph


# ------------------------------------------------------------ file format

TENSOR_MAGIC = b"STLTNSR1"


def write_tensor(fh, array):
    """Write one raw tensor container: magic, u32 rank, u32 dims, little-endian f32 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh, base_offset=0):
    """Read one container written by :func:`write_tensor` and return a float32 array."""
    start = fh.tell()

    def need(n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated tensor {what}", base_offset + fh.tell())
        return buf

    magic = need(8, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", base_offset + start)
    (rank,) = struct.unpack("<I", need(4, "rank"))
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank}", base_offset + start + 8)
    dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims")) if rank else ()
    count = int(np.prod(dims, dtype=np.int64))
    payload = need(4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, tensor):
    with open(path, "wb") as fh:
        write_tensor(fh, tensor)


def load_tensor(path):
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh))
