"""Tape-based reverse-mode differentiation over dense numpy arrays.

Tensors are immutable between operations: every op allocates a fresh node
that remembers its parents and a backward closure. Calling ``backward()`` on
a scalar walks the tape in reverse topological order and accumulates
gradients into every node with ``requires_grad`` set.

Float64 is the default dtype (correctness runs); float32 inputs are carried
through unchanged for benchmark runs.
"""

from __future__ import annotations

import contextlib
import weakref

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "set_check_finite",
    "concat_last",
    "gather_rows",
    "scatter_add",
    "segment_sum",
    "segment_softmax",
    "segment_max",
    "inject_backward_fault",
    "max_axis1",
    "reduce_sum",
    "reduce_mean",
    "matmul",
    "linear",
    "enable_alloc_tracking",
    "transpose_last2",
    "reshape",
    "gelu",
    "layernorm",
    "reset_peak_bytes",
    "peak_bytes",
    "live_bytes",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True
_check_finite = False
_fault_ops: set[str] = set()


def inject_backward_fault(op_name: str | None):
    """Test hook: flip the sign of the named op's backward pass.

    Used to prove the gradient checker catches a broken backward; ``None``
    clears the fault.
    """
    _fault_ops.clear()
    if op_name is not None:
        _fault_ops.add(op_name)


class _AllocTracker:
    """High-water mark of live tensor bytes, for the benchmark harness."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.enabled = False

    def add(self, n):
        self.current += n
        if self.current > self.peak:
            self.peak = self.current

    def sub(self, n):
        self.current -= n


_alloc = _AllocTracker()


def enable_alloc_tracking(flag: bool):
    """Toggle per-tensor byte accounting (off by default; costs a weakref
    per tensor, so only the benchmark harness switches it on)."""
    _alloc.enabled = flag
    _alloc.current = 0
    _alloc.peak = 0


def reset_peak_bytes():
    _alloc.peak = _alloc.current


def peak_bytes() -> int:
    return _alloc.peak


def live_bytes() -> int:
    return _alloc.current


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_check_finite(flag: bool):
    """When on, every op output is asserted finite (slow; used by tests)."""
    global _check_finite
    _check_finite = flag


class Tensor:
    """A dense array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = ""
        if _alloc.enabled:
            _alloc.add(arr.nbytes)
            weakref.finalize(self, _alloc.sub, arr.nbytes)

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            # copy: g may alias a child's grad buffer or a broadcast view
            self.grad = np.array(g, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self, seed=None):
        """Backpropagate from this node; ``seed`` defaults to 1 for scalars."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p._backward is not None or p.requires_grad):
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                g = -node.grad if node._op in _fault_ops else node.grad
                node._backward(g)

    # -- operator sugar ---------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op: str = "") -> Tensor:
    """Build an op output; drops the tape when grad is globally disabled."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op or 'an operation'}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(-_unbroadcast(g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def linear(x, W, b) -> Tensor:
    """Fused y = x W^T + b over the last axis; W is (out, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.shape[-1] != W.data.shape[-1]:
        raise ValueError(f"linear: input width {x.data.shape[-1]} != fan-in {W.data.shape[-1]}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = x2 @ W.data.T + b.data

    def bwd(g):
        g2 = g.reshape(-1, W.data.shape[0])
        x._accumulate((g2 @ W.data).reshape(x.data.shape))
        W._accumulate(g2.T @ x2)
        b._accumulate(g2.sum(axis=0))

    return _make(out.reshape(lead + (W.data.shape[0],)), (x, W, b), bwd, "linear")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g):
        a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), bwd, "transpose")


def concat_last(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=-1)):
            p._accumulate(piece)

    return _make(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bwd, "concat")


# -- reductions -----------------------------------------------------------


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape).copy())

    return _make(a.data.sum(axis=axis), (a,), bwd, "reduce_sum")


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy())

    return _make(a.data.mean(axis=axis), (a,), bwd, "reduce_mean")


def max_axis1(a) -> Tensor:
    """Max over axis 1 of a 3-D tensor; subgradient routes to the argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=1)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[:, None, :], g[:, None, :], axis=1)
        a._accumulate(full)

    return _make(np.take_along_axis(a.data, idx[:, None, :], axis=1)[:, 0, :], (a,), bwd, "max")


# -- indexing -------------------------------------------------------------


def gather_rows(x, indices) -> Tensor:
    """Copy rows of ``x`` (first axis) at ``indices``."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("gather_rows index out of range")

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)

    return _make(x.data[idx], (x,), bwd, "gather")


def scatter_add(values, indices, out_rows: int) -> Tensor:
    """Accumulate rows of ``values`` into a fresh (out_rows, ...) tensor."""
    v = as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= out_rows):
        raise IndexError("scatter_add index out of range")
    out = np.zeros((out_rows,) + v.data.shape[1:], dtype=v.data.dtype)
    np.add.at(out, idx, v.data)

    def bwd(g):
        v._accumulate(g[idx])

    return _make(out, (v,), bwd, "scatter_add")


def _csr_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-segment sums for contiguous CSR segments via prefix differences."""
    prefix = np.concatenate(
        [np.zeros((1,) + values.shape[1:], dtype=values.dtype), np.cumsum(values, axis=0)]
    )
    return prefix[offsets[1:]] - prefix[offsets[:-1]]


def segment_sum(values, offsets) -> Tensor:
    """Sum contiguous row segments given CSR ``offsets``; empty segments yield 0."""
    v = as_tensor(values)
    off = np.asarray(offsets, dtype=np.int64)
    lengths = np.diff(off)
    seg_ids = np.repeat(np.arange(len(lengths)), lengths)

    def bwd(g):
        v._accumulate(g[seg_ids])

    return _make(_csr_sum(v.data, off), (v,), bwd, "segment_sum")


# -- nonlinearities & normalization ---------------------------------------


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _make(x * cdf, (a,), bwd, "gelu")


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (population variance) then apply gamma, beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bwd(g):
        gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        beta._accumulate(_unbroadcast(g, beta.data.shape))
        gx = g * gamma.data
        # d/dx of (x - mu) / sqrt(var + eps) with mu, var functions of x
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(term * inv)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bwd, "layernorm")


def segment_softmax(scores, offsets) -> Tensor:
    """Softmax within each CSR segment of a flat score vector.

    Empty segments contribute no entries; singleton segments map to 1.
    Max-subtraction keeps the exponentials bounded. A 2-D (rows, channels)
    input is normalized segment-wise per channel.
    """
    s = as_tensor(scores)
    off = np.asarray(offsets, dtype=np.int64)
    if s.data.ndim not in (1, 2):
        raise ValueError("segment_softmax expects a flat or (rows, channels) score tensor")
    if off.ndim != 1 or off[0] != 0 or off[-1] != s.data.shape[0] or np.any(np.diff(off) < 0):
        raise ValueError("malformed CSR offsets")
    lengths = np.diff(off)
    seg_ids = np.repeat(np.arange(len(lengths)), lengths)
    if s.data.shape[0]:
        seg_max = np.full((len(lengths),) + s.data.shape[1:], -np.inf, dtype=s.data.dtype)
        np.maximum.at(seg_max, seg_ids, s.data)
        e = np.exp(s.data - seg_max[seg_ids])
        denom = _csr_sum(e, off)
        p = e / denom[seg_ids]
    else:
        p = np.zeros_like(s.data)

    def bwd(g):
        dot = _csr_sum(p * g, off)
        s._accumulate(p * (g - dot[seg_ids]))

    return _make(p, (s,), bwd, "segment_softmax")


def segment_max(values, offsets) -> Tensor:
    """Per-segment max over contiguous CSR row segments; the subgradient
    routes to the first maximal row of each segment. Segments must be
    non-empty."""
    v = as_tensor(values)
    off = np.asarray(offsets, dtype=np.int64)
    lengths = np.diff(off)
    if np.any(lengths <= 0):
        raise ValueError("segment_max requires non-empty segments")
    seg_ids = np.repeat(np.arange(len(lengths)), lengths)
    n_rows, width = v.data.shape
    out = np.full((len(lengths), width), -np.inf, dtype=v.data.dtype)
    np.maximum.at(out, seg_ids, v.data)
    hit = v.data == out[seg_ids]
    cand = np.where(hit, np.arange(n_rows, dtype=np.int64)[:, None], n_rows)
    first = np.full((len(lengths), width), n_rows, dtype=np.int64)
    np.minimum.at(first, seg_ids, cand)

    def bwd(g):
        if v.grad is None:
            v.grad = np.zeros_like(v.data)
        flat_pos = first * width + np.arange(width, dtype=np.int64)[None, :]
        np.add.at(v.grad.reshape(-1), flat_pos.ravel(), g.ravel())

    return _make(out, (v,), bwd, "segment_max")
