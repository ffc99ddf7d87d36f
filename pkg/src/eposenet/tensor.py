"""Dense arrays with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active; outside a tape
they run as plain numpy and return untracked tensors. Every differentiable
operation is written as a forward computation plus a vector-Jacobian product.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "backward", "set_checked", "checked_mode", "tensor",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "cos", "sin",
    "atan2", "power", "tsum", "mean", "reshape", "transpose", "concat",
    "stack", "getitem", "norm", "linear", "matmul", "elu", "conv2d",
    "maxpool2d", "max_axis", "make_op", "AdamState", "adam_step",
    "he_init", "save_checkpoint", "load_checkpoint", "ContractError",
]


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


_CHECKED = False
_TAPES: list["Tape"] = []


def set_checked(flag: bool) -> None:
    """Toggle the NaN/Inf scan that runs after every forward operation."""
    global _CHECKED
    _CHECKED = bool(flag)


def checked_mode() -> bool:
    return _CHECKED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)
    def exp(self): return exp(self)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: object  # callable(grad) -> tuple of input grads (None to skip)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of
    the computation graph; :meth:`backward` walks it once in reverse.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)
    >>> float(x.grad)
    6.0
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, t: Tensor) -> None:
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)

    def record(self, out: Tensor, inputs, vjp) -> None:
        for t in inputs:
            if t.requires_grad and t.node is None:
                self.watch(t)
        out.node = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> list[Tensor]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node >= len(self.nodes) or self.nodes[loss.node].out is not loss:
            raise ContractError("loss was not computed on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return self.leaves


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for tape in reversed(_TAPES):
        if loss.node is not None and loss.node < len(tape.nodes) and tape.nodes[loss.node].out is loss:
            return tape.backward(loss)
    raise ContractError("loss is not on an active tape")


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(out_data: np.ndarray, inputs, vjp) -> Tensor:
    """Wrap ``out_data`` as the result of an operation on ``inputs``.

    ``vjp(grad)`` must return one gradient (or None) per input.
    """
    if _CHECKED and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by forward operation")
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        _TAPES[-1].record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.data)
    b = _as_tensor(b)
    return _as_tensor(a, b.data), b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    return make_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def cos(a: Tensor) -> Tensor:
    return make_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a: Tensor) -> Tensor:
    return make_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def atan2(y: Tensor, x: Tensor) -> Tensor:
    r2 = y.data ** 2 + x.data ** 2
    return make_op(np.arctan2(y.data, x.data), (y, x),
                   lambda g: (_unbroadcast(g * x.data / r2, y.shape),
                              _unbroadcast(-g * y.data / r2, x.shape)))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_op(a.data[idx], (a,), vjp)


def concat(ts, axis=0) -> Tensor:
    ts = list(ts)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(ts, axis=0) -> Tensor:
    ts = list(ts)
    return make_op(np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.moveaxis(g, axis, 0)))


def norm(a: Tensor, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    n = np.sqrt(np.sum(a.data ** 2, axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * a.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return make_op(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for ``x`` of shape (n,) or a batch (B, n)."""
    if weight.ndim != 2:
        raise ContractError(f"weight must be 2-D, got {weight.shape}")
    m, n = weight.shape
    if x.shape[-1] != n or x.ndim not in (1, 2):
        raise ContractError(f"linear: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (m,):
        raise ContractError(f"linear: bias {bias.shape} does not match output size {m}")
    xd = x.data
    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ weight.data
        gw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, inputs, vjp)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return make_op(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))


def conv2d(x: Tensor, w: Tensor, pad: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation of (C,H,W) or (B,C,H,W) input with (Co,C,kh,kw) kernels."""
    if pad < 0 or stride < 1:
        raise ContractError("conv2d needs pad >= 0 and stride >= 1")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ContractError(f"conv2d: bad ranks {x.shape}, {w.shape}")
    xd = x.data if batched else x.data[None]
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ContractError(f"conv2d: input has {C} channels, kernels expect {Ci}")
    if (H + 2 * pad - kh) % stride or (W + 2 * pad - kw) % stride:
        raise ContractError(f"conv2d: non-integral output extent for {(H, W)}, k={kh}, pad={pad}, stride={stride}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ContractError("conv2d: kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gb = g if batched else g[None]
        gw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(gb, w.data, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx if batched else gx[0], gw)

    return make_op(out if batched else out[0], (x, w), vjp)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over k×k windows of the last two axes; ties route to the first index."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ContractError("maxpool2d needs k >= 1 and stride >= 1")
    H, W = x.shape[-2:]
    if k > H or k > W:
        raise ContractError(f"maxpool2d: window {k} exceeds input {(H, W)}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = win.reshape(win.shape[:-2] + (k * k,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        for a in range(k):
            for b in range(k):
                sel = np.where(idx == a * k + b, g, 0.0)
                gx[..., a:a + stride * Ho:stride, b:b + stride * Wo:stride] += sel
        return (gx,)

    return make_op(out, (x,), vjp)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis with argmax gradient routing."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_op(np.squeeze(out, axis=axis), (x,), vjp)


# -- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-5) -> AdamState:
    """In-place Adam update with bias correction; iterates params in key order."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name in params:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return state


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# -- checkpoint I/O -------------------------------------------------------

_MAGIC = b"EPNT1"


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float64 in the EPNT1 layout."""
    chunks = [_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != _MAGIC:
        raise ValueError(f"{path}: not an EPNT1 checkpoint")
    pos = 5

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
        out[name] = arr
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} entries")
    return out
