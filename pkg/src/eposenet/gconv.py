"""Roto-translation equivariant layers over the plane times the cyclic group C_N.

Feature maps carry an orientation fiber: shape (K, N, H, W), optionally with
a leading batch axis. Spatial coordinates use x = column - c, y = c - row, so a
positive angle is a counter-clockwise rotation of the displayed array and a
quarter turn equals ``np.rot90(a, 1)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

__all__ = [
    "CyclicGroup", "circular_mask", "kernel_canvas", "rotation_operator", "rotate_kernel",
    "rotate_map", "feature_action", "lift_conv", "group_conv", "group_pool",
    "LiftConv", "GroupConv", "GBatchNorm", "equivariance_error",
    "export_feature_csv",
]


@dataclass(frozen=True)
class CyclicGroup:
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ContractError(f"group order must be >= 1, got {self.N}")

    @property
    def step(self) -> float:
        return 2 * math.pi / self.N

    def angle(self, r: int) -> float:
        return r * self.step


def circular_mask(size: int) -> np.ndarray:
    """Entries within the disk inscribed in a size x size square."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[:size, :size]
    return ((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2) ** 2


def _bilinear_operator(h: int, w: int, angle: float) -> np.ndarray:
    """Matrix M with vec(out) = M vec(a) for out(p) = a(R(angle)^T p), zero outside."""
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ii, jj = np.mgrid[:h, :w]
    x, y = jj - cx, cy - ii
    c, s = math.cos(angle), math.sin(angle)
    xs, ys = c * x + s * y, -s * x + c * y
    col, row = xs + cx, cy - ys
    M = np.zeros((h * w, h * w))
    r0, c0 = np.floor(row), np.floor(col)
    fr, fc = row - r0, col - c0
    # snap near-integers so exact grid hits do not leak weight to neighbours
    fr[np.abs(fr) < 1e-12] = 0.0
    fc[np.abs(fc) < 1e-12] = 0.0
    fr[np.abs(fr - 1) < 1e-12], fc[np.abs(fc - 1) < 1e-12] = 1.0, 1.0
    out_idx = np.arange(h * w).reshape(h, w)
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        wt = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
        rr, cc = (r0 + dr).astype(int), (c0 + dc).astype(int)
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (wt != 0)
        np.add.at(M, (out_idx[ok], rr[ok] * w + cc[ok]), wt[ok])
    return M


def _quarter_operator(h: int, w: int, q: int) -> np.ndarray:
    idx = np.arange(h * w).reshape(h, w)
    src = np.rot90(idx, q % 4).ravel()
    M = np.zeros((h * w, h * w))
    M[np.arange(h * w), src] = 1.0
    return M


@lru_cache(maxsize=256)
def rotation_operator(size: int, r: int, N: int) -> np.ndarray:
    """Linear operator rotating a size x size grid by r * 2pi/N.

    Quarter turns are exact permutations. When N is divisible by 4 the
    rotation is split into whole quarter turns applied after a bilinear
    rotation by the remainder, so rot90 composed with a residual rotation
    reproduces the combined rotation exactly.
    """
    r %= N
    if (4 * r) % N == 0:
        return _quarter_operator(size, size, 4 * r // N)
    if N % 4 == 0:
        q, rem = divmod(r, N // 4)
        base = _bilinear_operator(size, size, 2 * math.pi * rem / N)
        return _quarter_operator(size, size, q) @ base
    return _bilinear_operator(size, size, 2 * math.pi * r / N)


def kernel_canvas(size: int, N: int) -> int:
    """Side of the grid holding rotated copies of a size x size kernel.

    Quarter-turn groups keep the kernel size. Other rotations splat kernel
    entries off-grid, so the canvas grows until every masked entry's rotated
    footprint fits.
    """
    if N in (1, 2, 4):
        return size
    c = (size - 1) / 2
    yy, xx = np.nonzero(circular_mask(size))
    reach = np.sqrt((yy - c) ** 2 + (xx - c) ** 2).max()
    return 2 * int(math.ceil(reach - 1e-9)) + 1


def _splat_operator(size: int, canvas: int, r: int, N: int) -> np.ndarray:
    """(canvas^2, size^2) operator placing a kernel rotated by r*2pi/N on the canvas.

    Off-grid rotations distribute each entry over its four neighbours with
    bilinear weights (the transpose of bilinear sampling), which keeps the
    kernel sum and centroid. Whole quarter turns are applied afterwards as
    exact permutations.
    """
    o = (canvas - size) // 2
    embed = np.zeros((canvas * canvas, size * size))
    src = np.arange(size * size).reshape(size, size)
    dst = np.arange(canvas * canvas).reshape(canvas, canvas)[o:o + size, o:o + size]
    embed[dst.ravel(), src.ravel()] = 1.0
    r %= N
    if (4 * r) % N == 0:
        return _quarter_operator(canvas, canvas, 4 * r // N) @ embed
    if N % 4 == 0:
        q, rem = divmod(r, N // 4)
    else:
        q, rem = 0, r
    splat = _bilinear_operator(canvas, canvas, -2 * math.pi * rem / N).T
    return _quarter_operator(canvas, canvas, q) @ splat @ embed


@lru_cache(maxsize=64)
def _kernel_stack(size: int, N: int, canvas: int | None = None) -> np.ndarray:
    """(N, canvas^2, size^2) masked rotation operators, one per group element."""
    canvas = size if canvas is None else canvas
    m_in = circular_mask(size).ravel().astype(float)
    m_out = circular_mask(canvas).ravel().astype(float)
    return np.stack([m_out[:, None] * _splat_operator(size, canvas, r, N) * m_in[None, :]
                     for r in range(N)])


def rotate_kernel(k, r: int, N: int, canvas: int | None = None) -> np.ndarray:
    """Rotate a square odd-sided 2-D kernel by r * 2pi/N about its centre.

    The result has side ``canvas`` (default: the input side).
    """
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ContractError(f"kernel must be square with odd side, got {k.shape}")
    if not 0 <= r < N:
        raise ContractError(f"rotation index {r} outside [0, {N})")
    n = k.shape[0]
    canvas = n if canvas is None else canvas
    if canvas < n or canvas % 2 == 0:
        raise ContractError(f"canvas {canvas} must be odd and >= kernel side {n}")
    M = _kernel_stack(n, N, canvas)[r]
    return (M @ k.ravel()).reshape(canvas, canvas)


def rotate_map(a: np.ndarray, r: int, N: int) -> np.ndarray:
    """Rotate the last two (square) axes of ``a`` by r * 2pi/N."""
    r %= N
    if (4 * r) % N == 0:
        return np.rot90(a, 4 * r // N, axes=(-2, -1)).copy()
    h, w = a.shape[-2:]
    if h != w:
        raise ContractError("non-quarter rotations need square maps")
    M = rotation_operator(h, r, N)
    flat = a.reshape(a.shape[:-2] + (h * w,))
    return (flat @ M.T).reshape(a.shape)


def _shift(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content by dx columns right and dy rows up, zero fill."""
    out = np.zeros_like(a)
    H, W = a.shape[-2:]
    rows, cols = -dy, dx
    src_r = slice(max(0, -rows), H - max(0, rows))
    dst_r = slice(max(0, rows), H - max(0, -rows))
    src_c = slice(max(0, -cols), W - max(0, cols))
    dst_c = slice(max(0, cols), W - max(0, -cols))
    out[..., dst_r, dst_c] = a[..., src_r, src_c]
    return out


def feature_action(v, r: int, shift=(0, 0), N: int | None = None) -> np.ndarray:
    """Act on a fibered map (..., K, N, H, W) by rotation r*2pi/N then translation.

    The orientation axis is cyclically shifted by r. ``N`` defaults to the
    fiber size; a fiber of size 1 is left untouched (trivial representation).
    """
    a = v.data if isinstance(v, Tensor) else np.asarray(v)
    n_fib = a.shape[-3]
    N = n_fib if N is None else N
    if n_fib == 1:
        fib = 0
    elif (r * n_fib) % N == 0:
        fib = r * n_fib // N
    else:
        raise ContractError(f"rotation {r}/{N} does not act on a fiber of size {n_fib}")
    out = np.roll(a, fib, axis=-3) if fib else a
    out = rotate_map(out, r, N)
    if shift[0] or shift[1]:
        out = _shift(out, int(shift[0]), int(shift[1]))
    return out


def _lift_expand(w: Tensor, N: int) -> Tensor:
    """(K, C, k, k) base kernels -> (K*N, C, n, n) stack of rotated copies."""
    K, C, k, _ = w.shape
    n = kernel_canvas(k, N)
    M = _kernel_stack(k, N, n).astype(w.dtype)
    wv = w.data.reshape(K, C, k * k)
    out = np.einsum("rpq,kcq->krcp", M, wv).reshape(K * N, C, n, n)

    def vjp(g):
        g = g.reshape(K, N, C, n * n)
        return (np.einsum("rpq,krcp->kcq", M, g).reshape(w.shape),)

    return T.make_op(out, (w,), vjp)


def _group_expand(w: Tensor) -> Tensor:
    """(K', K, N, k, k) base kernels -> (K'*N, K*N, n, n) full group kernel.

    Block (k', r), (k, n) holds the base kernel for fiber offset (n - r) mod N
    rotated by r steps.
    """
    Ko, Ki, N, k, _ = w.shape
    n = kernel_canvas(k, N)
    M = _kernel_stack(k, N, n).astype(w.dtype)
    idx = (np.arange(N)[None, :] - np.arange(N)[:, None]) % N  # idx[r, n]
    wg = w.data.reshape(Ko, Ki, N, k * k)[:, :, idx]  # (Ko, Ki, r, n, kk)
    out = np.einsum("rpq,akrnq->arknp", M, wg).reshape(Ko * N, Ki * N, n, n)

    def vjp(g):
        g = g.reshape(Ko, N, Ki, N, n * n)
        gg = np.einsum("rpq,arknp->akrnq", M, g)  # (Ko, Ki, r, n, kk)
        gw = np.zeros((Ko, Ki, N, k * k), dtype=g.dtype)
        for r in range(N):
            gw[:, :, idx[r]] += gg[:, :, r]
        return (gw.reshape(w.shape),)

    return T.make_op(out, (w,), vjp)


def _split_batch(x: Tensor, rank: int):
    if x.ndim == rank:
        return T.reshape(x, (1,) + x.shape), False
    if x.ndim == rank + 1:
        return x, True
    raise ContractError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def lift_conv(image: Tensor, w: Tensor, N: int, pad: int | None = None, stride: int = 1) -> Tensor:
    """Correlate an image (C,H,W) with N rotated copies of each base kernel."""
    x, batched = _split_batch(image, 3)
    K, C, k, kw = w.shape
    if k != kw or k % 2 == 0:
        raise ContractError(f"kernels must be square with odd side, got {w.shape}")
    if min(x.shape[-2:]) < k:
        raise ContractError(f"image {x.shape[-2:]} smaller than kernel side {k}")
    pad = kernel_canvas(k, N) // 2 if pad is None else pad
    y = T.conv2d(x, _lift_expand(w, N), pad=pad, stride=stride)
    B, _, H, W = y.shape
    y = T.reshape(y, (B, K, N, H, W))
    return y if batched else T.reshape(y, (K, N, H, W))


def group_conv(v: Tensor, w: Tensor, pad: int | None = None, stride: int = 1) -> Tensor:
    """Group correlation of a fibered map (K,N,H,W) with base kernels (K',K,N,k,k)."""
    x, batched = _split_batch(v, 4)
    B, K, N, H, W = x.shape
    Ko, Ki, Nw, k, kw = w.shape
    if Nw != N:
        raise ContractError(f"group mismatch: features have N={N}, kernels N={Nw}")
    if Ki != K:
        raise ContractError(f"features have K={K} channels, kernels expect {Ki}")
    if k != kw or k % 2 == 0:
        raise ContractError(f"kernels must be square with odd side, got {w.shape}")
    pad = kernel_canvas(k, N) // 2 if pad is None else pad
    y = T.conv2d(T.reshape(x, (B, K * N, H, W)), _group_expand(w), pad=pad, stride=stride)
    _, _, Ho, Wo = y.shape
    y = T.reshape(y, (B, Ko, N, Ho, Wo))
    return y if batched else T.reshape(y, (Ko, N, Ho, Wo))


def group_pool(v: Tensor) -> Tensor:
    """Maximum over the orientation fiber: (..., K, N, H, W) -> (..., K, H, W)."""
    return T.max_axis(v, axis=-3)


# -- layers ----------------------------------------------------------------

class LiftConv:
    def __init__(self, c_in: int, k_out: int, N: int, ksize: int = 3, *,
                 rng: np.random.Generator, dtype=np.float64, bias: bool = False):
        if ksize % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {ksize}")
        self.N, self.ksize = N, ksize
        self.mask = circular_mask(ksize)
        fan_in = c_in * int(self.mask.sum())
        w = T.he_init(rng, (k_out, c_in, ksize, ksize), fan_in, dtype) * self.mask
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(k_out, dtype=dtype), requires_grad=True) if bias else None

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def n_independent(self) -> int:
        k_out, c_in = self.weight.shape[:2]
        n = k_out * c_in * int(self.mask.sum())
        return n + (k_out if self.bias is not None else 0)

    def __call__(self, x: Tensor) -> Tensor:
        y = lift_conv(x, self.weight, self.N)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (-1, 1, 1, 1))
        return y


class GroupConv:
    def __init__(self, k_in: int, k_out: int, N: int, ksize: int = 3, *,
                 rng: np.random.Generator, dtype=np.float64, bias: bool = False):
        if ksize % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {ksize}")
        self.N, self.ksize = N, ksize
        self.mask = circular_mask(ksize)
        fan_in = k_in * N * int(self.mask.sum())
        w = T.he_init(rng, (k_out, k_in, N, ksize, ksize), fan_in, dtype) * self.mask
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(k_out, dtype=dtype), requires_grad=True) if bias else None

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def n_independent(self) -> int:
        k_out, k_in, N = self.weight.shape[:3]
        n = k_out * k_in * N * int(self.mask.sum())
        return n + (k_out if self.bias is not None else 0)

    def __call__(self, v: Tensor) -> Tensor:
        y = group_conv(v, self.weight)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (-1, 1, 1, 1))
        return y


class GBatchNorm:
    """Batch normalisation with statistics pooled over batch, fiber and space.

    One scale and shift per K-channel, shared across the orientation fiber,
    so fiber permutations and spatial rotations commute with the layer.
    """

    def __init__(self, k: int, *, dtype=np.float64, eps: float = 1e-7, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(k, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(k, dtype=dtype)
        self.running_var = np.ones(k, dtype=dtype)
        self.training = True

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def n_independent(self) -> int:
        return self.gamma.size + self.beta.size

    def __call__(self, v: Tensor) -> Tensor:
        x, batched = _split_batch(v, 4)
        axes = (0, 2, 3, 4)
        shape = (1, -1, 1, 1, 1)
        if self.training:
            mu = T.mean(x, axis=axes, keepdims=True)
            xc = x - mu
            var = T.mean(xc * xc, axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            n = x.size // x.shape[1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var[:] = (1 - m) * self.running_var + m * unbiased
            y = xc / T.sqrt(var + self.eps)
        else:
            mu = self.running_mean.reshape(shape)
            y = (x - mu) * (1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps))
        y = y * T.reshape(self.gamma, shape) + T.reshape(self.beta, shape)
        return y if batched else T.reshape(y, y.shape[1:])


# -- measurement -----------------------------------------------------------

def _to_array(out) -> np.ndarray:
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def equivariance_error(extractor, image, r: int, N: int | None = None,
                       margin: int | None = None, fibered: bool = True) -> float:
    """Relative equivariance defect of ``extractor`` for a rotation r * 2pi/N.

    Returns max |F(rot x) - act(F(x))| over the interior of the output map,
    divided by max |F(x)|. ``margin`` output pixels are dropped on every side;
    it defaults to ``extractor.margin`` when present. Non-fibered outputs
    (..., C, H, W) are treated as scalar fields.
    """
    x = _to_array(image)
    if N is None:
        N = getattr(extractor, "N", 1)
    if r % N == 0:
        return 0.0
    xr = rotate_map(x, r, N)
    f0 = _to_array(extractor(Tensor(x)))
    f1 = _to_array(extractor(Tensor(xr)))
    if not fibered:
        f0, f1 = f0[..., None, :, :], f1[..., None, :, :]
    expected = feature_action(f0, r, N=N)
    if margin is None:
        margin = getattr(extractor, "margin", 0)
    H, W = f0.shape[-2:]
    mh = min(int(margin), max((H - 2) // 2, 0) if H % 2 == 0 else (H - 1) // 2)
    mw = min(int(margin), max((W - 2) // 2, 0) if W % 2 == 0 else (W - 1) // 2)
    sl = (..., slice(mh, H - mh), slice(mw, W - mw))
    scale = np.max(np.abs(f0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(f1[sl] - expected[sl])) / scale)


def export_feature_csv(v, path) -> None:
    """Write a (K, N, H, W) map as rows ``k,n,y,x,value`` (y = row, x = column)."""
    a = _to_array(v)
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4:
        raise ContractError(f"expected a (K, N, H, W) map, got shape {a.shape}")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["k", "n", "y", "x", "value"])
        for (k, n, y, x), val in np.ndenumerate(a):
            wr.writerow([k, n, y, x, repr(float(val))])
