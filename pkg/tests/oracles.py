"""Independent reference implementations used by the tests."""
import numpy as np

from eposenet.gconv import kernel_canvas, rotate_kernel
from eposenet.tensor import Tape, Tensor


def naive_conv2d(x, w, pad=0, stride=1):
    """Direct-loop cross-correlation of (C,H,W) with (Co,C,kh,kw)."""
    C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Co, Ho, Wo))
    for o in range(Co):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = acc
    return out


def naive_maxpool(x, k):
    *lead, H, W = x.shape
    Ho, Wo = (H - k) // k + 1, (W - k) // k + 1
    out = np.zeros(tuple(lead) + (Ho, Wo))
    for idx in np.ndindex(*lead):
        for i in range(Ho):
            for j in range(Wo):
                out[idx + (i, j)] = x[idx + (slice(i * k, i * k + k), slice(j * k, j * k + k))].max()
    return out


def naive_lift(image, w, N):
    """out[k, r] = sum_c conv(image[c], rot_r(w[k, c]))."""
    K, C, k, _ = w.shape
    n = kernel_canvas(k, N)
    out = []
    for kk in range(K):
        per_r = []
        for r in range(N):
            rk = np.stack([rotate_kernel(w[kk, c], r, N, n) for c in range(C)])
            per_r.append(naive_conv2d(image, rk[None], pad=n // 2)[0])
        out.append(per_r)
    return np.array(out)


def naive_group(v, w):
    """out[k', r] = sum_{k, s} conv(v[k, (s + r) % N], rot_r(w[k', k, s]))."""
    K, N, H, W = v.shape
    Ko = w.shape[0]
    k = w.shape[-1]
    n = kernel_canvas(k, N)
    out = np.zeros((Ko, N, H, W))
    for o in range(Ko):
        for r in range(N):
            for kk in range(K):
                for s in range(N):
                    rk = rotate_kernel(w[o, kk, s], r, N, n)
                    out[o, r] += naive_conv2d(v[kk, (s + r) % N][None], rk[None, None], pad=n // 2)[0]
    return out


def grad_check(fn, arrays, rng, h=1e-6):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a Tensor; the scalar checked is sum(fn(...) * P)
    for a fixed random projection P. Error per input is
    |g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8), taken over the whole vector.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out0 = fn(*[Tensor(a) for a in arrays]).data
    P = rng.standard_normal(np.shape(out0))

    def scalar(arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * P))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        loss = (out * P).sum()
    tape.backward(loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        g_tape = np.zeros_like(a) if ts[i].grad is None else ts[i].grad
        g_fd = np.zeros_like(a)
        for idx in np.ndindex(*a.shape):
            plus = [b.copy() for b in arrays]
            minus = [b.copy() for b in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g_fd[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        denom = max(np.linalg.norm(g_tape), np.linalg.norm(g_fd), 1e-8)
        worst = max(worst, float(np.linalg.norm(g_tape - g_fd) / denom))
    return worst
