"""Equivariant pose regression network, loss and training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .gconv import GBatchNorm, GroupConv, LiftConv, kernel_canvas
from .geom import quat_normalize
from .tensor import AdamState, ContractError, Tensor, Tape

__all__ = [
    "ModelConfig", "TrainConfig", "Backbone", "PoseHead", "EPoseNet",
    "pose_loss", "regress_pose", "count_params", "classical_twin",
    "train_epoch", "preprocess", "state_entries", "load_state_entries",
]

PRESETS = ("study10", "resnet_s")


@dataclass
class ModelConfig:
    N: int = 8
    preset: str = "study10"
    widths: tuple[int, ...] = (16, 16, 32, 32, 64)
    ksize: int = 3
    in_channels: int = 1
    batchnorm: bool = True
    group_pool: bool = True
    head_width: int = 128
    orientation_head: str = "mlp"   # "mlp" or "harmonic"
    match: str = "channels"         # how widths map to K per orientation
    dtype: str = "float32"
    s_t_init: float = 0.0
    s_R_init: float = -3.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.preset not in PRESETS:
            raise ContractError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        need = 5 if self.preset == "study10" else 2
        if len(self.widths) != need:
            raise ContractError(f"preset {self.preset} needs {need} widths, got {len(self.widths)}")
        if min(self.widths) < 1 or self.N < 1:
            raise ContractError("widths and N must be positive")
        if self.ksize % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {self.ksize}")
        if self.orientation_head not in ("mlp", "harmonic"):
            raise ContractError(f"unknown orientation head {self.orientation_head!r}")
        if self.match not in ("channels", "params"):
            raise ContractError(f"unknown width matching {self.match!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def fiber_widths(self) -> tuple[int, ...]:
        """Channels K per orientation for each stage.

        ``channels`` keeps K*N equal to the configured width; ``params``
        keeps the unique weight count close to that of an N=1 network.
        """
        if self.match == "channels":
            ks = tuple(w // self.N for w in self.widths)
        else:
            ks = tuple(int(round(w / math.sqrt(self.N))) for w in self.widths)
        if min(ks) < 1:
            raise ContractError(f"widths {self.widths} too small for N={self.N}")
        return ks

    @property
    def downsample(self) -> int:
        return 16 if self.preset == "study10" else 4


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    seed: int = 0
    resize: int = 0
    crop: int = 0
    lr_drop_frac: float = 0.0      # 0 disables; else lr * lr_drop_factor from that fraction of epochs on
    lr_drop_factor: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if self.lr_drop_frac > 0 and epoch >= int(self.lr_drop_frac * self.epochs):
            return self.lr * self.lr_drop_factor
        return self.lr


# -- backbone ----------------------------------------------------------------

class _ConvUnit:
    """Conv -> optional batch norm -> optional ELU."""

    def __init__(self, conv, bn, act=True):
        self.conv, self.bn, self.act = conv, bn, act

    def layers(self):
        return [("conv", self.conv)] + ([("bn", self.bn)] if self.bn else [])

    def __call__(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return T.elu(y) if self.act else y


class _ResBlock:
    def __init__(self, k_in, k_out, cfg, rng, dtype):
        N, ks, bn = cfg.N, cfg.ksize, cfg.batchnorm
        self.a = _ConvUnit(GroupConv(k_in, k_out, N, ks, rng=rng, dtype=dtype, bias=not bn),
                           GBatchNorm(k_out, dtype=dtype) if bn else None)
        self.b = _ConvUnit(GroupConv(k_out, k_out, N, ks, rng=rng, dtype=dtype, bias=not bn),
                           GBatchNorm(k_out, dtype=dtype) if bn else None, act=False)
        self.proj = None
        if k_in != k_out:
            self.proj = _ConvUnit(GroupConv(k_in, k_out, N, 1, rng=rng, dtype=dtype, bias=not bn),
                                  GBatchNorm(k_out, dtype=dtype) if bn else None, act=False)

    def layers(self):
        out = [("a." + n, l) for n, l in self.a.layers()] + [("b." + n, l) for n, l in self.b.layers()]
        if self.proj is not None:
            out += [("proj." + n, l) for n, l in self.proj.layers()]
        return out

    def __call__(self, x):
        skip = x if self.proj is None else self.proj(x)
        return T.elu(self.b(self.a(x)) + skip)


class Backbone:
    """Stack of equivariant convolutions producing (B, K, N, h, w) features.

    ``study10``: ten 3x3 convolutions with ELU, 2x2 max pooling after every
    second one except the last pair. ``resnet_s``: a lifting stem and two
    residual stages of two blocks each, with pooling after each stage.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg, self.N = cfg, cfg.N
        dt = cfg.np_dtype
        ks, N, bn = cfg.ksize, cfg.N, cfg.batchnorm
        K = cfg.fiber_widths()
        self.stages: list[tuple[str, object]] = []
        if cfg.preset == "study10":
            k_prev = None
            for s, k in enumerate(K):
                for j in range(2):
                    if k_prev is None:
                        conv = LiftConv(cfg.in_channels, k, N, ks, rng=rng, dtype=dt, bias=not bn)
                    else:
                        conv = GroupConv(k_prev, k, N, ks, rng=rng, dtype=dt, bias=not bn)
                    unit = _ConvUnit(conv, GBatchNorm(k, dtype=dt) if bn else None)
                    self.stages.append((f"conv{2 * s + j + 1}", unit))
                    k_prev = k
                if s < len(K) - 1:
                    self.stages.append((f"pool{s + 1}", None))
        else:
            stem = LiftConv(cfg.in_channels, K[0], N, ks, rng=rng, dtype=dt, bias=not bn)
            self.stages.append(("stem", _ConvUnit(stem, GBatchNorm(K[0], dtype=dt) if bn else None)))
            self.stages.append(("res1a", _ResBlock(K[0], K[0], cfg, rng, dt)))
            self.stages.append(("res1b", _ResBlock(K[0], K[0], cfg, rng, dt)))
            self.stages.append(("pool1", None))
            self.stages.append(("res2a", _ResBlock(K[0], K[1], cfg, rng, dt)))
            self.stages.append(("res2b", _ResBlock(K[1], K[1], cfg, rng, dt)))
            self.stages.append(("pool2", None))
        self.out_channels = K[-1]
        self.margin = self._receptive_margin()

    def _receptive_margin(self) -> int:
        """Receptive-field radius of the output, in output pixels (rounded up).

        Also fills ``stage_margins`` with the same quantity after every stage.
        """
        radius, jump = 0.0, 1
        n = kernel_canvas(self.cfg.ksize, self.N) // 2
        self.stage_margins = {}
        for name, unit in self.stages:
            if unit is None:
                radius += 0.5 * jump
                jump *= 2
            elif isinstance(unit, _ResBlock):
                radius += 2 * n * jump
            else:
                radius += n * jump
            self.stage_margins[name] = int(math.ceil(radius / jump))
        return self.stage_margins[self.stages[-1][0]]

    def layers(self):
        """(name, layer) pairs for every parameterised layer, in order."""
        out = []
        for name, unit in self.stages:
            if unit is not None:
                out += [(f"{name}.{n}", l) for n, l in unit.layers()]
        return out

    def check_input(self, x: Tensor) -> None:
        H, W = x.shape[-2:]
        d = self.cfg.downsample
        if x.shape[-3] != self.cfg.in_channels:
            raise ContractError(f"input has {x.shape[-3]} channels, model expects {self.cfg.in_channels}")
        if H % d or W % d or H < d or W < d:
            raise ContractError(f"input extents {(H, W)} must be positive multiples of {d}")

    def stage_outputs(self, x: Tensor) -> list[tuple[str, Tensor]]:
        self.check_input(x)
        outs = []
        y = x
        for name, unit in self.stages:
            y = T.maxpool2d(y, 2) if unit is None else unit(y)
            outs.append((name, y))
        return outs

    def __call__(self, x: Tensor) -> Tensor:
        return self.stage_outputs(x)[-1][1]


# -- head ----------------------------------------------------------------------

class _Linear:
    def __init__(self, n_in, n_out, rng, dtype, scale=None):
        scale = math.sqrt(1.0 / n_in) if scale is None else scale
        self.weight = Tensor((rng.standard_normal((n_out, n_in)) * scale).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def n_independent(self):
        return self.weight.size + self.bias.size

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class _Embedding:
    """Two-layer ELU MLP."""

    def __init__(self, n_in, width, rng, dtype):
        self.fc1 = _Linear(n_in, width, rng, dtype, math.sqrt(2.0 / n_in))
        self.fc2 = _Linear(width, width, rng, dtype, math.sqrt(2.0 / width))

    def layers(self):
        return [("fc1", self.fc1), ("fc2", self.fc2)]

    def __call__(self, x):
        return T.elu(self.fc2(T.elu(self.fc1(x))))


class PoseHead:
    """Position and orientation branches: b + P . E(features).

    Features are averaged over space first. The position branch (and the
    ``mlp`` orientation branch) sees the fiber max-pooled vector when
    ``group_pool`` is set, otherwise the flattened (K*N) vector.

    The ``harmonic`` orientation branch instead reads the first circular
    harmonic of each orientation fiber, mixes channels with learned complex
    weights into z, and embeds the half angle of z as (cos, sin). A quarter
    turn of the input shifts the fiber and so rotates z exactly.
    """

    def __init__(self, K: int, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.K, self.N, self.cfg = K, cfg.N, cfg
        n_inv = K if cfg.group_pool else K * cfg.N
        w = cfg.head_width
        self.emb_t = _Embedding(n_inv, w, rng, dt)
        self.proj_t = _Linear(w, 3, rng, dt)
        if cfg.orientation_head == "mlp":
            self.emb_q = _Embedding(n_inv, w, rng, dt)
            self.proj_q = _Linear(w, 4, rng, dt)
        else:
            self.mix = Tensor((rng.standard_normal((K, 2)) / math.sqrt(K)).astype(dt), requires_grad=True)
            # P_q = [p, p*k]: the half-angle embedding acts as a roll about the
            # optical axis composed on the right of a learned base rotation p
            self.base_q = Tensor(np.array([1.0, 0.0, 0.0, 0.0], dtype=dt), requires_grad=True)
        n = np.arange(cfg.N)
        # conjugate harmonic: the phase advances with the camera roll, which
        # turns image content the opposite way
        self._basis = np.stack([np.cos(2 * np.pi * n / cfg.N), -np.sin(2 * np.pi * n / cfg.N)], 1).astype(dt)

    def layers(self):
        out = [("emb_t." + n, l) for n, l in self.emb_t.layers()] + [("proj_t", self.proj_t)]
        if self.cfg.orientation_head == "mlp":
            out += [("emb_q." + n, l) for n, l in self.emb_q.layers()]
            return out + [("proj_q", self.proj_q)]
        return out + [("mix", _Param(self.mix)), ("base_q", _Param(self.base_q))]

    def pooled(self, v: Tensor) -> Tensor:
        """(B, K, N, h, w) -> spatially averaged (B, K, N)."""
        return T.mean(v, axis=(-2, -1))

    def invariant(self, pooled: Tensor) -> Tensor:
        B = pooled.shape[0]
        if self.cfg.group_pool:
            return T.max_axis(pooled, axis=-1)
        return T.reshape(pooled, (B, -1))

    def __call__(self, v: Tensor) -> tuple[Tensor, Tensor]:
        p = self.pooled(v)
        f = self.invariant(p)
        t = self.proj_t(self.emb_t(f))
        if self.cfg.orientation_head == "mlp":
            q = self.proj_q(self.emb_q(f))
        else:
            B = p.shape[0]
            h = T.reshape(T.matmul(T.reshape(p, (B * self.K, self.N)), Tensor(self._basis)), (B, self.K, 2))
            hr, hi = h[:, :, 0], h[:, :, 1]
            a, b = self.mix[:, 0], self.mix[:, 1]
            zr = T.tsum(hr * a - hi * b, axis=1)
            zi = T.tsum(hi * a + hr * b, axis=1)
            half = T.atan2(zi, zr) * 0.5
            p = self.base_q
            pk = T.stack([-p[3], p[2], -p[1], p[0]])
            q = T.reshape(T.cos(half), (B, 1)) * p + T.reshape(T.sin(half), (B, 1)) * pk
        return t, q


class _Param:
    """Adapter exposing a bare tensor as a layer with one parameter."""

    def __init__(self, t):
        self.t = t

    def params(self):
        return {"value": self.t}

    def n_independent(self):
        return self.t.size


def regress_pose(head: PoseHead, features: Tensor) -> tuple[Tensor, Tensor]:
    """Position (B, 3) and raw, un-normalised quaternion (B, 4)."""
    return head(features)


# -- loss ------------------------------------------------------------------------

def pose_loss(t_pred: Tensor, q_raw: Tensor, t_gt, q_gt, s_t: Tensor, s_R: Tensor) -> Tensor:
    """Batch mean of L_t exp(-s_t) + s_t + L_R exp(-s_R) + s_R.

    L_t = |t_gt - t|, L_R = |q_gt - q/|q||; the ground-truth quaternion sign
    is chosen per sample to minimise L_R.
    """
    t_gt = np.asarray(t_gt, dtype=t_pred.dtype).reshape(t_pred.shape)
    q_gt = np.asarray(q_gt, dtype=q_raw.dtype).reshape(q_raw.shape)
    qn = np.linalg.norm(q_raw.data, axis=-1, keepdims=True)
    if np.any(qn == 0):
        raise ContractError("raw quaternion has zero norm")
    q_unit = q_raw / T.norm(q_raw, axis=-1, keepdims=True)
    sign = np.where(np.sum(q_gt * q_unit.data, axis=-1, keepdims=True) < 0, -1.0, 1.0).astype(q_gt.dtype)
    L_t = T.norm(t_pred - t_gt, axis=-1)
    L_R = T.norm(q_unit - q_gt * sign, axis=-1)
    L_t, L_R = T.mean(L_t), T.mean(L_R)
    return L_t * T.exp(-s_t) + s_t + L_R * T.exp(-s_R) + s_R


# -- full model --------------------------------------------------------------------

class EPoseNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xE905E])
        self.backbone = Backbone(cfg, rng)
        self.head = PoseHead(self.backbone.out_channels, cfg, rng)
        dt = cfg.np_dtype
        self.s_t = Tensor(np.array(cfg.s_t_init, dtype=dt), requires_grad=True)
        self.s_R = Tensor(np.array(cfg.s_R_init, dtype=dt), requires_grad=True)
        self.training = False
        self.train(False)

    @property
    def N(self) -> int:
        return self.cfg.N

    def layers(self):
        out = [("backbone." + n, l) for n, l in self.backbone.layers()]
        out += [("head." + n, l) for n, l in self.head.layers()]
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers():
            for pn, p in layer.params().items():
                out[f"{name}.{pn}"] = p
        out["loss.s_t"] = self.s_t
        out["loss.s_R"] = self.s_R
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers():
            if isinstance(layer, GBatchNorm):
                for bn, b in layer.buffers().items():
                    out[f"{name}.{bn}"] = b
        return out

    def train(self, flag: bool = True) -> "EPoseNet":
        self.training = flag
        for _, layer in self.layers():
            if isinstance(layer, GBatchNorm):
                layer.training = flag
        return self

    def eval(self) -> "EPoseNet":
        return self.train(False)

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        return self.backbone(x)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        batched = x.ndim == 4
        if not batched:
            x = T.reshape(x, (1,) + x.shape)
        return regress_pose(self.head, self.backbone(x))

    def loss(self, x, t_gt, q_gt) -> Tensor:
        t, q = self(x)
        return pose_loss(t, q, t_gt, q_gt, self.s_t, self.s_R)

    def predict(self, images: np.ndarray, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Positions (M, 3) and unit, hemisphere-normalised quaternions (M, 4)."""
        was = self.training
        self.eval()
        ts, qs = [], []
        for i in range(0, len(images), batch):
            t, q = self(np.asarray(images[i:i + batch], dtype=self.cfg.np_dtype))
            ts.append(t.data.astype(np.float64))
            qs.append(q.data.astype(np.float64))
        self.train(was)
        if not ts:
            return np.zeros((0, 3)), np.zeros((0, 4))
        t = np.concatenate(ts)
        q = np.array([quat_normalize(v) for v in np.concatenate(qs)])
        return t, q


def _layer_count(layer) -> int:
    return int(layer.n_independent())


def count_params(model) -> tuple[int, dict[str, int]]:
    """Independent scalar parameters (base kernels counted once) per layer."""
    if isinstance(model, (EPoseNet, Backbone, PoseHead)):
        layers = model.layers()
    else:
        layers = [("layer", model)]
    breakdown = {name: _layer_count(layer) for name, layer in layers}
    if isinstance(model, EPoseNet):
        breakdown["loss"] = 2
    return sum(breakdown.values()), breakdown


def classical_twin(cfg: ModelConfig) -> ModelConfig:
    """The N=1 configuration with the same effective channel count K*N."""
    widths = tuple(k * cfg.N for k in cfg.fiber_widths())
    return replace(cfg, N=1, widths=widths, match="channels")


# -- training ----------------------------------------------------------------------

def preprocess(images: np.ndarray, rng: np.random.Generator | None, resize: int = 0,
               crop: int = 0) -> np.ndarray:
    """Optional resize (shorter side) then random crop; centre crop when rng is None."""
    x = images
    if resize:
        from scipy.ndimage import zoom
        H, W = x.shape[-2:]
        s = resize / min(H, W)
        x = np.stack([zoom(im, (1, s, s), order=1) for im in x])
    if crop:
        H, W = x.shape[-2:]
        if crop > min(H, W):
            raise ContractError(f"crop {crop} exceeds image {(H, W)}")
        out = np.empty(x.shape[:2] + (crop, crop), dtype=x.dtype)
        for i in range(len(x)):
            if rng is None:
                r0, c0 = (H - crop) // 2, (W - crop) // 2
            else:
                r0, c0 = rng.integers(0, H - crop + 1), rng.integers(0, W - crop + 1)
            out[i] = x[i, :, r0:r0 + crop, c0:c0 + crop]
        x = out
    return x


def train_epoch(model: EPoseNet, images: np.ndarray, t_gt: np.ndarray, q_gt: np.ndarray,
                opt: AdamState, tcfg: TrainConfig, epoch: int) -> dict:
    """One shuffled pass of Adam updates; returns mean loss and current s_t, s_R."""
    M = len(images)
    if M == 0:
        raise ContractError("empty training set")
    rng = np.random.default_rng([tcfg.seed, epoch])
    order = rng.permutation(M)
    params = model.params()
    model.train(True)
    dt = model.cfg.np_dtype
    total = 0.0
    lr = tcfg.lr_at(epoch)
    for start in range(0, M, tcfg.batch):
        idx = order[start:start + tcfg.batch]
        x = preprocess(images[idx], rng, tcfg.resize, tcfg.crop).astype(dt)
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            loss = model.loss(Tensor(x), t_gt[idx], q_gt[idx])
        tape.backward(loss)
        total += float(loss.data) * len(idx)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        T.adam_step(params, grads, opt, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    model.train(False)
    return {"mean_loss": total / M, "s_t": float(model.s_t.data), "s_R": float(model.s_R.data)}


def state_entries(model: EPoseNet, opt: AdamState | None = None, epoch: int = 0) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v.data for k, v in model.params().items()}
    out.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    if opt is not None:
        for k in model.params():
            if k in opt.m:
                out[f"adam_m/{k}"] = opt.m[k]
                out[f"adam_v/{k}"] = opt.v[k]
        out["adam/step"] = np.array(float(opt.step))
    out["train/epoch"] = np.array(float(epoch))
    return out


def load_state_entries(model: EPoseNet, entries: dict[str, np.ndarray]) -> tuple[AdamState, int]:
    """Restore parameters, buffers and optimiser state; shapes must match exactly."""
    params, buffers = model.params(), model.buffers()
    dt = model.cfg.np_dtype
    for name, p in params.items():
        key = f"param/{name}"
        if key not in entries:
            raise ContractError(f"checkpoint lacks parameter {name!r} (config/checkpoint mismatch)")
        if entries[key].shape != p.shape:
            raise ContractError(f"parameter {name!r}: checkpoint shape {entries[key].shape} "
                                f"but config builds {p.shape}")
        p.data = entries[key].astype(dt)
    extra = [k[6:] for k in entries if k.startswith("param/") and k[6:] not in params]
    if extra:
        raise ContractError(f"checkpoint has parameters unknown to this config: {extra[:3]}")
    for name, b in buffers.items():
        key = f"buffer/{name}"
        if key in entries:
            if entries[key].shape != b.shape:
                raise ContractError(f"buffer {name!r}: checkpoint shape {entries[key].shape}, expected {b.shape}")
            b[...] = entries[key]
    opt = AdamState()
    for name in params:
        if f"adam_m/{name}" in entries:
            opt.m[name] = entries[f"adam_m/{name}"].astype(dt)
            opt.v[name] = entries[f"adam_v/{name}"].astype(dt)
    opt.step = int(entries.get("adam/step", np.array(0.0)))
    epoch = int(entries.get("train/epoch", np.array(0.0)))
    return opt, epoch
