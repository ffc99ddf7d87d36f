"""Flat ``key = value`` run configuration shared by every command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig, TrainConfig
from .synth import DatasetSpec, SceneSpec
from .tensor import ContractError


class ConfigError(ValueError):
    pass


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # paths
    out: str = ""
    data: str = ""          # dataset root holding train/ and test/
    train_data: str = ""
    test_data: str = ""
    checkpoint: str = ""
    resume: str = ""
    src: str = ""
    seed: int = 0
    # synthetic data
    n_train: int = 200
    n_test: int = 100
    image_size: int = 32
    texture: str = "composite"
    scene_extent: float = 4.0
    scene_grid: int = 256
    Z0: float = 1.0
    f: float = 20.0
    blur: float = 5.0
    ramp: float = 0.6
    contrast_lo: float = 0.02
    contrast_hi: float = 0.30
    blobs: int = 6
    t_range: float = 0.8
    held_out_rotation: bool = True
    train_arc_deg: float = 10.0
    # model
    N: int = 8
    preset: str = "study10"
    widths: tuple[int, ...] = (16, 16, 32, 32, 64)
    ksize: int = 3
    batchnorm: bool = True
    group_pool: bool = True
    head_width: int = 128
    orientation_head: str = "harmonic"
    match: str = "channels"
    dtype: str = "float32"
    s_t_init: float = 0.0
    s_R_init: float = -3.0
    # training
    epochs: int = 200
    batch: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    resize: int = 0
    crop: int = 0
    lr_drop_frac: float = 0.0
    lr_drop_factor: float = 0.1
    # evaluation
    thresh_t: str = "auto"   # metres, or auto = 10% of the scene extent (0.1 m without one)
    thresh_r_deg: float = 10.0
    # equivariance check
    verify_samples: int = 2
    verify_size: int = 32
    verify_tol: float = 1e-4
    # sweep
    sweep_N: tuple[int, ...] = (1, 4, 8)

    def model_config(self, N: int | None = None) -> ModelConfig:
        try:
            return ModelConfig(
                N=self.N if N is None else N, preset=self.preset, widths=self.widths,
                ksize=self.ksize, in_channels=1, batchnorm=self.batchnorm,
                group_pool=self.group_pool, head_width=self.head_width,
                orientation_head=self.orientation_head, match=self.match,
                dtype=self.dtype, s_t_init=self.s_t_init, s_R_init=self.s_R_init)
        except ContractError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch=self.batch, lr=self.lr, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, seed=self.seed, resize=self.resize,
                           crop=self.crop, lr_drop_frac=self.lr_drop_frac,
                           lr_drop_factor=self.lr_drop_factor)

    def dataset_spec(self) -> DatasetSpec:
        scene = SceneSpec(texture=self.texture, grid=self.scene_grid, extent=self.scene_extent,
                          Z0=self.Z0, f=self.f, blur=self.blur, ramp=self.ramp,
                          contrast=(self.contrast_lo, self.contrast_hi), blobs=self.blobs)
        return DatasetSpec(n_train=self.n_train, n_test=self.n_test, image_size=self.image_size,
                           scene=scene, t_range=self.t_range,
                           held_out_rotation=self.held_out_rotation, train_arc_deg=self.train_arc_deg)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    default = RunConfig.__dataclass_fields__[key].default
    if default is dataclasses.MISSING:
        default = RunConfig.__dataclass_fields__[key].default_factory()
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return _ints(raw)
    return raw


def apply(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    key = key.strip()
    if key not in _FIELDS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        setattr(cfg, key, _convert(key, raw.strip()))
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key!r}: {e}") from None


def parse_lines(cfg: RunConfig, text: str, source: str) -> set[str]:
    keys = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = s.split("=", 1)
        apply(cfg, k, v, f"{source}:{lineno}")
        keys.add(k.strip())
    return keys


def load_config(path: str | None = None, overrides: list[str] = (), seed: int | None = None,
                out: str | None = None) -> tuple[RunConfig, set[str]]:
    """Defaults, then the file, then ``--set`` overrides, then --seed/--out.

    Returns the config and the set of keys given explicitly.
    """
    cfg = RunConfig()
    given: set[str] = set()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{path}: config file not found")
        given |= parse_lines(cfg, p.read_text(), str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        apply(cfg, k, v, f"--set {item}")
        given.add(k.strip())
    if seed is not None:
        cfg.seed = seed
        given.add("seed")
    if out is not None:
        cfg.out = out
        given.add("out")
    return cfg, given


def require(cfg: RunConfig, given: set[str], keys: list[str], command: str) -> None:
    for k in keys:
        if k not in given or getattr(cfg, k) in ("", None):
            hint = f"--{k}" if k in ("out", "seed") else f"--set {k}=..."
            raise ConfigError(f"{command}: missing required key {k!r} (set it in the config file or with {hint})")
