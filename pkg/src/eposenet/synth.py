"""Planar scenes seen by a camera moving in its image plane, and pose datasets.

Image pixel (i, j) of a w x h image sits at image coordinates
x = j - (w-1)/2, y = (h-1)/2 - i (pixels, y up). A camera with planar pose
(theta, T) sees at pixel x the scene point T + R(theta) x Z0 / f.
"""
from __future__ import annotations

import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geom import (CameraIntrinsics, Frame, Se2Motion, Se3Pose, quat_from_matrix,
                   quat_normalize)
from .tensor import ContractError

__all__ = [
    "PlanarScene", "SceneSpec", "DatasetSpec", "PoseDataset", "DatasetError",
    "make_scene", "render", "warp_image", "bilinear_sample", "generate_dataset",
    "load_dataset", "convert_7scenes", "write_pnm", "read_pnm", "quantize",
    "read_meta", "write_meta", "sample_motions",
]

POSES_HEADER = "# epose-v1"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files; the message names file and line."""


# -- scenes and rendering --------------------------------------------------

@dataclass
class PlanarScene:
    """Intensity field on the plane Z = Z0, covering [-extent/2, extent/2]^2."""

    intensity: np.ndarray
    extent: float
    Z0: float = 1.0
    f: float = 16.0

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.extent <= 0:
            raise ContractError("scene extent must be positive")
        if self.intensity.size and (self.intensity.min() < 0 or self.intensity.max() > 1):
            raise ContractError("scene intensities must lie in [0, 1]")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.f, self.Z0)

    def sample(self, X, Y) -> np.ndarray:
        """Bilinear lookup of S(X, Y); zero outside the scene extent."""
        n_rows, n_cols = self.intensity.shape
        col = (np.asarray(X) + self.extent / 2) / self.extent * n_cols - 0.5
        row = (self.extent / 2 - np.asarray(Y)) / self.extent * n_rows - 0.5
        inside = ((np.asarray(X) >= -self.extent / 2) & (np.asarray(X) <= self.extent / 2)
                  & (np.asarray(Y) >= -self.extent / 2) & (np.asarray(Y) <= self.extent / 2))
        return np.where(inside, bilinear_sample(self.intensity, row, col, edge=True), 0.0)


def bilinear_sample(img: np.ndarray, row, col, edge: bool = False) -> np.ndarray:
    """Sample the last two axes of ``img`` at fractional (row, col).

    Out-of-range neighbours read as zero, or as the nearest edge value when
    ``edge`` is set.
    """
    H, W = img.shape[-2:]
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    r0, c0 = np.floor(row), np.floor(col)
    fr, fc = row - r0, col - c0
    r0, c0 = r0.astype(np.int64), c0.astype(np.int64)
    out = np.zeros(img.shape[:-2] + row.shape)
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        wt = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
        rr, cc = r0 + dr, c0 + dc
        if edge:
            ok = np.ones(rr.shape, dtype=bool)
            rr, cc = np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)
        else:
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            rr, cc = np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)
        out = out + np.where(ok, wt, 0.0) * img[..., rr, cc]
    return out


def _pixel_grid(res):
    w, h = res
    ii, jj = np.mgrid[:h, :w]
    return jj - (w - 1) / 2, (h - 1) / 2 - ii


def render(scene: PlanarScene, cam: Se2Motion, res=(32, 32)) -> np.ndarray:
    """Grayscale image (h, w) of the scene from the planar camera pose ``cam``."""
    if cam.frame is not Frame.SCENE:
        raise ContractError("render needs a SCENE-frame camera motion")
    x, y = _pixel_grid(res)
    s = scene.Z0 / scene.f
    c, sn = math.cos(cam.theta), math.sin(cam.theta)
    X = cam.t[0] + s * (c * x - sn * y)
    Y = cam.t[1] + s * (sn * x + c * y)
    return scene.sample(X, Y)


def warp_image(img: np.ndarray, m: Se2Motion) -> np.ndarray:
    """Image seen after the camera moves by ``m`` (pixel units): out(p) = img(R p + t).

    Works on (h, w) or (h, w, 3) arrays. Quarter turns without translation
    are exact pixel permutations (square images); other motions resample
    bilinearly with zero outside.
    """
    if m.frame is not Frame.IMAGE:
        raise ContractError("warp_image needs an IMAGE-frame motion")
    img = np.asarray(img, dtype=np.float64)
    rgb = img.ndim == 3
    planes = np.moveaxis(img, -1, 0) if rgb else img
    h, w = planes.shape[-2:]
    q = m.theta / (math.pi / 2)
    if m.t == (0.0, 0.0) and h == w and abs(q - round(q)) < 1e-12:
        # out(p) = img(R p) is a clockwise quarter turn of the array per +90 degrees
        out = np.rot90(planes, -int(round(q)), axes=(-2, -1)).copy()
    else:
        x, y = _pixel_grid((w, h))
        c, s = math.cos(m.theta), math.sin(m.theta)
        xs = c * x - s * y + m.t[0]
        ys = s * x + c * y + m.t[1]
        out = bilinear_sample(planes, (h - 1) / 2 - ys, xs + (w - 1) / 2)
    return np.moveaxis(out, 0, -1) if rgb else out


@dataclass
class SceneSpec:
    """Procedural band-limited scene texture.

    ``texture`` is ``noise`` (smoothed white noise) or ``composite``
    (a smooth intensity ramp along X, smoothed noise whose contrast grows
    along Y, and a few soft blobs).
    """

    texture: str = "composite"
    grid: int = 256
    extent: float = 4.0
    Z0: float = 1.0
    f: float = 20.0
    blur: float = 5.0  # gaussian sigma in scene-grid cells
    ramp: float = 0.6
    contrast: tuple[float, float] = (0.02, 0.30)
    blobs: int = 6


def make_scene(spec: SceneSpec, seed: int) -> PlanarScene:
    rng = np.random.default_rng([seed, 0x5CE7E])
    n = spec.grid
    noise = gaussian_filter(rng.standard_normal((n, n)), spec.blur, mode="wrap")
    noise /= noise.std()
    if spec.texture == "noise":
        S = 0.5 + 0.15 * noise
    elif spec.texture == "composite":
        u = np.linspace(-1, 1, n)[None, :] * np.ones((n, 1))        # X, left to right
        v = np.linspace(1, -1, n)[:, None] * np.ones((1, n))        # Y, top row is +Y
        lo, hi = spec.contrast
        S = 0.5 + spec.ramp / 2 * u + (lo + (hi - lo) * (v + 1) / 2) * noise
        yy, xx = np.mgrid[:n, :n]
        for _ in range(spec.blobs):
            cy, cx = rng.uniform(0, n, 2)
            rad = rng.uniform(0.03, 0.07) * n
            S += rng.uniform(-0.15, 0.15) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
    else:
        raise ContractError(f"unknown texture {spec.texture!r}")
    return PlanarScene(np.clip(S, 0.0, 1.0), spec.extent, spec.Z0, spec.f)


# -- raster and metadata I/O -----------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Binary PGM (h, w) or PPM (h, w, 3), 8-bit, maxval 255."""
    a = img if img.dtype == np.uint8 else quantize(img)
    if a.ndim == 2:
        head = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n"
    elif a.ndim == 3 and a.shape[2] == 3:
        head = f"P6\n{a.shape[1]} {a.shape[0]}\n255\n"
    else:
        raise ContractError(f"cannot store image of shape {a.shape}")
    Path(path).write_bytes(head.encode("ascii") + np.ascontiguousarray(a).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 with maxval 255; returns floats in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated raster header")
        tokens.append(buf[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise DatasetError(f"{path}: unsupported raster ({magic}, maxval {maxval})")
    ch = 1 if magic == "P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=pos)
    shape = (h, w) if ch == 1 else (h, w, 3)
    return data.reshape(shape).astype(np.float64) / 255.0


def write_meta(path, meta: dict) -> None:
    lines = [f"{k} = {v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- datasets ----------------------------------------------------------------

@dataclass
class PoseDataset:
    """Ordered (image, pose) records stored under ``root``.

    Poses are camera-to-world: position of the camera centre and rotation
    taking camera axes to world axes.
    """

    root: Path
    records: list[tuple[str, Se3Pose]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        return read_pnm(Path(self.root) / self.records[i][0])

    def images(self) -> np.ndarray:
        """All images as a float array (M, C, H, W)."""
        if not self.records:
            return np.zeros((0, 1, 0, 0))
        arrs = [self.image(i) for i in range(len(self))]
        arrs = [a[None] if a.ndim == 2 else np.moveaxis(a, -1, 0) for a in arrs]
        return np.stack(arrs)

    def positions(self) -> np.ndarray:
        return np.array([p.t for _, p in self.records]).reshape(-1, 3)

    def quaternions(self) -> np.ndarray:
        return np.array([p.q for _, p in self.records]).reshape(-1, 4)

    def write_poses(self) -> None:
        lines = [POSES_HEADER]
        for rel, p in self.records:
            vals = " ".join(f"{v:.17g}" for v in (*p.t, *p.q))
            lines.append(f"{rel} {vals}")
        (Path(self.root) / "poses.txt").write_text("\n".join(lines) + "\n")


@dataclass
class DatasetSpec:
    n_train: int = 200
    n_test: int = 100
    image_size: int = 32
    scene: SceneSpec = field(default_factory=SceneSpec)
    t_range: float = 0.8          # T_X, T_Y uniform in [-t_range, t_range]
    held_out_rotation: bool = True
    train_arc_deg: float = 10.0   # training roll angles in [-arc/2, arc/2]


def sample_motions(rng: np.random.Generator, n: int, spec: DatasetSpec, split: str) -> list[Se2Motion]:
    out = []
    half = math.radians(spec.train_arc_deg) / 2
    for _ in range(n):
        tx, ty = rng.uniform(-spec.t_range, spec.t_range, 2)
        if not spec.held_out_rotation:
            theta = rng.uniform(-math.pi, math.pi)
        elif split == "train":
            theta = rng.uniform(-half, half)
        else:
            theta = rng.uniform(half, 2 * math.pi - half)
        out.append(Se2Motion(theta, (tx, ty), Frame.SCENE))
    return out


def _spec_meta(spec: DatasetSpec, seed: int, split: str, count: int) -> dict:
    sc = spec.scene
    return {
        "format": "epose-v1",
        "frame_convention": "camera_to_world",
        "split": split,
        "count": count,
        "seed": seed,
        "image_size": spec.image_size,
        "scene_extent": sc.extent,
        "f": sc.f,
        "Z0": sc.Z0,
        "texture": sc.texture,
        "scene_grid": sc.grid,
        "blur": sc.blur,
        "ramp": sc.ramp,
        "contrast": f"{sc.contrast[0]},{sc.contrast[1]}",
        "blobs": sc.blobs,
        "t_range": spec.t_range,
        "held_out_rotation": int(spec.held_out_rotation),
        "train_arc_deg": spec.train_arc_deg,
        "n_train": spec.n_train,
        "n_test": spec.n_test,
    }


def scene_spec_from_meta(meta: dict) -> SceneSpec:
    lo, hi = (float(v) for v in meta["contrast"].split(","))
    return SceneSpec(texture=meta["texture"], grid=int(meta["scene_grid"]),
                     extent=float(meta["scene_extent"]), Z0=float(meta["Z0"]),
                     f=float(meta["f"]), blur=float(meta["blur"]),
                     ramp=float(meta["ramp"]), contrast=(lo, hi), blobs=int(meta["blobs"]))


def generate_dataset(spec: DatasetSpec, seed: int, out) -> dict[str, PoseDataset]:
    """Render train and test splits into ``out/train`` and ``out/test``.

    Ground truth is t = (T_X, T_Y, 0) and the roll quaternion about u_z. With
    ``held_out_rotation`` the test rolls come from the complement of the
    training arc. Output is a pure function of (spec, seed).
    """
    out = Path(out)
    scene = make_scene(spec.scene, seed)
    res = (spec.image_size, spec.image_size)
    result = {}
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        rng = np.random.default_rng([seed, 1 if split == "train" else 2])
        root = out / split
        (root / "images").mkdir(parents=True, exist_ok=True)
        ds = PoseDataset(root, [], {k: str(v) for k, v in _spec_meta(spec, seed, split, count).items()})
        for i, m in enumerate(sample_motions(rng, count, spec, split)):
            rel = f"images/{i:06d}.pgm"
            write_pnm(root / rel, render(scene, m, res))
            ds.records.append((rel, Se3Pose.from_se2(m)))
        ds.write_poses()
        write_meta(root / "meta.txt", ds.meta)
        result[split] = ds
    return result


def _parse_pose_line(path, lineno, line) -> tuple[str, Se3Pose]:
    parts = line.split()
    if len(parts) != 8:
        raise DatasetError(f"{path}:{lineno}: expected 8 fields 'rel_path tx ty tz qw qx qy qz', got {len(parts)}")
    try:
        vals = [float(v) for v in parts[1:]]
    except ValueError as e:
        raise DatasetError(f"{path}:{lineno}: {e}") from None
    if not all(math.isfinite(v) for v in vals):
        raise DatasetError(f"{path}:{lineno}: non-finite value")
    q = np.array(vals[3:])
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise DatasetError(f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.9g} is not 1")
    return parts[0], Se3Pose(tuple(vals[:3]), tuple(quat_normalize(q)))


def load_dataset(path) -> PoseDataset:
    """Load and validate a dataset directory holding poses.txt (+ meta.txt)."""
    root = Path(path)
    pose_file = root / "poses.txt"
    if not pose_file.exists():
        raise DatasetError(f"{pose_file}: missing")
    lines = pose_file.read_text().splitlines()
    if not lines or lines[0].strip() != POSES_HEADER:
        raise DatasetError(f"{pose_file}:1: first line must be '{POSES_HEADER}'")
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        rel, pose = _parse_pose_line(pose_file, lineno, s)
        if not (root / rel).exists():
            raise DatasetError(f"{pose_file}:{lineno}: image {rel} not found")
        records.append((rel, pose))
    meta = read_meta(root / "meta.txt") if (root / "meta.txt").exists() else {}
    return PoseDataset(root, records, meta)


def _read_7scenes_pose(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            rows.append((lineno, [float(v) for v in s.split()]))
        except ValueError as e:
            raise DatasetError(f"{path}:{lineno}: {e}") from None
    vals = [v for _, r in rows for v in r]
    if len(vals) != 16:
        line = rows[-1][0] if rows else 1
        raise DatasetError(f"{path}:{line}: expected 16 numbers (4x4 pose), found {len(vals)}")
    M = np.array(vals).reshape(4, 4)
    if not np.all(np.isfinite(M)):
        raise DatasetError(f"{path}: non-finite entry")
    return M


def convert_7scenes(src, dst) -> PoseDataset:
    """Convert ``frame-*.pose.txt`` + ``frame-*.color.{pgm,ppm}`` into the canonical layout."""
    src, dst = Path(src), Path(dst)
    pose_files = sorted(src.glob("*.pose.txt"))
    (dst / "images").mkdir(parents=True, exist_ok=True)
    ds = PoseDataset(dst, [], {"format": "epose-v1", "frame_convention": "camera_to_world",
                               "source": "7scenes", "count": str(len(pose_files))})
    for pf in pose_files:
        stem = pf.name[: -len(".pose.txt")]
        M = _read_7scenes_pose(pf)
        try:
            q = quat_from_matrix(M[:3, :3])
        except ContractError as e:
            raise DatasetError(f"{pf}: {e}") from None
        img = next((p for p in (src / f"{stem}.color.pgm", src / f"{stem}.color.ppm") if p.exists()), None)
        if img is None:
            raise DatasetError(f"{pf}: no matching {stem}.color.pgm/.ppm image")
        rel = f"images/{img.name}"
        shutil.copyfile(img, dst / rel)
        ds.records.append((rel, Se3Pose(tuple(M[:3, 3]), tuple(q))))
    ds.write_poses()
    write_meta(dst / "meta.txt", ds.meta)
    return ds


def dataset_spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)
