"""Planar rigid motions, camera poses and quaternion helpers.

A planar camera motion (theta, t) moves a scene point p to R(theta)^T (p - t).
The same motion expressed in image units uses t * f / Z0. Motions carry a
frame tag so scene-unit and pixel-unit translations are never mixed.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

__all__ = [
    "Frame", "Se2Motion", "Se3Pose", "CameraIntrinsics", "normalize_angle",
    "rot2", "se2_compose", "se2_inverse", "se2_identity", "scene_action",
    "motion_to_image", "image_point_action", "quat_from_matrix",
    "quat_to_matrix", "quat_angle_deg", "quat_normalize", "quat_from_yaw",
    "quat_multiply", "quat_from_axis_angle", "project_to_rotation",
]


class Frame(enum.Enum):
    SCENE = "scene"
    IMAGE = "image"


def normalize_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]; exact ties go to +pi."""
    a = math.remainder(theta, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    return a


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Se2Motion:
    theta: float
    t: tuple[float, float]
    frame: Frame = Frame.SCENE

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))
        tx, ty = (float(v) for v in self.t)
        object.__setattr__(self, "t", (tx, ty))
        if not isinstance(self.frame, Frame):
            raise ContractError(f"frame tag must be a Frame, got {self.frame!r}")

    @property
    def R(self) -> np.ndarray:
        return rot2(self.theta)

    @property
    def tvec(self) -> np.ndarray:
        return np.array(self.t)

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 form [[R, t], [0, 1]]."""
        m = np.eye(3)
        m[:2, :2] = self.R
        m[:2, 2] = self.t
        return m


def se2_identity(frame: Frame = Frame.SCENE) -> Se2Motion:
    return Se2Motion(0.0, (0.0, 0.0), frame)


def se2_compose(m1: Se2Motion, m2: Se2Motion) -> Se2Motion:
    """Motion m1 followed by motion m2 of the camera: (theta1+theta2, t1 + R1 t2)."""
    if m1.frame is not m2.frame:
        raise ContractError(f"cannot compose {m1.frame.value} and {m2.frame.value} motions")
    t = m1.tvec + m1.R @ m2.tvec
    return Se2Motion(m1.theta + m2.theta, (t[0], t[1]), m1.frame)


def se2_inverse(m: Se2Motion) -> Se2Motion:
    t = -(m.R.T @ m.tvec)
    return Se2Motion(-m.theta, (t[0], t[1]), m.frame)


def scene_action(m: Se2Motion, p) -> np.ndarray:
    """Coordinates of scene point p after the camera moves by m."""
    if m.frame is not Frame.SCENE:
        raise ContractError("scene_action needs a SCENE-frame motion")
    p = np.asarray(p, dtype=float)
    out = p.copy()
    out[:2] = m.R.T @ (p[:2] - m.tvec)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    Z0: float

    def __post_init__(self):
        if not (self.f > 0 and self.Z0 > 0):
            raise ContractError(f"need f > 0 and Z0 > 0, got f={self.f}, Z0={self.Z0}")


def motion_to_image(m: Se2Motion, cam: CameraIntrinsics) -> Se2Motion:
    if m.frame is not Frame.SCENE:
        raise ContractError("motion_to_image needs a SCENE-frame motion")
    k = cam.f / cam.Z0
    return Se2Motion(m.theta, (k * m.t[0], k * m.t[1]), Frame.IMAGE)


def image_point_action(m: Se2Motion, p) -> np.ndarray:
    """Image point p after the camera motion m: R^T (p - t), with t in pixels."""
    if m.frame is not Frame.IMAGE:
        raise ContractError("image_point_action needs an IMAGE-frame motion")
    p = np.asarray(p, dtype=float)
    return (p - m.tvec) @ m.R  # row-vector form of R^T (p - t), works on (..., 2)


# -- quaternions (w, x, y, z) ---------------------------------------------

def quat_normalize(q) -> np.ndarray:
    """Unit norm, w >= 0; if w == 0 the first nonzero of x, y, z is made positive."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0:
        raise ContractError("zero quaternion")
    q = q / n
    for c in q:
        if c != 0:
            return -q if c < 0 else q
    return q


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_from_yaw(theta: float) -> np.ndarray:
    """Rotation by theta about the optical axis u_z."""
    return quat_normalize([math.cos(theta / 2), 0.0, 0.0, math.sin(theta / 2)])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project_to_rotation(R) -> np.ndarray:
    """Nearest rotation matrix in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def quat_from_matrix(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ContractError(f"expected a finite 3x3 matrix, got shape {R.shape}")
    dev = np.max(np.abs(R.T @ R - np.eye(3)))
    if dev > tol or np.linalg.det(R) <= 0:
        raise ContractError(f"not a rotation matrix (orthonormality error {dev:.3g})")
    R = project_to_rotation(R)
    # Shepperd: branch on the largest of the four squared components
    tr = np.trace(R)
    d = [tr, R[0, 0], R[1, 1], R[2, 2]]
    i = int(np.argmax(d))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_angle_deg(q1, q2) -> float:
    """Geodesic angle between the rotations of q1 and q2, sign-insensitive.

    Evaluated as 4*atan2(|q1 - s q2|, |q1 + s q2|), which equals
    2*acos(|<q1, q2>|) for unit inputs but stays accurate near zero.
    """
    a = np.asarray(q1, dtype=float)
    b = np.asarray(q2, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    if np.dot(a, b) < 0:
        b = -b
    return math.degrees(4.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b)))


@dataclass(frozen=True)
class Se3Pose:
    t: tuple[float, float, float]
    q: tuple[float, float, float, float]

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        if len(t) != 3:
            raise ContractError("position must have 3 entries")
        q = np.asarray(self.q, dtype=float)
        if q.shape != (4,):
            raise ContractError("quaternion must have 4 entries")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", tuple(float(v) for v in quat_normalize(q)))

    @classmethod
    def from_se2(cls, m: Se2Motion) -> "Se3Pose":
        """Camera pose of a planar motion: position (T_X, T_Y, 0), roll about u_z."""
        if m.frame is not Frame.SCENE:
            raise ContractError("poses are built from SCENE-frame motions")
        return cls((m.t[0], m.t[1], 0.0), tuple(quat_from_yaw(m.theta)))

    @property
    def tvec(self) -> np.ndarray:
        return np.array(self.t)

    @property
    def qvec(self) -> np.ndarray:
        return np.array(self.q)
