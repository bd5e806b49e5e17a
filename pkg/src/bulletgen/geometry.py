"""Rigid transforms, quaternions, and pinhole camera math.

Conventions used everywhere in the engine:
  * quaternions are (w, x, y, z); Quat.normalized() canonicalizes w >= 0
  * camera pose is stored as world_from_camera; the camera looks down +z of
    its own frame, x right, y down
  * image coordinates: u right, v down, origin at the top-left pixel center
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

NEAR_PLANE = 1e-4


# ---------------------------------------------------------------------------
# vectorized quaternion math (arrays of shape (..., 4), no sign canonicalization
# so the render path stays smooth: R(q) == R(-q))

def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(n, 1e-300)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) for unit quaternions (..., 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_to_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq as (..., 3, 3, 4), valid for unit q (R quadratic in components)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    jac = np.empty(q.shape[:-1] + (3, 3, 4), dtype=q.dtype)
    jac[..., 0, 0, :] = np.stack([zero, zero, -4 * y, -4 * z], axis=-1)
    jac[..., 0, 1, :] = np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1)
    jac[..., 0, 2, :] = np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1)
    jac[..., 1, 0, :] = np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1)
    jac[..., 1, 1, :] = np.stack([zero, -4 * x, zero, -4 * z], axis=-1)
    jac[..., 1, 2, :] = np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1)
    jac[..., 2, 0, :] = np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1)
    jac[..., 2, 1, :] = np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1)
    jac[..., 2, 2, :] = np.stack([zero, -4 * x, -4 * y, zero], axis=-1)
    return jac


def quat_normalize_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. q/|q| back to the raw quaternion."""
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    n = np.maximum(n, 1e-300)
    u = q_raw / n
    dot = np.sum(u * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - u * dot) / n


def quat_mul_left_matrix(a: np.ndarray) -> np.ndarray:
    """L(a) with a (x) b == L(a) @ b, shape (..., 4, 4)."""
    w, x, y, z = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    m = np.empty(a.shape[:-1] + (4, 4), dtype=a.dtype)
    m[..., 0, :] = np.stack([w, -x, -y, -z], axis=-1)
    m[..., 1, :] = np.stack([x, w, -z, y], axis=-1)
    m[..., 2, :] = np.stack([y, z, w, -x], axis=-1)
    m[..., 3, :] = np.stack([z, -y, x, w], axis=-1)
    return m


def quat_mul_right_matrix(b: np.ndarray) -> np.ndarray:
    """R(b) with a (x) b == R(b) @ a, shape (..., 4, 4)."""
    w, x, y, z = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    m = np.empty(b.shape[:-1] + (4, 4), dtype=b.dtype)
    m[..., 0, :] = np.stack([w, -x, -y, -z], axis=-1)
    m[..., 1, :] = np.stack([x, w, z, -y], axis=-1)
    m[..., 2, :] = np.stack([y, -z, w, x], axis=-1)
    m[..., 3, :] = np.stack([z, y, -x, w], axis=-1)
    return m


def quat_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    """Exponential map from rotation vectors (..., 3) to unit quaternions."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(t/2)/t via series below 1e-8 to avoid 0/0
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.maximum(theta, 1e-300))
    w = np.cos(half)
    return np.concatenate([w, omega * k], axis=-1)


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_matrix(quat_normalize(q)), p)


# ---------------------------------------------------------------------------
# scalar-ish public types


@dataclass
class Quat:
    """Unit-intent quaternion (w, x, y, z)."""

    w: float
    x: float
    y: float
    z: float

    @staticmethod
    def identity() -> "Quat":
        return Quat(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(a) -> "Quat":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return Quat(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @staticmethod
    def from_axis_angle(omega) -> "Quat":
        return Quat.from_array(quat_from_axis_angle(np.asarray(omega, dtype=np.float64)))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Quat":
        """Shepperd's method; returns the canonical (w >= 0) quaternion."""
        m = np.asarray(m, dtype=np.float64)
        t = np.trace(m)
        if t > 0:
            s = math.sqrt(t + 1.0) * 2
            q = np.array([0.25 * s,
                          (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s,
                          (m[1, 0] - m[0, 1]) / s])
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array([(m[2, 1] - m[1, 2]) / s,
                          0.25 * s,
                          (m[0, 1] + m[1, 0]) / s,
                          (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array([(m[0, 2] - m[2, 0]) / s,
                          (m[0, 1] + m[1, 0]) / s,
                          0.25 * s,
                          (m[1, 2] + m[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array([(m[1, 0] - m[0, 1]) / s,
                          (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s,
                          0.25 * s])
        return Quat.from_array(q).normalized()

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quat":
        a = self.as_array()
        n = np.linalg.norm(a)
        if n <= 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        a = a / n
        if a[0] < 0:
            a = -a
        return Quat.from_array(a)

    def conjugate(self) -> "Quat":
        return Quat(self.w, -self.x, -self.y, -self.z)

    def multiply(self, other: "Quat") -> "Quat":
        return Quat.from_array(quat_multiply(self.as_array(), other.as_array()))

    def __mul__(self, other: "Quat") -> "Quat":
        return self.multiply(other)

    def rotate(self, p) -> np.ndarray:
        return quat_rotate(self.as_array(), np.asarray(p, dtype=np.float64))

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix(quat_normalize(self.as_array()))


@dataclass
class SE3:
    """Rigid transform: x -> R(rotation) x + translation."""

    rotation: Quat = field(default_factory=Quat.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "SE3":
        return SE3(Quat.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "SE3":
        m = np.asarray(m, dtype=np.float64)
        return SE3(Quat.from_matrix(m[:3, :3]), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.normalized().to_matrix()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "SE3":
        qinv = self.rotation.normalized().conjugate()
        return SE3(qinv, -qinv.rotate(self.translation))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.rotation.rotate(p) + self.translation

    def compose(self, other: "SE3") -> "SE3":
        return se3_compose(self, other)


def se3_compose(a: SE3, b: SE3) -> SE3:
    """a then-applied-after b: (a o b)(x) = a(b(x))."""
    q = (a.rotation.normalized() * b.rotation.normalized()).normalized()
    t = a.rotation.rotate(b.translation) + a.translation
    return SE3(q, t)


def se3_apply(t: SE3, p) -> np.ndarray:
    return t.apply(p)


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass
class Camera:
    """Posed pinhole camera; pose maps camera frame into world."""

    pose: SE3
    intrinsics: Intrinsics
    time: int = 1

    def world_to_camera(self, p_world: np.ndarray) -> np.ndarray:
        inv = self.pose.inverse()
        return inv.apply(p_world)

    def center(self) -> np.ndarray:
        return self.pose.translation.copy()

    def forward(self) -> np.ndarray:
        # camera +z expressed in world
        return self.pose.rotation.rotate(np.array([0.0, 0.0, 1.0]))


def project(cam: Camera, p_world) -> np.ndarray:
    """Project world points to (u, v, depth).

    Accepts a single (3,) point or an (N, 3) batch; raises BehindCamera when
    any point has camera-frame z <= 1e-8.
    """
    p = np.asarray(p_world, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    pc = cam.world_to_camera(p)
    z = pc[:, 2]
    if np.any(z <= 1e-8):
        raise BehindCamera(f"point depth {z.min():.3g} <= 1e-8")
    k = cam.intrinsics
    u = k.fx * pc[:, 0] / z + k.cx
    v = k.fy * pc[:, 1] / z + k.cy
    out = np.stack([u, v, z], axis=-1)
    return out[0] if single else out


def backproject(cam: Camera, u, v, depth) -> np.ndarray:
    """Lift pixel coordinates with depth back to world points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0.0):
        raise NonPositiveDepth(f"depth {d.min():.3g} <= 0")
    k = cam.intrinsics
    x = (u - k.cx) / k.fx * d
    y = (v - k.cy) / k.fy * d
    pc = np.stack(np.broadcast_arrays(x, y, d), axis=-1)
    return cam.pose.apply(pc)


def look_at(position, target, up=(0.0, -1.0, 0.0)) -> SE3:
    """world_from_camera pose placing the camera at position, +z toward target.

    up is the world-space up direction; with the y-down image convention a
    y-down world uses up = (0, -1, 0).
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - position
    zn = np.linalg.norm(z)
    if zn < 1e-12:
        raise ValueError("look_at target coincides with position")
    z = z / zn
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-12:
        # gaze parallel to up; pick any orthogonal right vector
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        xn = np.linalg.norm(x)
        if xn < 1e-12:
            x = np.cross(z, np.array([0.0, 0.0, 1.0]))
            xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return SE3(Quat.from_matrix(rot), position.copy())


def camera_tangent_apply(pose: SE3, delta: np.ndarray) -> SE3:
    """Left-increment a pose by a 6-vector (omega, u): R <- R(omega) R, t <- t + u."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    dq = Quat.from_axis_angle(delta[:3])
    q = (dq * pose.rotation.normalized()).normalized()
    return SE3(q, pose.translation + delta[3:])
