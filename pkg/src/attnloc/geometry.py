"""Pose algebra, pinhole projection and bilinear descriptor sampling.

Conventions used everywhere in the package:

* world frame is right-handed with z up;
* vehicle frame is x forward, y left, z up;
* camera frame is x right, y down, z along the optical axis;
* heading (yaw) is measured counter-clockwise from world +x;
* orientations are world-from-body unit quaternions ``(w, x, y, z)``.

A 3-DoF search offset ``(dx, dy, dpsi)`` is an SE(2) element composed on the
right of the anchor's horizontal frame: translate by ``(dx, dy)`` in the
anchor's heading frame, then yaw by ``dpsi`` about the world vertical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from attnloc.features import DenseFeatureLevel

DEPTH_MIN = 0.1  # meters; points closer than this are not projected

_QUAT_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (bad rotation, out-of-range sample, ...)."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    r = math.remainder(float(angle), 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    r = np.remainder(np.asarray(angles, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    return np.where(r <= -math.pi, r + 2.0 * math.pi, r)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        S = math.sqrt(tr + 1.0) * 2
        q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
    elif R[1, 1] > R[2, 2]:
        S = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
    else:
        S = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid 6-DoF pose: world-from-body rotation plus position in meters."""

    position: np.ndarray
    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        pos = _frozen(self.position).reshape(3)
        q = _frozen(self.quaternion).reshape(4)
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(q)):
            raise GeometryError("pose components must be finite")
        if abs(float(np.linalg.norm(q)) - 1.0) > _QUAT_TOL:
            raise GeometryError(f"quaternion norm {float(np.linalg.norm(q))!r} is not 1")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls) -> Pose3:
        return cls(np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, position) -> Pose3:
        return cls(position, matrix_to_quat(R))

    @classmethod
    def from_xyz_rpy(cls, x, y, z, roll=0.0, pitch=0.0, yaw=0.0) -> Pose3:
        R = rot_z(yaw) @ _rot_y(pitch) @ _rot_x(roll)
        return cls.from_matrix(R, [x, y, z])

    @property
    def rotation(self) -> np.ndarray:
        R = self.__dict__.get("_R")
        if R is None:
            R = quat_to_matrix(self.quaternion)
            R.setflags(write=False)
            object.__setattr__(self, "_R", R)
        return R

    @property
    def heading(self) -> float:
        R = self.rotation
        return math.atan2(R[1, 0], R[0, 0])

    def compose(self, other: Pose3) -> Pose3:
        """``self * other`` (apply ``other`` in this pose's body frame)."""
        R = self.rotation @ other.rotation
        return Pose3.from_matrix(R, self.rotation @ other.position + self.position)

    def inverse(self) -> Pose3:
        Rt = self.rotation.T
        return Pose3.from_matrix(Rt, -Rt @ self.position)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def transform_to_body(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into this pose's body frame."""
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose3):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.quaternion, other.quaternion
        )

    def __hash__(self):
        return hash((self.position.tobytes(), self.quaternion.tobytes()))

    def __repr__(self):
        x, y, z = self.position
        return f"Pose3(pos=({x:.4f}, {y:.4f}, {z:.4f}), yaw={math.degrees(self.heading):.4f}deg)"


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class PoseSE2Offset:
    """Horizontal search offset: meters along/left of the anchor heading, yaw in radians."""

    dx: float = 0.0
    dy: float = 0.0
    dpsi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dpsi", wrap_angle(self.dpsi))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dpsi])

    def inverse(self) -> PoseSE2Offset:
        """Group inverse, so that applying ``o`` then ``o.inverse()`` is the identity."""
        c, s = math.cos(self.dpsi), math.sin(self.dpsi)
        return PoseSE2Offset(-(c * self.dx + s * self.dy), -(-s * self.dx + c * self.dy), -self.dpsi)

    def compose(self, other: PoseSE2Offset) -> PoseSE2Offset:
        c, s = math.cos(self.dpsi), math.sin(self.dpsi)
        return PoseSE2Offset(
            self.dx + c * other.dx - s * other.dy,
            self.dy + s * other.dx + c * other.dy,
            self.dpsi + other.dpsi,
        )


def apply_offset(anchor: Pose3, offset: PoseSE2Offset) -> Pose3:
    """Perturb ``anchor`` by a horizontal offset expressed in its heading frame.

    The translation ``(dx, dy, 0)`` is rotated by the anchor heading only, so
    roll and pitch never leak into the horizontal displacement. The yaw is a
    left-multiplied rotation about world z, leaving roll, pitch and height
    untouched.
    """
    if offset.dx == 0.0 and offset.dy == 0.0 and offset.dpsi == 0.0:
        return anchor
    psi = anchor.heading
    c, s = math.cos(psi), math.sin(psi)
    position = anchor.position + np.array([c * offset.dx - s * offset.dy, s * offset.dx + c * offset.dy, 0.0])
    if offset.dpsi == 0.0:
        return Pose3(position, anchor.quaternion)
    half = 0.5 * offset.dpsi
    qz = np.array([math.cos(half), 0.0, 0.0, math.sin(half)])
    q = _quat_mul(qz, anchor.quaternion)
    q /= np.linalg.norm(q)
    return Pose3(position, -q if q[0] < 0 else q)


def offset_between(anchor: Pose3, target: Pose3) -> PoseSE2Offset:
    """The horizontal offset ``o`` with ``apply_offset(anchor, o)`` matching ``target`` in x, y, yaw."""
    psi = anchor.heading
    c, s = math.cos(psi), math.sin(psi)
    d = target.position - anchor.position
    return PoseSE2Offset(c * d[0] + s * d[1], -s * d[0] + c * d[1], target.heading - psi)


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


# camera-from-vehicle axes for a forward-looking camera: x right, y down, z forward
FORWARD_CAMERA_ROTATION = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    """Calibrated pinhole camera; ``extrinsic`` is the vehicle-from-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose3 = field(default_factory=Pose3.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @classmethod
    def forward_facing(
        cls, fx, fy, cx, cy, width, height, mount=(0.0, 0.0, 1.5), yaw: float = 0.0
    ) -> CameraModel:
        """Camera looking along vehicle +x (rotated by ``yaw``), mounted at ``mount``."""
        R = rot_z(yaw) @ FORWARD_CAMERA_ROTATION
        return cls(fx, fy, cx, cy, int(width), int(height), Pose3.from_matrix(R, mount))

    def intrinsics_at(self, scale: int) -> tuple[float, float, float, float]:
        """Intrinsics in level pixels, where level coordinate = image pixel / scale."""
        return self.fx / scale, self.fy / scale, self.cx / scale, self.cy / scale


def project_point(p, camera_pose: Pose3, cam: CameraModel) -> tuple[float, float, float] | None:
    """Project a world point through ``camera_pose`` (vehicle pose) and ``cam``.

    Returns ``(u, v, depth)`` in image pixels and meters, or ``None`` if the
    point is closer than :data:`DEPTH_MIN` or lands outside the image.
    """
    sensor = camera_pose.compose(cam.extrinsic)
    X, Y, Z = sensor.transform_to_body(np.asarray(p, dtype=np.float64))
    if Z <= DEPTH_MIN:
        return None
    u = cam.fx * X / Z + cam.cx
    v = cam.fy * Y / Z + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return float(u), float(v), float(Z)


def project_points(points: np.ndarray, camera_pose: Pose3, cam: CameraModel):
    """Vectorised projection without bounds culling.

    Returns ``(uv, depth)`` with ``uv`` of shape (N, 2) in image pixels. Rows
    with ``depth <= DEPTH_MIN`` have undefined ``uv``.
    """
    sensor = camera_pose.compose(cam.extrinsic)
    pc = sensor.transform_to_body(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    safe = np.where(z > DEPTH_MIN, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / safe + cam.cx, cam.fy * pc[:, 1] / safe + cam.cy], axis=1)
    return uv, z


def bilinear_sample(level: DenseFeatureLevel, u: float, v: float) -> np.ndarray:
    """Bilinearly interpolated descriptor at level coordinates ``(u, v)``."""
    h, w = level.height_s, level.width_s
    if not (0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        raise GeometryError(f"sample ({u}, {v}) outside [0, {w - 1}] x [0, {h - 1}]")
    return bilinear_sample_many(level.descriptors, np.array([u]), np.array([v]))[0]


def bilinear_sample_many(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``grid`` (H, W[, C]) at in-range coordinates; no bounds checking.

    Integer coordinates return the stored cell exactly. The last row/column is
    reached with a fractional weight of 1 on the upper neighbour.
    """
    h, w = grid.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i0 = np.clip(np.floor(u).astype(np.intp), 0, max(w - 2, 0))
    j0 = np.clip(np.floor(v).astype(np.intp), 0, max(h - 2, 0))
    a = u - i0
    b = v - j0
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    if grid.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    g = grid.astype(np.float64, copy=False)
    return (
        (1 - a) * (1 - b) * g[j0, i0]
        + a * (1 - b) * g[j0, i1]
        + (1 - a) * b * g[j1, i0]
        + a * b * g[j1, i1]
    )
