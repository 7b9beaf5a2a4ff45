"""Quaternion / rigid-transform helpers and the 7-value pose encoding.

Conventions
-----------
- Quaternions are (qw, qx, qy, qz), Hamilton convention.
- Canonical sign: qw >= 0; when qw == 0 the first nonzero of (qx, qy, qz) is
  made positive. q and -q are the same rotation.
- A node's local frame: +x is the optical (boresight) axis, +y points left,
  +z points up. ``R`` maps local vectors into the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid quaternion, pose or arena input."""


def canonicalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if not np.all(np.isfinite(q)):
        raise GeometryError(f"non-finite quaternion {q}")
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise GeometryError("zero-norm quaternion")
    q = q / n
    for c in q:
        if c > 0:
            break
        if c < 0:
            q = -q
            break
    return q


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise GeometryError(f"quaternion is not unit norm: |q|={np.linalg.norm(q):.3g}")
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_to_axis_angle(q) -> tuple[np.ndarray, float]:
    q = canonicalize_quaternion(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-15:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return q[1:] / s, 2.0 * np.arctan2(s, q[0])


def quat_from_yaw_pitch_roll(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Intrinsic z-y'-x'' rotation. Positive pitch tilts the boresight downward."""
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    return canonicalize_quaternion(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ]
    )


def look_at_quaternion(eye, target) -> np.ndarray:
    """Zero-roll orientation whose boresight (+x) points from ``eye`` to ``target``."""
    d = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    if np.linalg.norm(d) < 1e-9:
        raise GeometryError("eye and target coincide")
    yaw = np.arctan2(d[1], d[0])
    pitch = -np.arctan2(d[2], np.hypot(d[0], d[1]))
    return quat_from_yaw_pitch_roll(yaw, pitch)


@dataclass(frozen=True)
class NodePose:
    """Rigid pose of a sensor node in the world frame.

    The quaternion is normalized and sign-canonicalized on construction.
    """

    quaternion: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quaternion", canonicalize_quaternion(self.quaternion))
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise GeometryError(f"non-finite position {p}")
        object.__setattr__(self, "position", p)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def to_dict(self) -> dict:
        return {
            "quaternion": [float(v) for v in self.quaternion],
            "position": [float(v) for v in self.position],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodePose":
        return cls(np.array(d["quaternion"]), np.array(d["position"]))

    def __eq__(self, other):
        if not isinstance(other, NodePose):
            return NotImplemented
        return np.array_equal(self.quaternion, other.quaternion) and np.array_equal(
            self.position, other.position
        )

    def __hash__(self):
        return hash((self.quaternion.tobytes(), self.position.tobytes()))


@dataclass(frozen=True)
class Arena:
    x_extent: float = 7.0
    y_extent: float = 5.0
    z_extent: float = 2.5
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if min(self.x_extent, self.y_extent, self.z_extent) <= 0:
            raise GeometryError("arena extents must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.x_extent, self.y_extent, self.z_extent])

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.extents

    @property
    def diagonal(self) -> float:
        """Floor-plane diagonal in meters."""
        return float(np.hypot(self.x_extent, self.y_extent))

    def contains(self, p, tol: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    def to_dict(self) -> dict:
        return {
            "x_extent": self.x_extent,
            "y_extent": self.y_extent,
            "z_extent": self.z_extent,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Arena":
        return cls(d["x_extent"], d["y_extent"], d["z_extent"], tuple(d["origin"]))


def world_to_local(pose: NodePose, p_world) -> np.ndarray:
    p = np.asarray(p_world, dtype=np.float64)
    return (p - pose.position) @ pose.rotation


def local_to_world(pose: NodePose, p_local) -> np.ndarray:
    p = np.asarray(p_local, dtype=np.float64)
    return p @ pose.rotation.T + pose.position


def encode_pose(pose: NodePose, arena: Arena) -> np.ndarray:
    """7-vector: canonical quaternion followed by arena-normalized position."""
    if not arena.contains(pose.position):
        raise GeometryError(f"node position {pose.position} outside arena")
    pos = (pose.position - arena.lower) / arena.extents
    return np.concatenate([pose.quaternion, np.clip(pos, 0.0, 1.0)])
