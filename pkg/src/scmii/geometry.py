"""Rigid-body transforms in homogeneous coordinates.

``RigidTransform`` maps points from a sensor's local frame into some target
frame: ``p_target = R @ p_local + t``. Poses use intrinsic Z-Y-X Euler angles,
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Pose6DoF:
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError(f"non-finite pose component in {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, v) -> "Pose6DoF":
        v = [float(x) for x in v]
        if len(v) != 6:
            raise ValueError(f"pose needs 6 parameters, got {len(v)}")
        return cls(*v)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"transform must be 4x4, got {m.shape}")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    def is_valid(self, atol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            bool(np.all(self.matrix[3] == [0.0, 0.0, 0.0, 1.0]))
            and np.allclose(r.T @ r, np.eye(3), rtol=0, atol=atol)
            and abs(np.linalg.det(r) - 1.0) <= atol
        )

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.matrix, other.matrix))

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the columns of a near-rotation matrix; keeps det = +1."""
    r = np.asarray(r, dtype=np.float64)
    c0 = r[:, 0] / np.linalg.norm(r[:, 0])
    c1 = r[:, 1] - (c0 @ r[:, 1]) * c0
    c1 /= np.linalg.norm(c1)
    c2 = np.cross(c0, c1)
    return np.column_stack([c0, c1, c2])


def from_pose(p: Pose6DoF) -> RigidTransform:
    r = orthonormalize(euler_rotation(p.roll, p.pitch, p.yaw))
    return RigidTransform.from_rt(r, [p.tx, p.ty, p.tz])


def to_pose(t: RigidTransform) -> Pose6DoF:
    r = t.rotation
    pitch = -math.asin(max(-1.0, min(1.0, r[2, 0])))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    tx, ty, tz = (float(v) for v in t.translation)
    return Pose6DoF(tx, ty, tz, roll, pitch, yaw)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a @ b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    return RigidTransform.from_rt(r, t)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform.from_rt(rt, -rt @ t.translation)


def apply_point(t: RigidTransform, p) -> np.ndarray:
    return apply_points(t, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def apply_points(t: RigidTransform, pts) -> np.ndarray:
    """Vectorized ``apply_point`` over an (N, 3) array.

    Written out per component so single-point and batched calls round identically.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    r, tr = t.rotation, t.translation
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return np.column_stack([r[i, 0] * x + r[i, 1] * y + r[i, 2] * z + tr[i] for i in range(3)])


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(math.acos(max(-1.0, min(1.0, c))))


def transform_error(estimate: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(translation error in m, rotation error in rad) between two transforms."""
    delta = compose(invert(truth), estimate)
    return float(np.linalg.norm(estimate.translation - truth.translation)), rotation_angle(delta.rotation)


# Calibration file:
#   {"reference": <device id>, "transforms": {"<device id>": [16 floats, row-major]}}
# The reference device maps to identity and is always present in "transforms".

def save_calibration(path, transforms: Mapping[int, RigidTransform], reference: int) -> None:
    doc = {
        "reference": int(reference),
        "transforms": {
            str(int(k)): [float(v) for v in t.matrix.ravel()]
            for k, t in sorted(transforms.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_calibration(path) -> tuple[dict[int, RigidTransform], int]:
    doc = json.loads(Path(path).read_text())
    try:
        reference = int(doc["reference"])
        raw = doc["transforms"]
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: calibration file needs 'reference' and 'transforms'") from e
    transforms = {}
    for key, values in raw.items():
        if len(values) != 16:
            raise ValueError(f"{path}: transforms.{key} must have 16 numbers, got {len(values)}")
        t = RigidTransform(np.array(values, dtype=np.float64).reshape(4, 4))
        if not t.is_valid(atol=1e-6):
            raise ValueError(f"{path}: transforms.{key} is not a rigid transform")
        transforms[int(key)] = t
    transforms.setdefault(reference, RigidTransform.identity())
    return transforms, reference
