"""Point clouds, file I/O and a synthetic ray-cast scene generator.

The generator stands in for a real infrastructure dataset: axis-aligned
cuboids on a flat ground plane (z = 0 in the world frame), observed by
several LiDARs with a regular azimuth/elevation beam lattice.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose6DoF, RigidTransform, apply_points, from_pose, invert


class CloudFormatError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64, copy=True).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError(f"intensity has {len(inten)} values for {len(pts)} points")
            inten.setflags(write=False)
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.intensity is None) != (other.intensity is None):
            return False
        same_i = self.intensity is None or np.array_equal(self.intensity, other.intensity)
        return bool(np.array_equal(self.points, other.points)) and same_i

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def merge_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    if not clouds:
        return PointCloud.empty()
    return PointCloud(np.concatenate([c.points for c in clouds]))


def voxel_downsample(c: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied ``voxel``-sized cube by their centroid."""
    if len(c) == 0:
        return c
    idx = np.floor(c.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, c.points)
    return PointCloud(sums / counts[:, None])


def transform_cloud(c: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(apply_points(t, c.points), c.intensity)


# --- file I/O -------------------------------------------------------------

def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        return fmt
    return "xyz-binary" if path.suffix in (".bin", ".xyz") else "csv"


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read a ``csv`` (``x,y,z[,i]`` rows) or ``xyz-binary`` cloud."""
    path = Path(path)
    fmt = _detect_format(path, fmt)
    data = path.read_bytes()
    if fmt == "csv":
        return _parse_csv(data.decode("utf-8"), path)
    if fmt == "xyz-binary":
        return _parse_binary(data, path)
    raise ValueError(f"unknown cloud format {fmt!r}")


def _parse_csv(text: str, path: Path) -> PointCloud:
    pts, inten = [], []
    with_i = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if len(fields) not in (3, 4):
            raise CloudFormatError(f"{path}: line {lineno}: expected 3 or 4 fields, got {len(fields)}")
        if with_i is None:
            with_i = len(fields) == 4
        elif with_i != (len(fields) == 4):
            raise CloudFormatError(f"{path}: line {lineno}: inconsistent column count")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise CloudFormatError(f"{path}: line {lineno}: {e}") from None
        if not all(math.isfinite(v) for v in vals):
            raise CloudFormatError(f"{path}: line {lineno}: non-finite value")
        pts.append(vals[:3])
        if with_i:
            inten.append(vals[3])
    if not pts:
        return PointCloud.empty()
    return PointCloud(np.array(pts), np.array(inten) if with_i else None)


def _parse_binary(data: bytes, path: Path) -> PointCloud:
    if len(data) == 0:
        return PointCloud.empty()
    if len(data) < 4:
        raise CloudFormatError(f"{path}: byte 0: truncated header ({len(data)} bytes)")
    (count,) = struct.unpack_from("<I", data, 0)
    need = 4 + 12 * count
    if len(data) < need:
        raise CloudFormatError(
            f"{path}: byte {len(data)}: truncated payload, header declares {count} points ({need} bytes)"
        )
    if len(data) > need:
        raise CloudFormatError(f"{path}: byte {need}: {len(data) - need} trailing bytes")
    pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=4).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0][0])
        raise CloudFormatError(f"{path}: byte {4 + 12 * bad}: non-finite coordinate")
    return PointCloud(pts.astype(np.float64))


def save_cloud(c: PointCloud, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _detect_format(path, fmt)
    if fmt == "csv":
        rows = c.points if c.intensity is None else np.column_stack([c.points, c.intensity])
        text = "\n".join(",".join(f"{v:.17g}" for v in row) for row in rows)
        path.write_text(text + ("\n" if len(rows) else ""))
    elif fmt == "xyz-binary":
        path.write_bytes(struct.pack("<I", len(c)) + c.points.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")


# --- synthetic scenes -----------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned cuboid. ``center``/``size`` in meters."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box sizes must be positive, got {self.size}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d) -> "Box":
        return cls(tuple(map(float, d["center"])), tuple(map(float, d["size"])), int(d.get("class_id", 0)))


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple[float, float, float, float] = (-30.0, 30.0, -30.0, 30.0)  # xmin, xmax, ymin, ymax
    object_count: tuple[int, int] = (5, 15)
    length_range: tuple[float, float] = (3.5, 5.0)
    width_range: tuple[float, float] = (1.6, 2.2)
    height_range: tuple[float, float] = (1.4, 2.0)
    sensors: tuple[Pose6DoF, ...] = (
        Pose6DoF(-8.0, -8.0, 4.0, 0.0, 0.0, 0.0),
        Pose6DoF(9.0, 7.0, 4.0, 0.0, 0.0, math.radians(200.0)),
    )
    azimuth_step: float = math.radians(0.4)
    elevation_step: float = math.radians(1.0)
    azimuth_span: tuple[float, float] = (-math.pi, math.pi)
    elevation_span: tuple[float, float] = (math.radians(-30.0), math.radians(2.0))
    max_range: float = 60.0
    range_noise: float = 0.02
    ground: bool = True
    sensor_clearance: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.azimuth_step <= 0 or self.elevation_step <= 0:
            raise ValueError("angular resolutions must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not self.sensors:
            raise ValueError("scene needs at least one sensor")
        if self.range_noise < 0:
            raise ValueError("range_noise must be >= 0")
        if self.object_count[0] < 0 or self.object_count[0] > self.object_count[1]:
            raise ValueError(f"bad object_count range {self.object_count}")


@dataclass(frozen=True)
class GroundTruth:
    boxes: tuple[Box, ...]
    extrinsics: tuple[RigidTransform, ...]  # sensor-local -> world

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "extrinsics": [[float(v) for v in t.matrix.ravel()] for t in self.extrinsics],
        }

    @classmethod
    def from_dict(cls, d) -> "GroundTruth":
        return cls(
            tuple(Box.from_dict(b) for b in d["boxes"]),
            tuple(RigidTransform(np.array(m, dtype=np.float64).reshape(4, 4)) for m in d["extrinsics"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))


def place_boxes(spec: SceneSpec, rng: np.random.Generator, max_attempts: int = 1000) -> list[Box]:
    """Rejection-sample non-overlapping cuboids resting on the ground plane."""
    lo_n, hi_n = spec.object_count
    n = int(rng.integers(lo_n, hi_n + 1))
    xmin, xmax, ymin, ymax = spec.extent
    sensor_xy = np.array([[s.tx, s.ty] for s in spec.sensors])
    boxes: list[Box] = []
    for _ in range(n):
        for _attempt in range(max_attempts):
            size = (
                rng.uniform(*spec.length_range),
                rng.uniform(*spec.width_range),
                rng.uniform(*spec.height_range),
            )
            if rng.random() < 0.5:
                size = (size[1], size[0], size[2])
            half = np.array(size[:2]) / 2
            if xmax - xmin <= 2 * half[0] or ymax - ymin <= 2 * half[1]:
                continue
            cxy = np.array([
                rng.uniform(xmin + half[0], xmax - half[0]),
                rng.uniform(ymin + half[1], ymax - half[1]),
            ])
            if any(
                np.all(np.abs(cxy - np.asarray(b.center[:2])) < half + np.asarray(b.size[:2]) / 2)
                for b in boxes
            ):
                continue
            gap = np.maximum(np.abs(sensor_xy - cxy) - half, 0.0)
            if np.any(np.hypot(gap[:, 0], gap[:, 1]) < spec.sensor_clearance):
                continue
            boxes.append(Box((float(cxy[0]), float(cxy[1]), size[2] / 2), tuple(float(s) for s in size)))
            break
        else:
            raise PlacementError(
                f"could not place object {len(boxes) + 1} of {n} after {max_attempts} attempts; "
                "use a smaller object count or a larger extent"
            )
    return boxes


def beam_directions(spec: SceneSpec) -> np.ndarray:
    """Unit ray directions in the sensor frame, azimuth-major order."""
    az = np.arange(spec.azimuth_span[0], spec.azimuth_span[1], spec.azimuth_step)
    n_el = int(math.floor((spec.elevation_span[1] - spec.elevation_span[0]) / spec.elevation_step + 1e-9)) + 1
    el = spec.elevation_span[0] + spec.elevation_step * np.arange(n_el)
    a, e = np.meshgrid(az, el, indexing="ij")
    a, e = a.ravel(), e.ravel()
    return np.column_stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])


def ray_box_distances(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-method entry distance of each ray into the boxes, ``inf`` on a miss.

    ``dirs`` is (R, 3); ``lo``/``hi`` are (B, 3). Returns (R, B). Rays starting
    inside a box report the exit distance.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :, :] - origin) * inv[:, None, :]
        t2 = (hi[None, :, :] - origin) * inv[:, None, :]
    # Axis-parallel rays: inside the slab -> unbounded, outside -> miss.
    parallel = dirs[:, None, :] == 0.0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=2)
    t_far = tmax.min(axis=2)
    hit = (t_far >= np.maximum(t_near, 0.0)) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)
    return np.where(hit, t, np.inf)


def cast_rays(origin, dirs, boxes: Sequence[Box], ground: bool, max_range: float) -> np.ndarray:
    """Nearest-hit distance per world-frame ray; ``inf`` where nothing is hit in range."""
    origin = np.asarray(origin, dtype=np.float64)
    best = np.full(len(dirs), np.inf)
    if boxes:
        lo = np.array([b.lo for b in boxes])
        hi = np.array([b.hi for b in boxes])
        best = ray_box_distances(origin, dirs, lo, hi).min(axis=1)
    if ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origin[2] / dirs[:, 2]
        tg = np.where((dirs[:, 2] < 0) & (tg > 0), tg, np.inf)
        best = np.minimum(best, tg)
    best[best > max_range] = np.inf
    return best


def scan_sensor(spec: SceneSpec, boxes: Sequence[Box], extrinsic: RigidTransform, rng: np.random.Generator | None) -> PointCloud:
    dirs_local = beam_directions(spec)
    dirs_world = dirs_local @ extrinsic.rotation.T
    r = cast_rays(extrinsic.translation, dirs_world, boxes, spec.ground, spec.max_range)
    keep = np.isfinite(r)
    r = r[keep]
    if rng is not None and spec.range_noise > 0:
        r = r + rng.normal(0.0, spec.range_noise, size=r.shape)
    # Local-frame points are range * local direction; identical to mapping the
    # world hit through the inverse extrinsic.
    return PointCloud(dirs_local[keep] * r[:, None])


def gen_scene(spec: SceneSpec) -> tuple[list[PointCloud], GroundTruth]:
    """Sample a scene and ray-cast it from every sensor.

    Each cloud is in its sensor's local frame. Sensor ``i`` draws its range
    noise from an independent stream seeded with ``seed + i + 1``.
    """
    rng = np.random.default_rng(spec.seed)
    boxes = place_boxes(spec, rng) if spec.object_count[1] > 0 else []
    extrinsics = [from_pose(p) for p in spec.sensors]
    clouds = [
        scan_sensor(spec, boxes, ext, np.random.default_rng(spec.seed + i + 1))
        for i, ext in enumerate(extrinsics)
    ]
    return clouds, GroundTruth(tuple(boxes), tuple(extrinsics))


def gen_frames(spec: SceneSpec, n_frames: int) -> list[tuple[list[PointCloud], GroundTruth]]:
    """Static sensors, objects re-sampled per frame (frame ``f`` uses ``seed + 1000 * f``)."""
    return [gen_scene(replace(spec, seed=spec.seed + 1000 * f)) for f in range(n_frames)]


def boxes_in_frame(boxes: Sequence[Box], world_to_frame: RigidTransform) -> list[Box]:
    """Move axis-aligned boxes into another frame; only valid for translation-only maps."""
    if not np.allclose(world_to_frame.rotation, np.eye(3), atol=1e-9):
        raise ValueError("axis-aligned boxes can only be moved by a translation")
    t = world_to_frame.translation
    return [Box(tuple(float(v) for v in np.asarray(b.center) + t), b.size, b.class_id) for b in boxes]


def reference_frame_boxes(truth: GroundTruth, reference: int = 0) -> list[Box]:
    return boxes_in_frame(truth.boxes, invert(truth.extrinsics[reference]))


def sensor_layout(n: int, height: float = 4.0, radius: float = 12.0) -> tuple[Pose6DoF, ...]:
    """Default poses for ``n`` sensors: the two-sensor layout, then more sensors on a ring facing inward.

    Sensor 0 always has zero yaw so ground-truth boxes stay axis-aligned in its frame.
    """
    if n < 1:
        raise ValueError("need at least one sensor")
    base = SceneSpec.__dataclass_fields__["sensors"].default
    poses = [replace(p, tz=height) for p in base[:n]]
    for i in range(len(poses), n):
        a = 2 * math.pi * i / n + math.pi / 4
        poses.append(Pose6DoF(radius * math.cos(a), radius * math.sin(a), height, 0.0, 0.0, a + math.pi))
    return tuple(poses)


def occlusion_benchmark(seed: int = 7, n_scenes: int = 30) -> list[SceneSpec]:
    """Dense scenes (20 to 30 cuboids in 50 x 50 m) where each sensor sees many objects only partially."""
    scene_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, n_scenes)
    return [
        SceneSpec(extent=(-25.0, 25.0, -25.0, 25.0), object_count=(20, 30), seed=int(s))
        for s in scene_seeds
    ]
