"""Sparse voxel feature tensors, voxelization and regular sparse 3D convolution.

Indices are integer (x, y, z) triples. Physical positions follow the
voxel-center convention: ``center(idx) = origin + (idx + 0.5) * voxel * stride``.
Tensors keep their entries in canonical order, ascending by (z, y, x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud

VOXEL_FEATURES = 4
COUNT_CAP = 32


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    dims: tuple[int, int, int]
    stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "stride", int(self.stride))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.dims) != 3:
            raise ValueError("grid origin, voxel_size and dims need 3 components")
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if self.dims[0] * self.dims[1] * self.dims[2] >= 1 << 62:
            raise ValueError(f"grid {self.dims} too large for 64-bit voxel keys")
        if self.stride < 1:
            raise ValueError(f"stride scale must be >= 1, got {self.stride}")

    @property
    def effective_voxel(self) -> np.ndarray:
        return np.asarray(self.voxel_size) * self.stride

    def centers(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * self.effective_voxel

    def downsampled(self, s: int) -> "GridSpec":
        dims = tuple(-(-d // s) for d in self.dims)
        return GridSpec(self.origin, self.voxel_size, dims, self.stride * s)

    def linear(self, idx: np.ndarray) -> np.ndarray:
        """Canonical (z, y, x)-major linear key of each index."""
        idx = np.asarray(idx, dtype=np.int64)
        dx, dy, _ = self.dims
        return (idx[:, 2] * dy + idx[:, 1]) * dx + idx[:, 0]

    def unlinear(self, keys: np.ndarray) -> np.ndarray:
        dx, dy, _ = self.dims
        keys = np.asarray(keys, dtype=np.int64)
        return np.column_stack([keys % dx, (keys // dx) % dy, keys // (dx * dy)])

    def in_bounds(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size),
                "dims": list(self.dims), "stride": self.stride}

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(tuple(d["origin"]), tuple(d["voxel_size"]), tuple(d["dims"]), int(d.get("stride", 1)))


@dataclass(frozen=True, eq=False)
class SparseFeatureTensor:
    """Voxel index -> C-channel float32 feature map on a ``GridSpec``.

    ``indices`` is (M, 3) int64 and ``features`` (M, C) float32, both in
    canonical (z, y, x) order. Construction validates and canonicalizes.
    """

    grid: GridSpec
    channels: int
    indices: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channel count must be >= 1")
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        feat = np.asarray(self.features, dtype=np.float32).reshape(len(idx), self.channels)
        if not np.all(self.grid.in_bounds(idx)):
            raise ValueError("voxel index outside grid dims")
        if not np.all(np.isfinite(feat)):
            raise ValueError("features must be finite")
        keys = self.grid.linear(idx)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate voxel index")
        idx = np.ascontiguousarray(idx[order])
        feat = np.ascontiguousarray(feat[order])
        idx.setflags(write=False)
        feat.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "features", feat)

    @classmethod
    def empty(cls, grid: GridSpec, channels: int) -> "SparseFeatureTensor":
        return cls(grid, channels, np.zeros((0, 3), np.int64), np.zeros((0, channels), np.float32))

    @classmethod
    def from_dict(cls, grid: GridSpec, channels: int, entries: dict) -> "SparseFeatureTensor":
        if not entries:
            return cls.empty(grid, channels)
        idx = np.array(list(entries.keys()), dtype=np.int64)
        feat = np.array(list(entries.values()), dtype=np.float32)
        return cls(grid, channels, idx, feat)

    def to_dict(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(int(v) for v in i): f for i, f in zip(self.indices, self.features)}

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def keys(self) -> np.ndarray:
        return self.grid.linear(self.indices)

    def __eq__(self, other):
        if not isinstance(other, SparseFeatureTensor):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.channels == other.channels
            and np.array_equal(self.indices, other.indices)
            and self.features.tobytes() == other.features.tobytes()
        )

    def dense(self) -> np.ndarray:
        """(dx, dy, dz, C) float64 array, zeros where unoccupied."""
        out = np.zeros(self.grid.dims + (self.channels,))
        i = self.indices
        out[i[:, 0], i[:, 1], i[:, 2]] = self.features
        return out


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """Weights are (k^3, Cin, Cout); tap ``o`` has flat index ``ox + k*oy + k*k*oz``."""

    size: int
    stride: int
    in_channels: int
    out_channels: int
    weights: np.ndarray
    bias: np.ndarray
    relu: bool = False

    def __post_init__(self):
        if self.size not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {self.size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        want = (self.size ** 3, self.in_channels, self.out_channels)
        if w.shape != want:
            raise ValueError(f"weights shape {w.shape}, expected {want}")
        if b.shape != (self.out_channels,):
            raise ValueError(f"bias shape {b.shape}, expected ({self.out_channels},)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("kernel weights must be finite")
        w, b = w.copy(), b.copy()
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def offsets(self) -> np.ndarray:
        """(k^3, 3) kernel offsets (ox, oy, oz) in flat-index order."""
        k = self.size
        flat = np.arange(k ** 3)
        return np.column_stack([flat % k, (flat // k) % k, flat // (k * k)])


def voxelize(cloud: PointCloud, grid: GridSpec) -> SparseFeatureTensor:
    """4-channel voxel features: mean offset from the voxel center (in voxel units) and clipped count."""
    if grid.stride != 1:
        raise ValueError("voxelize needs a stride-1 grid")
    if len(cloud) == 0:
        return SparseFeatureTensor.empty(grid, VOXEL_FEATURES)
    vs = np.asarray(grid.voxel_size)
    rel = (cloud.points - np.asarray(grid.origin)) / vs
    idx = np.floor(rel).astype(np.int64)
    keep = grid.in_bounds(idx)
    if not np.any(keep):
        return SparseFeatureTensor.empty(grid, VOXEL_FEATURES)
    rel, idx = rel[keep], idx[keep]
    keys = grid.linear(idx)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    offs = rel - idx - 0.5
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, offs)
    feat = np.empty((len(uniq), VOXEL_FEATURES), dtype=np.float32)
    feat[:, :3] = sums / counts[:, None]
    feat[:, 3] = np.minimum(counts, COUNT_CAP) / COUNT_CAP
    return SparseFeatureTensor(grid, VOXEL_FEATURES, grid.unlinear(uniq), feat)


def sparse_conv(x: SparseFeatureTensor, kernel: ConvKernel,
                out_indices: np.ndarray | None = None) -> SparseFeatureTensor:
    """Regular sparse convolution.

    Output site ``y`` exists when some occupied ``x = s*y + o - k//2``. With
    ``out_indices`` the output support is restricted to those sites (stride 1
    only), which is how the concat fusion conv keeps the union support.
    """
    if kernel.in_channels != x.channels:
        raise ValueError(f"kernel expects {kernel.in_channels} channels, tensor has {x.channels}")
    s, k = kernel.stride, kernel.size
    pad = k // 2
    out_grid = x.grid.downsampled(s)
    if out_indices is not None and s != 1:
        raise ValueError("restricted output support needs stride 1")

    # Gather (output key, input row, tap) triples for every kernel tap.
    out_keys, in_rows, taps = [], [], []
    for flat, off in enumerate(kernel.offsets()):
        num = x.indices - off + pad
        ok = np.all(num >= 0, axis=1)
        if s > 1:
            ok &= np.all(num % s == 0, axis=1)
        y = num // s
        ok &= np.all(y < np.asarray(out_grid.dims), axis=1)
        rows = np.flatnonzero(ok)
        out_keys.append(out_grid.linear(y[rows]))
        in_rows.append(rows)
        taps.append(np.full(len(rows), flat))
    out_keys = np.concatenate(out_keys) if out_keys else np.zeros(0, np.int64)
    in_rows = np.concatenate(in_rows) if in_rows else np.zeros(0, np.int64)
    taps = np.concatenate(taps) if taps else np.zeros(0, np.int64)

    if out_indices is None:
        sites = np.unique(out_keys)
    else:
        sites = np.unique(out_grid.linear(np.asarray(out_indices, dtype=np.int64).reshape(-1, 3)))
        pos = np.searchsorted(sites, out_keys)
        keep = (pos < len(sites)) & (sites[np.minimum(pos, max(len(sites) - 1, 0))] == out_keys)
        out_keys, in_rows, taps = out_keys[keep], in_rows[keep], taps[keep]
    if len(sites) == 0:
        return SparseFeatureTensor.empty(out_grid, kernel.out_channels)

    out_rows = np.searchsorted(sites, out_keys)
    acc = np.zeros((len(sites), kernel.out_channels))
    feats = x.features.astype(np.float64)
    weights = kernel.weights.astype(np.float64)
    # Accumulate tap by tap in a fixed order so results are reproducible bit-for-bit.
    for flat in range(k ** 3):
        sel = taps == flat
        if not np.any(sel):
            continue
        np.add.at(acc, out_rows[sel], feats[in_rows[sel]] @ weights[flat])
    acc += kernel.bias
    if kernel.relu:
        np.maximum(acc, 0.0, out=acc)
    return SparseFeatureTensor(out_grid, kernel.out_channels, out_grid.unlinear(sites), acc.astype(np.float32))


def conv_macs(x: SparseFeatureTensor, kernel: ConvKernel, active_sites: int | None = None) -> int:
    """Multiply-accumulates charged for a conv layer: active output sites * k^3 * Cin * Cout."""
    if active_sites is None:
        active_sites = len(sparse_conv(x, kernel))
    return int(active_sites) * kernel.size ** 3 * kernel.in_channels * kernel.out_channels
