"""Alignment of intermediate tensors into a common grid and the two integration operators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import RigidTransform, apply_points
from .sparse import ConvKernel, GridSpec, SparseFeatureTensor, sparse_conv

METHODS = ("max", "concat-conv")


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    method: str
    device_order: tuple[int, ...]
    target: GridSpec
    kernel: ConvKernel | None = None

    def __post_init__(self):
        object.__setattr__(self, "device_order", tuple(int(d) for d in self.device_order))
        if self.method not in METHODS:
            raise FusionError(f"unknown fusion method {self.method!r}; expected one of {METHODS}")
        if len(set(self.device_order)) != len(self.device_order):
            raise FusionError(f"duplicate device id in order {self.device_order}")
        if self.method == "concat-conv":
            if self.kernel is None:
                raise FusionError("concat-conv fusion needs a kernel")
            n = len(self.device_order)
            if self.kernel.stride != 1 or self.kernel.in_channels % max(n, 1) != 0 \
                    or self.kernel.in_channels != n * self.kernel.out_channels:
                raise FusionError(
                    f"fusion kernel {self.kernel.in_channels}->{self.kernel.out_channels} (stride "
                    f"{self.kernel.stride}) does not fit {n} devices")


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _max_reduce(keys: np.ndarray, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort by key and take the per-channel maximum over duplicate keys."""
    order = np.argsort(keys, kind="stable")
    keys, feats = keys[order], feats[order]
    if len(keys) == 0:
        return keys, feats
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    return keys[starts], np.maximum.reduceat(feats, starts, axis=0)


def transform_tensor(t: SparseFeatureTensor, transform: RigidTransform, target: GridSpec) -> SparseFeatureTensor:
    """Move every voxel to the target grid through its physical center; features are copied."""
    if target.stride != t.grid.stride or target.voxel_size != t.grid.voxel_size:
        raise FusionError(
            f"resolution mismatch: source voxel {t.grid.voxel_size} x{t.grid.stride}, "
            f"target voxel {target.voxel_size} x{target.stride}")
    if len(t) == 0:
        return SparseFeatureTensor.empty(target, t.channels)
    ev = t.grid.effective_voxel
    p = apply_points(transform, t.grid.centers(t.indices))
    idx = round_half_away((p - np.asarray(target.origin)) / ev - 0.5).astype(np.int64)
    keep = target.in_bounds(idx)
    keys, feats = _max_reduce(target.linear(idx[keep]), t.features[keep])
    return SparseFeatureTensor(target, t.channels, target.unlinear(keys), feats)


def _check_common(tensors: Sequence[SparseFeatureTensor]) -> None:
    if not tensors:
        raise FusionError("need at least one tensor to fuse")
    g, c = tensors[0].grid, tensors[0].channels
    for i, x in enumerate(tensors[1:], 1):
        if x.grid != g:
            raise FusionError(f"tensor {i} grid {x.grid} differs from {g}")
        if x.channels != c:
            raise FusionError(f"tensor {i} has {x.channels} channels, expected {c}")


def fuse_max(tensors: Sequence[SparseFeatureTensor]) -> SparseFeatureTensor:
    """Union support; per-channel maximum where supports overlap."""
    _check_common(tensors)
    if len(tensors) == 1:
        return tensors[0]
    g = tensors[0].grid
    keys = np.concatenate([x.keys for x in tensors])
    feats = np.concatenate([x.features for x in tensors])
    keys, feats = _max_reduce(keys, feats)
    return SparseFeatureTensor(g, tensors[0].channels, g.unlinear(keys), feats)


def concat_tensors(tensors: Sequence[SparseFeatureTensor]) -> SparseFeatureTensor:
    """N*C-channel tensor on the union support, zeros where a device is absent."""
    _check_common(tensors)
    g, c = tensors[0].grid, tensors[0].channels
    union = np.unique(np.concatenate([x.keys for x in tensors]))
    feats = np.zeros((len(union), c * len(tensors)), dtype=np.float32)
    for i, x in enumerate(tensors):
        feats[np.searchsorted(union, x.keys), i * c:(i + 1) * c] = x.features
    return SparseFeatureTensor(g, c * len(tensors), g.unlinear(union), feats)


def fuse_concat_conv(tensors: Sequence[SparseFeatureTensor], cfg: FusionConfig) -> SparseFeatureTensor:
    """Concatenate along channels in ``cfg.device_order`` and apply the fusion conv on the union support."""
    if cfg.kernel is None:
        raise FusionError("concat-conv fusion needs a kernel")
    if len(tensors) != len(cfg.device_order):
        raise FusionError(f"got {len(tensors)} tensors for {len(cfg.device_order)} devices")
    cat = concat_tensors(tensors)
    if cat.channels != cfg.kernel.in_channels:
        raise FusionError(f"fusion kernel takes {cfg.kernel.in_channels} channels, concat has {cat.channels}")
    return sparse_conv(cat, cfg.kernel, out_indices=cat.indices)


def fuse(tensors: dict[int, SparseFeatureTensor], cfg: FusionConfig) -> SparseFeatureTensor:
    """Fuse per-device tensors already on ``cfg.target``; absent devices contribute empty tensors."""
    channels = next(iter(tensors.values())).channels
    ordered = [tensors.get(d, SparseFeatureTensor.empty(cfg.target, channels)) for d in cfg.device_order]
    extra = sorted(set(tensors) - set(cfg.device_order))
    if extra:
        raise FusionError(f"devices {extra} are not in the fusion order {cfg.device_order}")
    if cfg.method == "max":
        return fuse_max(ordered)
    return fuse_concat_conv(ordered, cfg)


def fusion_kernel(n_devices: int, channels: int, size: int = 1, mode: str = "averaging",
                  seed: int = 0) -> ConvKernel:
    """Fusion conv weights: the averaging preset [I/N; ...; I/N] on the center tap, or seeded-random."""
    k3 = size ** 3
    cin = n_devices * channels
    if mode == "averaging":
        w = np.zeros((k3, cin, channels), dtype=np.float32)
        center = k3 // 2
        for i in range(n_devices):
            w[center, i * channels:(i + 1) * channels, :] = np.eye(channels) / n_devices
        b = np.zeros(channels, np.float32)
    elif mode == "seeded-random":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(k3 * cin)
        w = rng.uniform(-bound, bound, (k3, cin, channels)).astype(np.float32)
        b = rng.uniform(-bound, bound, channels).astype(np.float32)
    else:
        raise ValueError(f"unknown fusion weight mode {mode!r}")
    return ConvKernel(size, 1, cin, channels, w, b, relu=False)
