"""Toy split detector: voxelize + one conv on the edge, remaining convs + BEV clustering on the server."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pointcloud import PointCloud
from .sparse import VOXEL_FEATURES, ConvKernel, GridSpec, SparseFeatureTensor, sparse_conv, voxelize

MODES = ("seeded-random", "identity-preserving")

# Gain on the clipped-count channel: a single point (count 1/32) maps to 1.0.
_HEAD_GAIN = 32.0


@dataclass(frozen=True)
class LayerSpec:
    size: int
    stride: int
    in_channels: int
    out_channels: int
    relu: bool = True

    def to_dict(self) -> dict:
        return {"size": self.size, "stride": self.stride, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "relu": self.relu}

    @classmethod
    def from_dict(cls, d) -> "LayerSpec":
        return cls(int(d["size"]), int(d["stride"]), int(d["in_channels"]), int(d["out_channels"]),
                   bool(d.get("relu", True)))


@dataclass(frozen=True)
class NetworkSpec:
    grid: GridSpec
    head: LayerSpec = LayerSpec(3, 1, VOXEL_FEATURES, 16)
    tail: tuple[LayerSpec, ...] = (LayerSpec(3, 2, 16, 32), LayerSpec(3, 1, 32, 32))
    threshold: float = 0.5
    score_channel: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tail", tuple(self.tail))
        if self.head.in_channels != VOXEL_FEATURES:
            raise ValueError(f"head conv must take {VOXEL_FEATURES} voxel channels")
        if self.grid.stride != 1:
            raise ValueError("input grid must have stride scale 1")
        prev = self.head.out_channels
        for i, layer in enumerate(self.tail):
            if layer.in_channels != prev:
                raise ValueError(f"tail layer {i} expects {layer.in_channels} channels, gets {prev}")
            prev = layer.out_channels
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("BEV threshold must lie in (0, 1)")
        if not 0 <= self.score_channel < prev:
            raise ValueError(f"score channel {self.score_channel} out of range for {prev} channels")

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return (self.head,) + self.tail

    @property
    def feature_channels(self) -> int:
        """Channel count of the intermediate (post-head) tensor."""
        return self.head.out_channels

    @property
    def feature_grid(self) -> GridSpec:
        return self.grid.downsampled(self.head.stride)

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "head": self.head.to_dict(),
                "tail": [t.to_dict() for t in self.tail],
                "threshold": self.threshold, "score_channel": self.score_channel}

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(GridSpec.from_dict(d["grid"]), LayerSpec.from_dict(d["head"]),
                   tuple(LayerSpec.from_dict(t) for t in d["tail"]),
                   float(d.get("threshold", 0.5)), int(d.get("score_channel", 0)))


def default_network_spec(sensor_height: float = 4.0, half_extent: float = 40.0,
                         voxel: float = 0.2, height_cells: int = 20,
                         ground_clearance: float = 0.15) -> NetworkSpec:
    """Input grid in a sensor's local frame that starts just above the ground plane."""
    n = int(round(2 * half_extent / voxel))
    grid = GridSpec((-half_extent, -half_extent, -sensor_height + ground_clearance),
                    (voxel, voxel, voxel), (n, n, height_cells))
    return NetworkSpec(grid)


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    score: float
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "score", float(self.score))
        if any(not v > 0 for v in self.size):
            raise ValueError(f"detection sizes must be positive, got {self.size}")

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "score": self.score,
                "class_id": self.class_id}

    @classmethod
    def from_dict(cls, d) -> "Detection":
        return cls(tuple(d["center"]), tuple(d["size"]), float(d["score"]), int(d.get("class_id", 0)))


@dataclass(frozen=True)
class Weights:
    head: ConvKernel
    tail: tuple[ConvKernel, ...]
    seed: int
    mode: str

    @property
    def kernels(self) -> tuple[ConvKernel, ...]:
        return (self.head,) + tuple(self.tail)


def _identity_kernel(layer: LayerSpec, sources: list[int], gain: float) -> ConvKernel:
    """Routes the average of ``sources`` channels to every output with ``gain``.

    Only taps whose input lands inside the output's own stride block are used,
    so sites created purely by dilation read zeros and stay at zero.
    """
    k, s = layer.size, layer.stride
    pad = k // 2
    taps = [o for o in range(k) if pad <= o < pad + s] or [pad]
    w = np.zeros((k ** 3, layer.in_channels, layer.out_channels), dtype=np.float32)
    for oz in taps:
        for oy in taps:
            for ox in taps:
                w[ox + k * oy + k * k * oz, sources, :] = gain / len(sources)
    return ConvKernel(k, s, layer.in_channels, layer.out_channels, w,
                      np.zeros(layer.out_channels, np.float32), layer.relu)


def _random_kernel(layer: LayerSpec, rng: np.random.Generator) -> ConvKernel:
    fan_in = layer.size ** 3 * layer.in_channels
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (layer.size ** 3, layer.in_channels, layer.out_channels))
    b = rng.uniform(-bound, bound, layer.out_channels)
    return ConvKernel(layer.size, layer.stride, layer.in_channels, layer.out_channels,
                      w.astype(np.float32), b.astype(np.float32), layer.relu)


def init_weights(spec: NetworkSpec, seed: int = 0, mode: str = "identity-preserving") -> Weights:
    if mode == "seeded-random":
        rng = np.random.default_rng(seed)
        kernels = [_random_kernel(layer, rng) for layer in spec.layers]
    elif mode == "identity-preserving":
        kernels = [_identity_kernel(spec.head, [VOXEL_FEATURES - 1], _HEAD_GAIN)]
        kernels += [_identity_kernel(layer, list(range(layer.in_channels)), 1.0) for layer in spec.tail]
    else:
        raise ValueError(f"unknown init mode {mode!r}; expected one of {MODES}")
    return Weights(kernels[0], tuple(kernels[1:]), int(seed), mode)


def run_head(cloud: PointCloud, spec: NetworkSpec, weights: Weights) -> SparseFeatureTensor:
    """Edge half: voxelize a local-frame cloud and apply the pre-split conv."""
    return sparse_conv(voxelize(cloud, spec.grid), weights.head)


def run_tail_features(fused: SparseFeatureTensor, weights: Weights) -> SparseFeatureTensor:
    x = fused
    for kernel in weights.tail:
        x = sparse_conv(x, kernel)
    return x


def detect_bev(x: SparseFeatureTensor, threshold: float, score_channel: int = 0) -> list[Detection]:
    """Cluster above-threshold BEV columns into axis-aligned boxes."""
    if len(x) == 0:
        return []
    dx, dy, _ = x.grid.dims
    score = x.features[:, score_channel].astype(np.float64)
    col = x.indices[:, 0] * dy + x.indices[:, 1]
    bev = np.full(dx * dy, -np.inf)
    np.maximum.at(bev, col, score)
    bev = bev.reshape(dx, dy)
    mask = bev >= threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    vox_label = labels[x.indices[:, 0], x.indices[:, 1]]
    hot = (vox_label > 0) & (score >= threshold)
    centers = x.grid.centers(x.indices[hot])
    comp = vox_label[hot]
    half = x.grid.effective_voxel / 2.0
    ids = np.arange(1, n + 1)
    bev_mean = ndimage.mean(bev, labels, ids)
    out = []
    for i, lab in enumerate(ids):
        c = centers[comp == lab]
        lo, hi = c.min(axis=0) - half, c.max(axis=0) + half
        s = float(np.clip(bev_mean[i], 0.0, 1.0))
        out.append(Detection(tuple((lo + hi) / 2.0), tuple(hi - lo), s))
    return out


def run_tail(fused: SparseFeatureTensor, spec: NetworkSpec, weights: Weights) -> list[Detection]:
    """Server half: remaining convs, BEV projection, thresholding and 8-connected clustering."""
    return detect_bev(run_tail_features(fused, weights), spec.threshold, spec.score_channel)


def run_full(cloud: PointCloud, spec: NetworkSpec, weights: Weights) -> list[Detection]:
    """Unsplit forward pass in one process."""
    x = voxelize(cloud, spec.grid)
    for kernel in weights.kernels:
        x = sparse_conv(x, kernel)
    return detect_bev(x, spec.threshold, spec.score_channel)


def model_macs(x: SparseFeatureTensor, kernels) -> tuple[int, SparseFeatureTensor]:
    """Total MACs of running ``kernels`` in sequence on ``x``, and the final tensor."""
    total = 0
    for kernel in kernels:
        x = sparse_conv(x, kernel)
        total += len(x) * kernel.size ** 3 * kernel.in_channels * kernel.out_channels
    return total, x


def _kernel_to_dict(k: ConvKernel) -> dict:
    return {
        "size": k.size, "stride": k.stride, "in_channels": k.in_channels,
        "out_channels": k.out_channels, "relu": k.relu,
        "weights": base64.b64encode(k.weights.astype("<f4").tobytes()).decode("ascii"),
        "bias": base64.b64encode(k.bias.astype("<f4").tobytes()).decode("ascii"),
    }


def _kernel_from_dict(d) -> ConvKernel:
    k, cin, cout = int(d["size"]), int(d["in_channels"]), int(d["out_channels"])
    w = np.frombuffer(base64.b64decode(d["weights"]), dtype="<f4")
    b = np.frombuffer(base64.b64decode(d["bias"]), dtype="<f4")
    if w.size != k ** 3 * cin * cout:
        raise ValueError(f"weight blob has {w.size} floats, expected {k ** 3 * cin * cout}")
    return ConvKernel(k, int(d["stride"]), cin, cout, w.reshape(k ** 3, cin, cout), b, bool(d["relu"]))


def save_model(path, spec: NetworkSpec, weights: Weights) -> None:
    doc = {"network": spec.to_dict(), "seed": weights.seed, "mode": weights.mode,
           "head": _kernel_to_dict(weights.head), "tail": [_kernel_to_dict(k) for k in weights.tail]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path) -> tuple[NetworkSpec, Weights]:
    doc = json.loads(Path(path).read_text())
    try:
        spec = NetworkSpec.from_dict(doc["network"])
        weights = Weights(_kernel_from_dict(doc["head"]), tuple(_kernel_from_dict(k) for k in doc["tail"]),
                          int(doc.get("seed", 0)), str(doc.get("mode", "custom")))
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed model file ({e})") from e
    for layer, kernel in zip(spec.layers, weights.kernels):
        if (layer.size, layer.stride, layer.in_channels, layer.out_channels) != (
                kernel.size, kernel.stride, kernel.in_channels, kernel.out_channels):
            raise ValueError(f"{path}: weights do not match the layer shapes")
    if len(spec.layers) != len(weights.kernels):
        raise ValueError(f"{path}: {len(weights.kernels)} kernels for {len(spec.layers)} layers")
    return spec, weights
