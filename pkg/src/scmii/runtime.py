"""Edge and server roles, the frame barrier, transports and the virtual-clock pipeline simulator."""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .fusion import FusionConfig, fuse, transform_tensor
from .geometry import RigidTransform
from .model import Detection, NetworkSpec, Weights, detect_bev, run_head
from .pointcloud import PointCloud, merge_clouds, transform_cloud
from .protocol import (
    FRAME_OVERHEAD, Bye, FeatureMessage, Hello, ProtocolError, decode_frame, encode, read_frame,
)
from .sparse import SparseFeatureTensor, sparse_conv, voxelize

log = logging.getLogger(__name__)


class TransportError(RuntimeError):
    pass


class EdgeError(RuntimeError):
    def __init__(self, frame_id: int, reason: str):
        super().__init__(f"frame {frame_id}: {reason}")
        self.frame_id = frame_id


# ---------------------------------------------------------------- models

@dataclass(frozen=True)
class LinkModel:
    latency_ms: float = 0.2
    bandwidth_mbps: float = 1000.0
    jitter_ms: float = 0.0
    corruption: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.latency_ms, self.jitter_ms, self.corruption) < 0 or not self.bandwidth_mbps > 0:
            raise ValueError("link parameters must be >= 0 with bandwidth > 0")
        if self.corruption > 1:
            raise ValueError("corruption probability must be <= 1")

    def transfer_ms(self, n_bytes: int, jitter: float = 0.0) -> float:
        return self.latency_ms + jitter + n_bytes * 8.0 / (self.bandwidth_mbps * 1e6) * 1e3


@dataclass(frozen=True)
class CostModel:
    edge_macs_per_s: float = 2.0e10
    server_macs_per_s: float = 4.0e11
    layer_overhead_ms: float = 0.5
    edge_serialize_mb_per_s: float = 1000.0
    server_serialize_mb_per_s: float = 4000.0
    voxelize_us_per_point: float = 0.05

    def __post_init__(self):
        vals = (self.edge_macs_per_s, self.server_macs_per_s, self.edge_serialize_mb_per_s,
                self.server_serialize_mb_per_s)
        if any(not v > 0 for v in vals) or self.layer_overhead_ms < 0 or self.voxelize_us_per_point < 0:
            raise ValueError("cost model throughputs must be > 0 and overheads >= 0")

    def compute_ms(self, macs: int, layers: int, server: bool) -> float:
        rate = self.server_macs_per_s if server else self.edge_macs_per_s
        return macs / rate * 1e3 + layers * self.layer_overhead_ms

    def serialize_ms(self, n_bytes: int, server: bool) -> float:
        rate = self.server_serialize_mb_per_s if server else self.edge_serialize_mb_per_s
        return n_bytes / (rate * 1e6) * 1e3

    def voxelize_ms(self, n_points: int) -> float:
        return n_points * self.voxelize_us_per_point * 1e-3


# ---------------------------------------------------------------- barrier

@dataclass
class Released:
    frame_id: int
    tensors: dict[int, SparseFeatureTensor]
    complete: bool
    released_at: float


class FrameBarrier:
    """Holds per-frame tensors until every expected device arrived or the timeout expired.

    Thread-safe. ``now`` arguments are in seconds on the barrier's clock;
    passing them explicitly gives a virtual clock.
    """

    def __init__(self, expected: Sequence[int], timeout_ms: float = 100.0,
                 clock: Callable[[], float] = time.monotonic):
        if not expected:
            raise ValueError("barrier needs at least one expected device")
        self.expected = frozenset(int(d) for d in expected)
        self.timeout_s = timeout_ms / 1e3
        self.clock = clock
        self._pending: dict[int, tuple[float, dict[int, SparseFeatureTensor]]] = {}
        self._released: set[int] = set()
        self._lock = threading.Lock()
        self.duplicates = 0
        self.late = 0
        self.unexpected = 0

    def offer(self, device: int, frame: int, tensor: SparseFeatureTensor,
              now: float | None = None) -> Released | None:
        now = self.clock() if now is None else now
        with self._lock:
            if device not in self.expected:
                self.unexpected += 1
                return None
            if frame in self._released:
                self.late += 1
                return None
            first, got = self._pending.setdefault(frame, (now, {}))
            if device in got:
                self.duplicates += 1
                return None
            got[device] = tensor
            if set(got) == self.expected:
                return self._release(frame, True, now)
            return None

    def poll(self, now: float | None = None) -> list[Released]:
        """Release every frame whose timeout has elapsed, oldest first."""
        now = self.clock() if now is None else now
        with self._lock:
            due = sorted((first, f) for f, (first, _) in self._pending.items() if now - first >= self.timeout_s)
            return [self._release(f, False, now) for _, f in due]

    def flush(self, now: float | None = None) -> list[Released]:
        """Release everything still pending (end of stream)."""
        now = self.clock() if now is None else now
        with self._lock:
            order = sorted((first, f) for f, (first, _) in self._pending.items())
            return [self._release(f, False, now) for _, f in order]

    def pending(self) -> list[int]:
        with self._lock:
            return sorted(self._pending)

    def _release(self, frame: int, complete: bool, now: float) -> Released:
        _, got = self._pending.pop(frame)
        self._released.add(frame)
        return Released(frame, dict(sorted(got.items())), complete and set(got) == self.expected, now)


# ---------------------------------------------------------------- transports

class SimulatedLink:
    """In-process transport with seeded bit-flip corruption; frames queue until received."""

    def __init__(self, link: LinkModel | None = None, rng: np.random.Generator | None = None):
        self.link = link or LinkModel()
        self.rng = rng if rng is not None else np.random.default_rng(self.link.seed)
        self._queue: list[bytes] = []
        self.closed = False
        self.sent_bytes = 0

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportError("link closed")
        if self.link.corruption > 0 and self.rng.random() < self.link.corruption:
            buf = bytearray(data)
            pos = int(self.rng.integers(len(buf) * 8))
            buf[pos // 8] ^= 1 << (pos % 8)
            data = bytes(buf)
        self.sent_bytes += len(data)
        self._queue.append(data)

    def receive_all(self) -> list[bytes]:
        out, self._queue = self._queue, []
        return out

    def close(self) -> None:
        self.closed = True


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SocketTransport":
        deadline = time.monotonic() + timeout
        while True:
            try:
                return cls(socket.create_connection((host, port), timeout=timeout))
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise TransportError(str(e)) from e

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------- roles

def edge_step(cloud: PointCloud, spec: NetworkSpec, weights: Weights, device_id: int, frame_id: int,
              transport, timestamp_us: int = 0) -> int:
    """Run the head on a local cloud, encode and send one FEATURE frame; returns its size in bytes."""
    tensor = run_head(cloud, spec, weights)
    data = encode(FeatureMessage(device_id, frame_id, timestamp_us, tensor))
    try:
        transport.send(data)
    except (TransportError, OSError) as e:
        raise EdgeError(frame_id, f"send failed, frame dropped ({e})") from e
    return len(data)


def server_collect(barrier: FrameBarrier, msg: FeatureMessage, now: float | None = None) -> Released | None:
    return barrier.offer(msg.device_id, msg.frame_id, msg.tensor, now)


def align_tensors(tensors: Mapping[int, SparseFeatureTensor], transforms: Mapping[int, RigidTransform],
                  cfg: FusionConfig) -> dict[int, SparseFeatureTensor]:
    out = {}
    for dev, t in tensors.items():
        if dev not in transforms:
            raise KeyError(f"no calibration transform for device {dev}")
        out[dev] = transform_tensor(t, transforms[dev], cfg.target)
    return out


def server_infer(tensors: Mapping[int, SparseFeatureTensor], transforms: Mapping[int, RigidTransform],
                 cfg: FusionConfig, spec: NetworkSpec, weights: Weights) -> list[Detection]:
    """Align, fuse and finish inference for one frame."""
    if not tensors:
        raise ValueError("server_infer needs at least one tensor")
    fused = fuse(align_tensors(tensors, transforms, cfg), cfg)
    x = fused
    for kernel in weights.tail:
        x = sparse_conv(x, kernel)
    return detect_bev(x, spec.threshold, spec.score_channel)


def input_fusion_infer(clouds: Mapping[int, PointCloud], transforms: Mapping[int, RigidTransform],
                       spec: NetworkSpec, weights: Weights) -> tuple[list[Detection], int, int]:
    """Raw-cloud fusion baseline: merge calibrated clouds, run the unsplit model.

    Returns detections, total MACs and the merged point count.
    """
    merged = merge_clouds([transform_cloud(c, transforms[d]) for d, c in sorted(clouds.items())])
    x = voxelize(merged, spec.grid)
    macs = 0
    for kernel in weights.kernels:
        x = sparse_conv(x, kernel)
        macs += len(x) * kernel.size ** 3 * kernel.in_channels * kernel.out_channels
    return detect_bev(x, spec.threshold, spec.score_channel), macs, len(merged)


# ---------------------------------------------------------------- simulator

@dataclass
class FrameTiming:
    frame_id: int
    edge_ms: dict[int, float]
    transfer_ms: dict[int, float]
    bytes_sent: dict[int, int]
    wait_ms: float
    fusion_ms: float
    tail_ms: float
    total_ms: float
    baseline_ms: float
    complete: bool

    @property
    def speedup(self) -> float:
        return self.baseline_ms / self.total_ms if self.total_ms > 0 else float("inf")

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "edge_ms": {str(k): v for k, v in self.edge_ms.items()},
            "transfer_ms": {str(k): v for k, v in self.transfer_ms.items()},
            "bytes_sent": {str(k): v for k, v in self.bytes_sent.items()},
            "wait_ms": self.wait_ms, "fusion_ms": self.fusion_ms, "tail_ms": self.tail_ms,
            "total_ms": self.total_ms, "baseline_ms": self.baseline_ms, "speedup": self.speedup,
            "complete": self.complete,
        }

    @classmethod
    def from_dict(cls, d) -> "FrameTiming":
        ints = lambda m: {int(k): v for k, v in m.items()}  # noqa: E731
        return cls(int(d["frame_id"]), ints(d["edge_ms"]), ints(d["transfer_ms"]), ints(d["bytes_sent"]),
                   d["wait_ms"], d["fusion_ms"], d["tail_ms"], d["total_ms"], d["baseline_ms"], d["complete"])


@dataclass
class TimingReport:
    frames: list[FrameTiming]
    dropped_frames: list[int] = field(default_factory=list)
    detections: dict[int, list[Detection]] = field(default_factory=dict, repr=False)
    baseline_detections: dict[int, list[Detection]] = field(default_factory=dict, repr=False)

    @property
    def mean_speedup(self) -> float:
        return float(np.mean([f.speedup for f in self.frames])) if self.frames else float("nan")

    @property
    def max_speedup(self) -> float:
        return float(np.max([f.speedup for f in self.frames])) if self.frames else float("nan")

    @property
    def mean_edge_reduction(self) -> float:
        """Mean fractional cut in per-device edge time versus the edge-only total."""
        vals = [1.0 - max(f.edge_ms.values()) / f.baseline_ms for f in self.frames if f.edge_ms]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {"frames": len(self.frames), "dropped_frames": list(self.dropped_frames),
                "mean_speedup": self.mean_speedup, "max_speedup": self.max_speedup,
                "mean_edge_reduction": self.mean_edge_reduction,
                "incomplete_frames": sum(not f.complete for f in self.frames)}

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "frames": [f.to_dict() for f in self.frames]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "TimingReport":
        return cls([FrameTiming.from_dict(f) for f in d["frames"]], list(d["summary"].get("dropped_frames", [])))

    def to_text(self) -> str:
        head = ["frame", "edge ms", "transfer ms", "wait ms", "fusion ms", "tail ms", "total ms",
                "baseline ms", "speedup"]
        rows = []
        for f in self.frames:
            edge = "/".join(f"{v:.2f}" for v in f.edge_ms.values())
            xfer = "/".join(f"{v:.2f}" for v in f.transfer_ms.values())
            rows.append([str(f.frame_id) + ("" if f.complete else "*"), edge, xfer, f"{f.wait_ms:.2f}",
                         f"{f.fusion_ms:.2f}", f"{f.tail_ms:.2f}", f"{f.total_ms:.2f}",
                         f"{f.baseline_ms:.2f}", f"{f.speedup:.2f}x"])
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(head)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        s = self.summary()
        lines.append(f"mean speedup {s['mean_speedup']:.2f}x, max {s['max_speedup']:.2f}x, "
                     f"mean edge time reduction {100 * s['mean_edge_reduction']:.1f}%")
        if any(not f.complete for f in self.frames):
            lines.append("* frame released at timeout with missing devices")
        return "\n".join(lines) + "\n"


def _macs(kernel, sites: int) -> int:
    return sites * kernel.size ** 3 * kernel.in_channels * kernel.out_channels


def simulate_pipeline(frames: Sequence[Mapping[int, PointCloud]], transforms: Mapping[int, RigidTransform],
                      spec: NetworkSpec, weights: Weights, cfg: FusionConfig,
                      link: LinkModel | None = None, cost: CostModel | None = None,
                      timeout_ms: float = 100.0, colocated_baseline: bool = False) -> TimingReport:
    """Run every frame through head -> wire -> barrier -> fusion -> tail on a virtual clock.

    Each frame is timed from a common capture instant with an idle server;
    frames do not queue behind one another. The edge-only baseline ships raw
    clouds to the reference device (or assumes them already there when
    ``colocated_baseline``) and runs the unsplit model at edge throughput.
    """
    link = link or LinkModel()
    cost = cost or CostModel()
    rng = np.random.default_rng(link.seed)
    reference = cfg.device_order[0]
    report = TimingReport([])
    for fid, clouds in enumerate(frames):
        barrier = FrameBarrier(cfg.device_order, timeout_ms, clock=lambda: 0.0)
        edge_ms, xfer_ms, sent, arrivals = {}, {}, {}, []
        for dev in cfg.device_order:
            if dev not in clouds:
                continue
            cloud = clouds[dev]
            vox = voxelize(cloud, spec.grid)
            head = sparse_conv(vox, weights.head)
            data = encode(FeatureMessage(dev, fid, 0, head))
            edge_ms[dev] = (cost.voxelize_ms(len(cloud)) + cost.compute_ms(_macs(weights.head, len(head)), 1, False)
                            + cost.serialize_ms(len(data), False))
            jitter = float(rng.uniform(0.0, link.jitter_ms)) if link.jitter_ms > 0 else 0.0
            xfer_ms[dev] = link.transfer_ms(len(data), jitter)
            sent[dev] = len(data)
            wire = SimulatedLink(link, rng)
            wire.send(data)
            arrivals.append((edge_ms[dev] + xfer_ms[dev], dev, wire.receive_all()[0]))

        released, first = None, None
        for t_arr, dev, data in sorted(arrivals):
            if first is not None and t_arr - first >= timeout_ms:
                break
            try:
                msg = decode_frame(data)
            except ProtocolError as e:
                log.info("frame %d device %d discarded: %s", fid, dev, e)
                continue
            first = t_arr if first is None else first
            released = server_collect(barrier, msg, now=t_arr / 1e3) or released
            if released is not None:
                release_ms = t_arr
                break
        if released is None:
            if first is None:
                report.dropped_frames.append(fid)
                continue
            (released,) = barrier.flush(now=(first + timeout_ms) / 1e3)
            release_ms = first + timeout_ms

        aligned = align_tensors(released.tensors, transforms, cfg)
        fused = fuse(aligned, cfg)
        recv_bytes = sum(sent[d] for d in released.tensors)
        fusion_macs = _macs(cfg.kernel, len(fused)) if cfg.method == "concat-conv" else 0
        fusion_ms = cost.serialize_ms(recv_bytes, True) + cost.compute_ms(
            fusion_macs, 1 if cfg.method == "concat-conv" else 0, True)
        x, tail_macs = fused, 0
        for kernel in weights.tail:
            x = sparse_conv(x, kernel)
            tail_macs += _macs(kernel, len(x))
        tail_ms = cost.compute_ms(tail_macs, len(weights.tail), True)
        report.detections[fid] = detect_bev(x, spec.threshold, spec.score_channel)

        base_dets, base_macs, n_merged = input_fusion_infer(clouds, transforms, spec, weights)
        raw_ms = 0.0
        if not colocated_baseline:
            raw_ms = max([link.transfer_ms(FRAME_OVERHEAD + 4 + 12 * len(c))
                          for d, c in clouds.items() if d != reference] or [0.0])
        baseline_ms = raw_ms + cost.voxelize_ms(n_merged) + cost.compute_ms(base_macs, len(weights.kernels), False)
        report.baseline_detections[fid] = base_dets

        report.frames.append(FrameTiming(
            fid, edge_ms, xfer_ms, sent, release_ms - first, fusion_ms, tail_ms,
            release_ms + fusion_ms + tail_ms, baseline_ms, released.complete))
    return report


# ---------------------------------------------------------------- sockets

def run_edge(host: str, port: int, device_id: int, clouds: Sequence[PointCloud], spec: NetworkSpec,
             weights: Weights, frame_ids: Sequence[int] | None = None) -> int:
    """Edge role over a stream socket: HELLO, one FEATURE per cloud, BYE. Returns total bytes sent."""
    transport = SocketTransport.connect(host, port)
    total = 0
    try:
        transport.send(encode(Hello(device_id)))
        for i, cloud in enumerate(clouds):
            fid = frame_ids[i] if frame_ids is not None else i
            try:
                total += edge_step(cloud, spec, weights, device_id, fid, transport, int(time.time() * 1e6))
            except EdgeError as e:
                log.warning("device %d: %s", device_id, e)
        transport.send(encode(Bye(device_id)))
    finally:
        transport.close()
    return total


def serve(host: str, port: int, transforms: Mapping[int, RigidTransform], cfg: FusionConfig,
          spec: NetworkSpec, weights: Weights, timeout_ms: float = 100.0,
          ready: threading.Event | None = None, idle_timeout_s: float = 60.0,
          bound: list | None = None) -> dict[int, tuple[list[Detection], bool]]:
    """Server role: accept one connection per expected device, fuse released frames, return detections.

    Returns ``{frame id: (detections, complete)}`` once every device has said BYE.
    """
    expected = set(cfg.device_order)
    barrier = FrameBarrier(cfg.device_order, timeout_ms)
    released: queue.Queue = queue.Queue()
    done = threading.Event()
    byes: set[int] = set()
    lock = threading.Lock()

    def reader(conn: socket.socket):
        with conn, conn.makefile("rb") as stream:
            while True:
                try:
                    msg = read_frame(stream)
                except ProtocolError as e:
                    log.warning("discarding frame: %s", e)
                    continue
                except OSError:
                    msg = None
                if msg is None:
                    return
                if isinstance(msg, FeatureMessage):
                    r = server_collect(barrier, msg)
                    if r is not None:
                        released.put(r)
                elif isinstance(msg, Bye):
                    with lock:
                        byes.add(msg.device_id)
                        if byes >= expected:
                            done.set()
                    return
                elif isinstance(msg, Hello):
                    log.info("device %d connected", msg.device_id)

    srv = socket.create_server((host, port))
    if bound is not None:
        bound.append(srv.getsockname()[1])
    srv.settimeout(0.05)
    if ready is not None:
        ready.set()
    readers: list[threading.Thread] = []
    results: dict[int, tuple[list[Detection], bool]] = {}
    last_activity = time.monotonic()
    try:
        while True:
            if len(readers) < len(expected):
                try:
                    conn, _ = srv.accept()
                    conn.settimeout(None)
                    th = threading.Thread(target=reader, args=(conn,), daemon=True)
                    th.start()
                    readers.append(th)
                    last_activity = time.monotonic()
                except socket.timeout:
                    pass
            else:
                time.sleep(0.005)
            for r in barrier.poll():
                released.put(r)
            finished = done.is_set() and all(not th.is_alive() for th in readers)
            if finished:
                for r in barrier.flush():
                    released.put(r)
            while not released.empty():
                r = released.get()
                results[r.frame_id] = (server_infer(r.tensors, transforms, cfg, spec, weights), r.complete)
                last_activity = time.monotonic()
            if finished:
                break
            if time.monotonic() - last_activity > idle_timeout_s:
                raise TransportError(f"no activity for {idle_timeout_s:.0f} s; devices seen {sorted(byes)}")
    finally:
        srv.close()
    return dict(sorted(results.items()))
