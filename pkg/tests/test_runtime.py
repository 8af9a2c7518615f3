import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scmii.fusion import FusionConfig, fuse, fusion_kernel
from scmii.geometry import RigidTransform, compose, invert
from scmii.model import default_network_spec, init_weights, model_macs, run_full, run_head
from scmii.pointcloud import PointCloud
from scmii.protocol import FRAME_OVERHEAD, decode_frame, feature_frame_size
from scmii.runtime import (
    CostModel, EdgeError, FrameBarrier, FrameTiming, LinkModel, SimulatedLink, TimingReport, TransportError,
    align_tensors, edge_step, input_fusion_infer, run_edge, serve, server_infer, simulate_pipeline,
)
from scmii.sparse import GridSpec, SparseFeatureTensor

SPEC = default_network_spec()
WEIGHTS = init_weights(SPEC)
TINY = SparseFeatureTensor(GridSpec((0, 0, 0), (1, 1, 1), (2, 2, 2)), 1, [[0, 0, 0]], [[1.0]])


@pytest.fixture(scope="module")
def setup(small_scene):
    clouds, truth = small_scene
    ref = invert(truth.extrinsics[0])
    transforms = {d: compose(ref, e) for d, e in enumerate(truth.extrinsics)}
    cfg = FusionConfig("max", (0, 1), SPEC.feature_grid)
    return dict(enumerate(clouds)), transforms, cfg


class TestBarrier:
    def test_releases_when_complete(self):
        b = FrameBarrier([0, 1], 100)
        assert b.offer(0, 7, TINY, now=0.0) is None
        r = b.offer(1, 7, TINY, now=0.01)
        assert r.complete and r.frame_id == 7 and set(r.tensors) == {0, 1} and r.released_at == 0.01
        assert b.pending() == []

    def test_timeout_partial(self):
        b = FrameBarrier([0, 1], 100)
        b.offer(0, 1, TINY, now=0.0)
        assert b.poll(now=0.099) == []
        (r,) = b.poll(now=0.1)
        assert not r.complete and set(r.tensors) == {0}

    def test_late_duplicate_unexpected(self):
        b = FrameBarrier([0, 1], 100)
        b.offer(0, 1, TINY, now=0.0)
        b.offer(0, 1, TINY, now=0.0)
        b.offer(9, 1, TINY, now=0.0)
        b.poll(now=1.0)
        b.offer(1, 1, TINY, now=1.0)
        assert (b.duplicates, b.unexpected, b.late) == (1, 1, 1)

    def test_flush_oldest_first(self):
        b = FrameBarrier([0, 1], 100)
        b.offer(0, 5, TINY, now=0.0)
        b.offer(0, 3, TINY, now=0.01)
        assert [r.frame_id for r in b.flush(now=0.02)] == [5, 3]

    @settings(max_examples=30)
    @given(st.permutations([(d, f) for d in range(3) for f in range(3)]))
    def test_arrival_order_irrelevant(self, order):
        b = FrameBarrier([0, 1, 2], 1e9)
        out = [b.offer(d, f, TINY, now=0.0) for d, f in order]
        released = sorted(r.frame_id for r in out if r is not None)
        assert released == [0, 1, 2]

    def test_needs_devices(self):
        with pytest.raises(ValueError):
            FrameBarrier([])


class TestEdge:
    def test_edge_step_size(self, small_scene):
        link = SimulatedLink()
        n = edge_step(small_scene[0][0], SPEC, WEIGHTS, 1, 4, link)
        head = run_head(small_scene[0][0], SPEC, WEIGHTS)
        assert n == feature_frame_size(len(head), 16) == link.sent_bytes
        msg = decode_frame(link.receive_all()[0])
        assert msg.tensor == head and (msg.device_id, msg.frame_id) == (1, 4)

    def test_closed_transport(self, small_scene):
        link = SimulatedLink()
        link.close()
        with pytest.raises(EdgeError, match="frame dropped") as e:
            edge_step(small_scene[0][0], SPEC, WEIGHTS, 1, 4, link)
        assert e.value.frame_id == 4

    def test_empty_cloud_sends_header_only(self):
        link = SimulatedLink()
        assert edge_step(PointCloud.empty(), SPEC, WEIGHTS, 0, 0, link) == feature_frame_size(0, 16)

    def test_simulated_link_corrupts_with_probability_one(self):
        link = SimulatedLink(LinkModel(corruption=1.0))
        link.send(b"\x00" * 32)
        assert sum(bin(b).count("1") for b in link.receive_all()[0]) == 1

    def test_link_validation(self):
        with pytest.raises(ValueError):
            LinkModel(bandwidth_mbps=0)
        with pytest.raises(ValueError):
            CostModel(edge_macs_per_s=0)


class TestServer:
    def test_single_device_identity_equals_full(self, small_scene):
        cloud = small_scene[0][0]
        cfg = FusionConfig("max", (0,), SPEC.feature_grid)
        dets = server_infer({0: run_head(cloud, SPEC, WEIGHTS)}, {0: RigidTransform.identity()}, cfg, SPEC, WEIGHTS)
        assert dets == run_full(cloud, SPEC, WEIGHTS)

    @pytest.mark.parametrize("method", ["max", "concat-conv"])
    def test_duplicate_device_is_idempotent(self, small_scene, method):
        cloud = small_scene[0][0]
        head = run_head(cloud, SPEC, WEIGHTS)
        kern = fusion_kernel(2, 16) if method == "concat-conv" else None
        cfg = FusionConfig(method, (0, 1), SPEC.feature_grid, kern)
        ident = {0: RigidTransform.identity(), 1: RigidTransform.identity()}
        assert server_infer({0: head, 1: head}, ident, cfg, SPEC, WEIGHTS) == run_full(cloud, SPEC, WEIGHTS)

    def test_missing_transform(self, setup):
        clouds, transforms, cfg = setup
        with pytest.raises(KeyError, match="device 1"):
            align_tensors({1: run_head(clouds[1], SPEC, WEIGHTS)}, {0: transforms[0]}, cfg)

    def test_input_fusion_counts_points(self, setup):
        clouds, transforms, _ = setup
        _, macs, n = input_fusion_infer(clouds, transforms, SPEC, WEIGHTS)
        assert n == sum(len(c) for c in clouds.values()) and macs > 0


class TestSimulate:
    def test_closed_form_timing(self, setup):
        clouds, transforms, cfg = setup
        link, cost = LinkModel(latency_ms=0.3, bandwidth_mbps=500), CostModel()
        rep = simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg, link, cost)
        (f,) = rep.frames
        heads = {d: run_head(c, SPEC, WEIGHTS) for d, c in clouds.items()}
        size = {d: feature_frame_size(len(h), 16) for d, h in heads.items()}
        edge = {d: len(clouds[d]) * 0.05e-3 + len(h) * 27 * 4 * 16 / 2e10 * 1e3 + 0.5 + size[d] / 1e9 * 1e3
                for d, h in heads.items()}
        xfer = {d: 0.3 + size[d] * 8 / 500e6 * 1e3 for d in heads}
        arrive = max(edge[d] + xfer[d] for d in heads)
        fused = fuse(align_tensors(heads, transforms, cfg), cfg)
        tail_macs, _ = model_macs(fused, WEIGHTS.tail)
        tail = tail_macs / 4e11 * 1e3 + 2 * 0.5
        fusion = sum(size.values()) / 4e9 * 1e3
        for d in heads:
            assert f.edge_ms[d] == pytest.approx(edge[d], rel=1e-12)
            assert f.transfer_ms[d] == pytest.approx(xfer[d], rel=1e-12)
            assert f.bytes_sent[d] == size[d]
        assert f.tail_ms == pytest.approx(tail, rel=1e-12)
        assert f.fusion_ms == pytest.approx(fusion, rel=1e-12)
        assert f.total_ms == pytest.approx(arrive + fusion + tail, rel=1e-12)
        _, base_macs, n = input_fusion_infer(clouds, transforms, SPEC, WEIGHTS)
        raw = 0.3 + (FRAME_OVERHEAD + 4 + 12 * len(clouds[1])) * 8 / 500e6 * 1e3
        assert f.baseline_ms == pytest.approx(raw + n * 0.05e-3 + base_macs / 2e10 * 1e3 + 3 * 0.5, rel=1e-12)
        assert f.complete

    def test_detections_match_server_infer(self, setup):
        clouds, transforms, cfg = setup
        rep = simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg)
        heads = {d: run_head(c, SPEC, WEIGHTS) for d, c in clouds.items()}
        assert rep.detections[0] == server_infer(heads, transforms, cfg, SPEC, WEIGHTS)

    def test_timeout_releases_partial(self, setup):
        clouds, transforms, cfg = setup
        rep = simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg, timeout_ms=1e-6)
        (f,) = rep.frames
        assert not f.complete and f.wait_ms == pytest.approx(1e-6)

    def test_corrupted_link_drops_frames(self, setup):
        clouds, transforms, cfg = setup
        rep = simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg, LinkModel(corruption=1.0))
        assert rep.frames == [] and rep.dropped_frames == [0]

    def test_empty_clouds(self, setup):
        _, transforms, cfg = setup
        rep = simulate_pipeline([{0: PointCloud.empty(), 1: PointCloud.empty()}], transforms, SPEC, WEIGHTS, cfg)
        assert rep.frames[0].complete and rep.detections[0] == []

    def test_faster_link_is_faster(self, setup):
        clouds, transforms, cfg = setup
        totals = [simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg, LinkModel(bandwidth_mbps=bw))
                  .frames[0].total_ms for bw in (50, 500, 5000)]
        assert totals[0] > totals[1] > totals[2]

    def test_default_speedup_above_one(self, setup):
        clouds, transforms, cfg = setup
        rep = simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg)
        assert rep.mean_speedup > 1.0 and 0 < rep.mean_edge_reduction < 1

    def test_report_round_trip_and_text(self, setup):
        clouds, transforms, cfg = setup
        rep = simulate_pipeline([clouds], transforms, SPEC, WEIGHTS, cfg, timeout_ms=1e-6)
        back = TimingReport.from_dict(rep.to_dict())
        assert back.to_dict() == rep.to_dict()
        text = rep.to_text()
        assert "0*" in text and "speedup" in text

    def test_frame_timing_speedup(self):
        f = FrameTiming(0, {0: 1.0}, {0: 1.0}, {0: 10}, 0, 0, 0, 2.0, 5.0, True)
        assert f.speedup == 2.5 and FrameTiming.from_dict(f.to_dict()) == f


class TestSockets:
    def test_serve_and_edges_match_in_process(self, setup):
        clouds, transforms, cfg = setup
        bound, ready, out = [], threading.Event(), {}
        th = threading.Thread(target=lambda: out.update(
            serve("127.0.0.1", 0, transforms, cfg, SPEC, WEIGHTS, timeout_ms=30000, ready=ready, bound=bound,
                  idle_timeout_s=60)))
        th.start()
        assert ready.wait(10)
        edges = [threading.Thread(target=run_edge, args=("127.0.0.1", bound[0], d, [clouds[d]] * 2, SPEC, WEIGHTS))
                 for d in (0, 1)]
        for e in edges:
            e.start()
        for e in edges:
            e.join(60)
        th.join(60)
        heads = {d: run_head(c, SPEC, WEIGHTS) for d, c in clouds.items()}
        want = server_infer(heads, transforms, cfg, SPEC, WEIGHTS)
        assert set(out) == {0, 1}
        for fid in (0, 1):
            assert out[fid] == (want, True)

    def test_connect_refused(self):
        with pytest.raises((TransportError, OSError)):
            run_edge("127.0.0.1", 1, 0, [], SPEC, WEIGHTS)
