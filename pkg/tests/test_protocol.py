import io
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from scmii.model import Detection
from scmii.protocol import (
    FRAME_OVERHEAD, MAX_BODY, Bye, ErrorKind, FeatureMessage, Hello, ProtocolError, ResultMessage, decode_frame,
    encode, feature_frame_size, feature_payload_size, read_frame,
)
from scmii.sparse import GridSpec, SparseFeatureTensor

GOLDEN = Path(__file__).parent / "golden"
GRID = GridSpec((-40.0, -40.0, -3.85), (0.2, 0.2, 0.2), (400, 400, 20))


def golden_feature():
    t = SparseFeatureTensor(GRID, 2, [[1, 0, 7], [5, 6, 0]], [[0.25, 8.0], [1.0, -2.5]])
    return FeatureMessage(3, 42, 1_000_000, t)


def random_feature(rng, n=50, channels=16):
    keys = rng.choice(np.prod(GRID.dims), n, replace=False)
    t = SparseFeatureTensor(GRID, channels, GRID.unlinear(keys), rng.normal(size=(n, channels)))
    return FeatureMessage(int(rng.integers(0, 2 ** 16)), int(rng.integers(0, 2 ** 63)), 123, t)


def reframe(data: bytes) -> bytes:
    """Recompute the CRC so body-level validation is reached."""
    return data[:-4] + struct.pack("<I", zlib.crc32(data[4:-4]))


class TestGolden:
    @pytest.mark.parametrize("name,msg", [
        ("hello.bin", Hello(3)),
        ("bye.bin", Bye(3)),
        ("feature.bin", golden_feature()),
        ("empty_feature.bin", FeatureMessage(0, 0, 0, SparseFeatureTensor.empty(
            GridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4), 2), 16))),
        ("result.bin", ResultMessage(42, (Detection((1, 2, 0.5), (4, 2, 1.5), 0.75),))),
    ])
    def test_encode_matches_golden(self, name, msg):
        data = (GOLDEN / name).read_bytes()
        assert encode(msg) == data
        back = decode_frame(data)
        if isinstance(msg, FeatureMessage):
            assert back.tensor == msg.tensor and back.frame_id == msg.frame_id
        else:
            assert back == msg

    def test_feature_size_formula(self):
        assert len((GOLDEN / "feature.bin").read_bytes()) == feature_frame_size(2, 2) == FRAME_OVERHEAD + 88 + 2 * 20
        assert feature_payload_size(10, 16) == 88 + 10 * 76


class TestRoundTrip:
    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 60), st.integers(1, 20))
    def test_feature_bit_exact(self, seed, n, channels):
        msg = random_feature(np.random.default_rng(seed), n, channels)
        data = encode(msg)
        assert len(data) == feature_frame_size(n, channels)
        back = decode_frame(data)
        assert back.tensor == msg.tensor
        assert (back.device_id, back.frame_id, back.timestamp_us) == (msg.device_id, msg.frame_id, msg.timestamp_us)

    def test_read_frame_stream(self):
        msgs = [Hello(1), random_feature(np.random.default_rng(0)), Bye(1)]
        stream = io.BytesIO(b"".join(encode(m) for m in msgs))
        got = [read_frame(stream) for _ in range(3)]
        assert got[0] == Hello(1) and got[2] == Bye(1) and got[1].tensor == msgs[1].tensor
        assert read_frame(stream) is None

    def test_stream_cut_mid_frame(self):
        data = encode(Hello(1))
        with pytest.raises(ProtocolError) as e:
            read_frame(io.BytesIO(data[:-2]))
        assert e.value.kind is ErrorKind.TRUNCATED


class TestErrors:
    def kind(self, data):
        with pytest.raises(ProtocolError) as e:
            decode_frame(data)
        return e.value.kind

    def test_empty(self):
        assert self.kind(b"") is ErrorKind.TRUNCATED

    def test_bad_magic(self):
        assert self.kind(b"XCMI" + encode(Hello(1))[4:]) is ErrorKind.BAD_MAGIC

    def test_version(self):
        data = bytearray(encode(Hello(1)))
        data[4] = 2
        assert self.kind(bytes(data)) is ErrorKind.UNSUPPORTED_VERSION

    def test_unknown_type(self):
        data = bytearray(encode(Hello(1)))
        data[5] = 9
        assert self.kind(reframe(bytes(data))) is ErrorKind.UNKNOWN_TYPE

    def test_too_large(self):
        head = b"SCMI" + struct.pack("<BBI", 1, 2, MAX_BODY + 1)
        assert self.kind(head) is ErrorKind.TOO_LARGE

    def test_trailing_bytes(self):
        assert self.kind(encode(Hello(1)) + b"\x00") is ErrorKind.MALFORMED

    def test_every_single_bit_flip_detected(self):
        data = encode(golden_feature())
        for i in range(len(data) * 8):
            flipped = bytearray(data)
            flipped[i // 8] ^= 1 << (i % 8)
            with pytest.raises(ProtocolError):
                decode_frame(bytes(flipped))

    def test_crc_flip_in_body(self):
        data = bytearray(encode(golden_feature()))
        data[40] ^= 0x10
        assert self.kind(bytes(data)) is ErrorKind.CRC_MISMATCH

    def test_index_out_of_range(self):
        data = bytearray((GOLDEN / "feature.bin").read_bytes())
        struct.pack_into("<i", data, 10 + 88, 400)
        assert self.kind(reframe(bytes(data))) is ErrorKind.INDEX_OUT_OF_RANGE

    def test_non_finite_feature(self):
        data = bytearray((GOLDEN / "feature.bin").read_bytes())
        struct.pack_into("<f", data, 10 + 88 + 12, float("nan"))
        assert self.kind(reframe(bytes(data))) is ErrorKind.NON_FINITE

    def test_unsorted_records(self):
        data = bytearray((GOLDEN / "feature.bin").read_bytes())
        a, b = data[98:118], data[118:138]
        data[98:118], data[118:138] = b, a
        assert self.kind(reframe(bytes(data))) is ErrorKind.MALFORMED

    def test_count_exceeds_body(self):
        data = bytearray((GOLDEN / "feature.bin").read_bytes())
        struct.pack_into("<I", data, 10 + 84, 3)
        assert self.kind(reframe(bytes(data))) is ErrorKind.TRUNCATED

    def test_encode_rejects_out_of_range_ids(self):
        with pytest.raises(ValueError, match="u16"):
            encode(Hello(70000))

    @settings(max_examples=300, suppress_health_check=[HealthCheck.too_slow])
    @given(st.binary(max_size=400))
    def test_fuzz_never_crashes(self, data):
        try:
            decode_frame(data)
        except ProtocolError:
            pass

    @settings(max_examples=200)
    @given(st.binary(min_size=1, max_size=200), st.integers(0, 10 ** 6))
    def test_fuzz_valid_crc_garbage_body(self, body, seed):
        kind = seed % 6
        head = b"SCMI" + struct.pack("<BBI", 1, kind, len(body))
        data = head + body + struct.pack("<I", zlib.crc32(head[4:] + body))
        try:
            decode_frame(data)
        except ProtocolError:
            pass
