"""Binary wire format for edge/server messages.

Frame layout (little-endian)::

    "SCMI" | version u8 | type u8 | body length u32 | body | crc32 u32

The CRC (zlib / IEEE 802.3) covers version through the end of the body.

FEATURE body::

    device u16 | frame u64 | timestamp_us u64 | origin 3*f64 | voxel 3*f64
    | dims 3*u32 | stride u32 | channels u16 | count u32
    | count * (3*i32 index, channels*f32 features)   sorted by (z, y, x)

HELLO / BYE bodies are a single device u16. RESULT carries
``frame u64 | n u32 | n * (center 3*f32, size 3*f32, score f32, class u16)``.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

from .model import Detection
from .sparse import GridSpec, SparseFeatureTensor

MAGIC = b"SCMI"
VERSION = 1
MAX_BODY = 64 * 1024 * 1024

_PREFIX = struct.Struct("<4sBBI")
_CRC = struct.Struct("<I")
_FEATURE_HEADER = struct.Struct("<HQQ3d3d3IIHI")
_DEVICE = struct.Struct("<H")
_RESULT_HEADER = struct.Struct("<QI")
_DETECTION = struct.Struct("<7fH")

PREFIX_SIZE = _PREFIX.size
FEATURE_HEADER_SIZE = _FEATURE_HEADER.size
FRAME_OVERHEAD = _PREFIX.size + _CRC.size


class MsgType(enum.IntEnum):
    HELLO = 1
    FEATURE = 2
    RESULT = 3
    BYE = 4


class ErrorKind(enum.Enum):
    TRUNCATED = "truncated"
    BAD_MAGIC = "bad-magic"
    UNSUPPORTED_VERSION = "unsupported-version"
    UNKNOWN_TYPE = "unknown-type"
    TOO_LARGE = "too-large"
    CRC_MISMATCH = "crc-mismatch"
    INDEX_OUT_OF_RANGE = "index-out-of-range"
    NON_FINITE = "non-finite"
    MALFORMED = "malformed"


class ProtocolError(Exception):
    def __init__(self, kind: ErrorKind, detail: str):
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind
        self.detail = detail


@dataclass(frozen=True)
class Hello:
    device_id: int


@dataclass(frozen=True)
class Bye:
    device_id: int


@dataclass(frozen=True)
class FeatureMessage:
    device_id: int
    frame_id: int
    timestamp_us: int
    tensor: SparseFeatureTensor


@dataclass(frozen=True)
class ResultMessage:
    frame_id: int
    detections: tuple[Detection, ...]


Message = Union[Hello, Bye, FeatureMessage, ResultMessage]


def feature_payload_size(voxels: int, channels: int) -> int:
    """Body size of a FEATURE message: fixed header plus one record per voxel."""
    return FEATURE_HEADER_SIZE + voxels * (12 + 4 * channels)


def feature_frame_size(voxels: int, channels: int) -> int:
    return FRAME_OVERHEAD + feature_payload_size(voxels, channels)


def _frame(kind: MsgType, body: bytes) -> bytes:
    if len(body) > MAX_BODY:
        raise ProtocolError(ErrorKind.TOO_LARGE, f"body of {len(body)} bytes exceeds {MAX_BODY}")
    head = _PREFIX.pack(MAGIC, VERSION, int(kind), len(body))
    crc = zlib.crc32(head[4:] + body)
    return head + body + _CRC.pack(crc)


def _check_range(name: str, value: int, bits: int) -> int:
    value = int(value)
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name} {value} does not fit in u{bits}")
    return value


def encode_feature(msg: FeatureMessage) -> bytes:
    t = msg.tensor
    g = t.grid
    if len(t) > 0xFFFFFFFF:
        raise ValueError(f"voxel count {len(t)} exceeds u32")
    head = _FEATURE_HEADER.pack(
        _check_range("device id", msg.device_id, 16), _check_range("frame id", msg.frame_id, 64),
        _check_range("timestamp", msg.timestamp_us, 64), *g.origin, *g.voxel_size,
        *(_check_range("dim", d, 32) for d in g.dims), _check_range("stride", g.stride, 32),
        _check_range("channels", t.channels, 16), len(t))
    rec = np.empty(len(t), dtype=np.dtype([("idx", "<i4", 3), ("feat", "<f4", t.channels)]))
    rec["idx"] = t.indices
    rec["feat"] = t.features
    return _frame(MsgType.FEATURE, head + rec.tobytes())


def encode_hello(msg: Hello) -> bytes:
    return _frame(MsgType.HELLO, _DEVICE.pack(_check_range("device id", msg.device_id, 16)))


def encode_bye(msg: Bye) -> bytes:
    return _frame(MsgType.BYE, _DEVICE.pack(_check_range("device id", msg.device_id, 16)))


def encode_result(msg: ResultMessage) -> bytes:
    parts = [_RESULT_HEADER.pack(_check_range("frame id", msg.frame_id, 64), len(msg.detections))]
    for d in msg.detections:
        parts.append(_DETECTION.pack(*d.center, *d.size, d.score, _check_range("class", d.class_id, 16)))
    return _frame(MsgType.RESULT, b"".join(parts))


def encode(msg: Message) -> bytes:
    if isinstance(msg, FeatureMessage):
        return encode_feature(msg)
    if isinstance(msg, Hello):
        return encode_hello(msg)
    if isinstance(msg, Bye):
        return encode_bye(msg)
    if isinstance(msg, ResultMessage):
        return encode_result(msg)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def parse_prefix(prefix: bytes) -> tuple[MsgType, int]:
    """Validate the fixed 10-byte prefix; returns (type, body length)."""
    if len(prefix) < PREFIX_SIZE:
        raise ProtocolError(ErrorKind.TRUNCATED, f"frame prefix needs {PREFIX_SIZE} bytes, got {len(prefix)}")
    magic, version, kind, length = _PREFIX.unpack_from(prefix)
    if magic != MAGIC:
        raise ProtocolError(ErrorKind.BAD_MAGIC, f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise ProtocolError(ErrorKind.UNSUPPORTED_VERSION, f"version {version}")
    if length > MAX_BODY:
        raise ProtocolError(ErrorKind.TOO_LARGE, f"declared body of {length} bytes exceeds {MAX_BODY}")
    try:
        return MsgType(kind), length
    except ValueError:
        raise ProtocolError(ErrorKind.UNKNOWN_TYPE, f"message type {kind}") from None


def _decode_device(body: bytes) -> int:
    if len(body) != _DEVICE.size:
        raise ProtocolError(ErrorKind.MALFORMED, f"device body must be {_DEVICE.size} bytes, got {len(body)}")
    return _DEVICE.unpack(body)[0]


def _decode_feature(body: bytes) -> FeatureMessage:
    if len(body) < FEATURE_HEADER_SIZE:
        raise ProtocolError(ErrorKind.TRUNCATED, f"feature header needs {FEATURE_HEADER_SIZE} bytes")
    f = _FEATURE_HEADER.unpack_from(body)
    device, frame, ts = f[0:3]
    origin, voxel, dims, stride, channels, count = f[3:6], f[6:9], f[9:12], f[12], f[13], f[14]
    if not all(np.isfinite(origin + voxel)):
        raise ProtocolError(ErrorKind.NON_FINITE, "grid origin or voxel size")
    if channels < 1:
        raise ProtocolError(ErrorKind.MALFORMED, "channel count 0")
    try:
        grid = GridSpec(origin, voxel, dims, stride)
    except ValueError as e:
        raise ProtocolError(ErrorKind.MALFORMED, f"grid: {e}") from None
    rec_size = 12 + 4 * channels
    payload = len(body) - FEATURE_HEADER_SIZE
    if payload != count * rec_size:
        kind = ErrorKind.TRUNCATED if payload < count * rec_size else ErrorKind.MALFORMED
        raise ProtocolError(kind, f"{count} records of {rec_size} bytes need {count * rec_size}, body has {payload}")
    rec = np.frombuffer(body, dtype=np.dtype([("idx", "<i4", 3), ("feat", "<f4", channels)]),
                        count=count, offset=FEATURE_HEADER_SIZE)
    idx = rec["idx"].astype(np.int64).reshape(count, 3)
    feat = rec["feat"].reshape(count, channels)
    if not np.all(grid.in_bounds(idx)):
        bad = int(np.flatnonzero(~grid.in_bounds(idx))[0])
        raise ProtocolError(ErrorKind.INDEX_OUT_OF_RANGE, f"record {bad} index {idx[bad].tolist()} outside {dims}")
    if not np.all(np.isfinite(feat)):
        raise ProtocolError(ErrorKind.NON_FINITE, "feature value")
    keys = grid.linear(idx)
    if count > 1 and not np.all(keys[1:] > keys[:-1]):
        raise ProtocolError(ErrorKind.MALFORMED, "records not in strictly ascending (z, y, x) order")
    tensor = SparseFeatureTensor(grid, channels, idx, feat)
    return FeatureMessage(device, frame, ts, tensor)


def _decode_result(body: bytes) -> ResultMessage:
    if len(body) < _RESULT_HEADER.size:
        raise ProtocolError(ErrorKind.TRUNCATED, "result header")
    frame, n = _RESULT_HEADER.unpack_from(body)
    if len(body) != _RESULT_HEADER.size + n * _DETECTION.size:
        raise ProtocolError(ErrorKind.MALFORMED, f"{n} detections do not fill a {len(body)}-byte body")
    dets = []
    for i in range(n):
        v = _DETECTION.unpack_from(body, _RESULT_HEADER.size + i * _DETECTION.size)
        if not all(np.isfinite(v[:7])):
            raise ProtocolError(ErrorKind.NON_FINITE, f"detection {i}")
        try:
            dets.append(Detection(v[0:3], v[3:6], v[6], v[7]))
        except ValueError as e:
            raise ProtocolError(ErrorKind.MALFORMED, f"detection {i}: {e}") from None
    return ResultMessage(frame, tuple(dets))


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame. Raises ``ProtocolError`` on any defect."""
    data = bytes(data)
    kind, length = parse_prefix(data)
    total = PREFIX_SIZE + length + _CRC.size
    if len(data) < total:
        raise ProtocolError(ErrorKind.TRUNCATED, f"frame needs {total} bytes, got {len(data)}")
    if len(data) > total:
        raise ProtocolError(ErrorKind.MALFORMED, f"{len(data) - total} trailing bytes after frame")
    body = data[PREFIX_SIZE:PREFIX_SIZE + length]
    (crc,) = _CRC.unpack_from(data, PREFIX_SIZE + length)
    if zlib.crc32(data[4:PREFIX_SIZE + length]) != crc:
        raise ProtocolError(ErrorKind.CRC_MISMATCH, "frame checksum does not match")
    if kind is MsgType.FEATURE:
        return _decode_feature(body)
    if kind is MsgType.RESULT:
        return _decode_result(body)
    if kind is MsgType.HELLO:
        return Hello(_decode_device(body))
    return Bye(_decode_device(body))


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Message | None:
    """Read one frame from a byte stream; ``None`` on clean end of stream."""
    prefix = _read_exact(stream, PREFIX_SIZE)
    if not prefix:
        return None
    _, length = parse_prefix(prefix)
    rest = _read_exact(stream, length + _CRC.size)
    return decode_frame(prefix + rest)
