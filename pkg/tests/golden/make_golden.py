"""Writes the golden wire frames with struct and zlib only, independent of the package encoder.

Run from this directory: ``python make_golden.py``.
"""

import struct
import zlib
from pathlib import Path

HERE = Path(__file__).parent


def frame(kind: int, body: bytes) -> bytes:
    head = b"SCMI" + struct.pack("<BBI", 1, kind, len(body))
    return head + body + struct.pack("<I", zlib.crc32(head[4:] + body) & 0xFFFFFFFF)


def feature() -> bytes:
    # device 3, frame 42, timestamp 1000000; grid origin (-40,-40,-3.85), voxel 0.2, dims (400,400,20), stride 1
    body = struct.pack("<HQQ", 3, 42, 1_000_000)
    body += struct.pack("<3d", -40.0, -40.0, -3.85) + struct.pack("<3d", 0.2, 0.2, 0.2)
    body += struct.pack("<3I", 400, 400, 20) + struct.pack("<I", 1)
    body += struct.pack("<HI", 2, 2)
    body += struct.pack("<3i2f", 5, 6, 0, 1.0, -2.5)   # key order: z then y then x
    body += struct.pack("<3i2f", 1, 0, 7, 0.25, 8.0)
    return frame(2, body)


def result() -> bytes:
    body = struct.pack("<QI", 42, 1) + struct.pack("<7fH", 1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.75, 0)
    return frame(3, body)


GOLDEN = {
    "hello.bin": frame(1, struct.pack("<H", 3)),
    "bye.bin": frame(4, struct.pack("<H", 3)),
    "feature.bin": feature(),
    "empty_feature.bin": frame(2, struct.pack("<HQQ3d3d3IIHI", 0, 0, 0, 0, 0, 0, 1, 1, 1, 4, 4, 4, 2, 16, 0)),
    "result.bin": result(),
}

if __name__ == "__main__":
    for name, data in GOLDEN.items():
        (HERE / name).write_bytes(data)
