"""Wire format: binary frame messages and JSON control records.

Frame messages carry 8-bit grayscale rasters with a fixed 25-byte big-endian
header; control records are length-prefixed UTF-8 JSON validated against a
published schema. Both message kinds are distinguished by a 4-byte magic so
they can share one byte stream.

Frame header layout (big-endian):

    offset  size  field
    0       4     magic "SDF1"
    4       4     stream id (u32)
    8       8     frame index (u64)
    16      2     width (u16)
    18      2     height (u16)
    20      1     pixel format (u8; 1 = 8-bit grayscale)
    21      4     payload length (u32)

followed by payload bytes, row-major, top-left origin. Control messages are
magic "SDC1", a u32 byte length, and that many bytes of JSON.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple, Union

import jsonschema
import numpy as np

FRAME_MAGIC = b"SDF1"
CONTROL_MAGIC = b"SDC1"
PIXEL_FORMAT_GRAY8 = 1

FRAME_HEADER = struct.Struct(">4sIQHHBI")
CONTROL_HEADER = struct.Struct(">4sI")


class WireError(ValueError):
    """Raised for malformed bytes or schema-invalid control records."""


@dataclass(frozen=True)
class FrameMessage:
    stream_id: int
    frame_index: int
    width: int
    height: int
    pixel_format: int
    payload: bytes

    def to_array(self) -> np.ndarray:
        """Decode the payload to a float clip frame [1, H, W] in [0, 1]."""
        if self.pixel_format != PIXEL_FORMAT_GRAY8:
            raise WireError(f"unsupported pixel format {self.pixel_format}")
        flat = np.frombuffer(self.payload, dtype=np.uint8)
        return (flat.reshape(1, self.height, self.width) / 255.0).astype(np.float64)


def quantize_frame(frame: np.ndarray) -> Tuple[np.ndarray, int]:
    """Map a float frame to uint8 by round(v * 255), clamping out-of-range
    values. Returns (bytes array [H, W], count of clamped pixels)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        if frame.shape[0] != 1:
            raise WireError("only single-channel frames are encodable")
        frame = frame[0]
    if frame.ndim != 2:
        raise WireError(f"expected [H, W] or [1, H, W], got shape {frame.shape}")
    clamped = int(np.count_nonzero((frame < 0.0) | (frame > 1.0)))
    q = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    return q, clamped


def encode_frame(frame: np.ndarray, frame_index: int, stream_id: int = 0) -> bytes:
    q, _ = quantize_frame(frame)
    h, w = q.shape
    payload = q.tobytes()
    header = FRAME_HEADER.pack(
        FRAME_MAGIC, stream_id, frame_index, w, h, PIXEL_FORMAT_GRAY8, len(payload)
    )
    return header + payload


class FrameEncoder:
    """Stateful encoder that accumulates a clamped-pixel diagnostic count."""

    def __init__(self, stream_id: int = 0):
        self.stream_id = stream_id
        self.clamped = 0
        self.encoded = 0

    def encode(self, frame: np.ndarray, frame_index: int) -> bytes:
        q, clamped = quantize_frame(frame)
        self.clamped += clamped
        self.encoded += 1
        h, w = q.shape
        payload = q.tobytes()
        return FRAME_HEADER.pack(
            FRAME_MAGIC, self.stream_id, frame_index, w, h, PIXEL_FORMAT_GRAY8, len(payload)
        ) + payload


def decode_frame(buf: bytes) -> FrameMessage:
    """Decode one complete frame message from the start of buf."""
    if len(buf) < FRAME_HEADER.size:
        raise WireError("buffer shorter than frame header")
    magic, stream_id, index, w, h, fmt, paylen = FRAME_HEADER.unpack_from(buf)
    if magic != FRAME_MAGIC:
        raise WireError(f"bad frame magic {magic!r}")
    if paylen != w * h:
        raise WireError(f"payload length {paylen} != {w}x{h}")
    if len(buf) < FRAME_HEADER.size + paylen:
        raise WireError("truncated frame payload")
    payload = bytes(buf[FRAME_HEADER.size : FRAME_HEADER.size + paylen])
    return FrameMessage(stream_id, index, w, h, fmt, payload)


# Control records clients may send. Every record carries a per-client
# sequence number; prompts additionally carry the class id to switch to.
CLIENT_CONTROL_SCHEMA = {
    "type": "object",
    "properties": {
        "type": {"enum": ["prompt", "start", "stop", "status"]},
        "seq": {"type": "integer", "minimum": 0},
        "class_id": {"type": "integer", "minimum": 0},
    },
    "required": ["type", "seq"],
    "additionalProperties": False,
    "allOf": [
        {
            "if": {"properties": {"type": {"const": "prompt"}}},
            "then": {"required": ["class_id"]},
        }
    ],
}

# Records the server sends back: connection hello, per-request acks and
# status snapshots, and error reports.
SERVER_CONTROL_SCHEMA = {
    "type": "object",
    "properties": {
        "type": {"enum": ["hello", "ack", "status_reply", "error"]},
        "seq": {"type": "integer", "minimum": 0},
        "stream_id": {"type": "integer", "minimum": 0},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "scheme": {"type": "object"},
        "applied_at_micro_step": {"type": "integer", "minimum": 0},
        "frames_emitted": {"type": "integer", "minimum": 0},
        "micro_step": {"type": "integer", "minimum": 0},
        "micro_counter": {"type": "integer", "minimum": 0},
        "active_class": {"type": "integer", "minimum": 0},
        "class_id": {"type": "integer", "minimum": 0},
        "tau": {"type": "array", "items": {"type": "number"}},
        "running": {"type": "boolean"},
        "reason": {"type": "string"},
    },
    "required": ["type"],
    "additionalProperties": False,
}


def validate_control(record: dict, schema: dict = CLIENT_CONTROL_SCHEMA) -> None:
    try:
        jsonschema.validate(record, schema)
    except jsonschema.ValidationError as e:
        raise WireError(f"invalid control record: {e.message}") from e


def encode_control(record: dict, schema: Optional[dict] = CLIENT_CONTROL_SCHEMA) -> bytes:
    if schema is not None:
        validate_control(record, schema)
    body = json.dumps(record, sort_keys=True).encode("utf-8")
    return CONTROL_HEADER.pack(CONTROL_MAGIC, len(body)) + body


def decode_control(buf: bytes) -> dict:
    if len(buf) < CONTROL_HEADER.size:
        raise WireError("buffer shorter than control header")
    magic, length = CONTROL_HEADER.unpack_from(buf)
    if magic != CONTROL_MAGIC:
        raise WireError(f"bad control magic {magic!r}")
    if len(buf) < CONTROL_HEADER.size + length:
        raise WireError("truncated control body")
    body = buf[CONTROL_HEADER.size : CONTROL_HEADER.size + length]
    try:
        record = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WireError(f"control body is not JSON: {e}") from e
    if not isinstance(record, dict):
        raise WireError("control record must be a JSON object")
    return record


Message = Union[FrameMessage, dict]


class MessageStream:
    """Incremental parser over a byte stream carrying both message kinds.

    feed() buffers bytes and returns every complete message. Unknown magics
    raise WireError: the sender is broken and resynchronization is the
    caller's policy decision.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        self._buf.extend(data)
        out: List[Message] = []
        while True:
            msg = self._try_parse()
            if msg is None:
                return out
            out.append(msg)

    def _try_parse(self) -> Optional[Message]:
        buf = self._buf
        if len(buf) < 4:
            return None
        magic = bytes(buf[:4])
        if magic == FRAME_MAGIC:
            if len(buf) < FRAME_HEADER.size:
                return None
            paylen = FRAME_HEADER.unpack_from(buf)[6]
            total = FRAME_HEADER.size + paylen
            if len(buf) < total:
                return None
            msg = decode_frame(bytes(buf[:total]))
            del buf[:total]
            return msg
        if magic == CONTROL_MAGIC:
            if len(buf) < CONTROL_HEADER.size:
                return None
            length = CONTROL_HEADER.unpack_from(buf)[1]
            total = CONTROL_HEADER.size + length
            if len(buf) < total:
                return None
            record = decode_control(bytes(buf[:total]))
            del buf[:total]
            return record
        raise WireError(f"unknown magic {magic!r}")

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def read_frame_stream(data: bytes) -> Iterator[FrameMessage]:
    """Iterate frame messages from a concatenated dump."""
    offset = 0
    while offset < len(data):
        msg = decode_frame(data[offset:])
        yield msg
        offset += FRAME_HEADER.size + len(msg.payload)
