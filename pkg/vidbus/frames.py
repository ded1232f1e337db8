"""Frame model, QoS bound and the MEZ1 frame serialization."""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

import numpy as np

from .errors import FrameFormatError


class Colorspace(IntEnum):
    BGR = 0
    GRAY = 1
    HSV = 2
    LAB = 3
    LUV = 4

    @property
    def channels(self) -> int:
        return 1 if self is Colorspace.GRAY else 3


MAGIC = b"MEZ1"
VERSION = 1
DEFLATE_LEVEL = 6
MAX_DIMENSION = 0xFFFF

# magic(4) version(u8) ts(u64) width(u16) height(u16) colorspace(u8) camera_len(u16)
_HEAD = struct.Struct("<4sBQHHBH")
_PAYLOAD_LEN = struct.Struct("<I")


def now_micros() -> int:
    return time.time_ns() // 1000


@dataclass(frozen=True)
class Frame:
    ts: int
    width: int
    height: int
    colorspace: Colorspace
    pixels: bytes
    camera_id: str

    def __post_init__(self) -> None:
        if self.ts < 0:
            raise ValueError("Frame timestamp must be non-negative.")
        if not (1 <= self.width <= MAX_DIMENSION and 1 <= self.height <= MAX_DIMENSION):
            raise ValueError(f"Frame dimensions out of range: {self.width}x{self.height}")
        if not self.camera_id:
            raise ValueError("Frame camera_id must be non-empty.")
        cs = Colorspace(self.colorspace)
        object.__setattr__(self, "colorspace", cs)
        expected = self.width * self.height * cs.channels
        if len(self.pixels) != expected:
            raise ValueError(
                f"Pixel payload has {len(self.pixels)} bytes, expected {expected} "
                f"for {self.width}x{self.height} {cs.name}."
            )

    @property
    def channels(self) -> int:
        return self.colorspace.channels

    def as_array(self) -> np.ndarray:
        """Read-only ``(height, width, channels)`` uint8 view of the pixels."""
        arr = np.frombuffer(self.pixels, dtype=np.uint8)
        return arr.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(
        cls, ts: int, array: np.ndarray, colorspace: Colorspace, camera_id: str
    ) -> "Frame":
        data = np.ascontiguousarray(array, dtype=np.uint8)
        if data.ndim == 2:
            data = data[:, :, np.newaxis]
        height, width = data.shape[:2]
        return cls(
            ts=ts,
            width=width,
            height=height,
            colorspace=colorspace,
            pixels=data.tobytes(),
            camera_id=camera_id,
        )

    def with_pixels(self, array: np.ndarray, colorspace: Colorspace | None = None) -> "Frame":
        return Frame.from_array(
            self.ts, array, colorspace if colorspace is not None else self.colorspace, self.camera_id
        )


@dataclass(frozen=True)
class QosBound:
    latency_max_ms: float
    accuracy_min: float

    def __post_init__(self) -> None:
        if not self.latency_max_ms > 0:
            raise ValueError("latency_max_ms must be > 0.")
        if not 0 < self.accuracy_min <= 100:
            raise ValueError("accuracy_min must be in (0, 100].")


def _header(frame: Frame) -> bytes:
    camera = frame.camera_id.encode("utf-8")
    return (
        _HEAD.pack(
            MAGIC,
            VERSION,
            frame.ts,
            frame.width,
            frame.height,
            int(frame.colorspace),
            len(camera),
        )
        + camera
    )


def serialize_frame(frame: Frame) -> bytes:
    return _header(frame) + _PAYLOAD_LEN.pack(len(frame.pixels)) + frame.pixels


def serialized_size(frame: Frame) -> int:
    return _HEAD.size + len(frame.camera_id.encode("utf-8")) + _PAYLOAD_LEN.size + len(frame.pixels)


def read_frame(buffer: bytes | memoryview, offset: int = 0) -> Tuple[Frame, int]:
    """Decode one frame at ``offset``; returns the frame and the offset after it."""
    view = memoryview(buffer)
    if len(view) - offset < _HEAD.size:
        raise FrameFormatError("Truncated frame header.")
    magic, version, ts, width, height, cs_code, cam_len = _HEAD.unpack_from(view, offset)
    if magic != MAGIC:
        raise FrameFormatError(f"Bad frame magic {magic!r}.")
    if version != VERSION:
        raise FrameFormatError(f"Unsupported frame version {version}.")
    pos = offset + _HEAD.size
    if len(view) - pos < cam_len + _PAYLOAD_LEN.size:
        raise FrameFormatError("Truncated frame camera id.")
    camera_id = bytes(view[pos : pos + cam_len]).decode("utf-8")
    pos += cam_len
    (payload_len,) = _PAYLOAD_LEN.unpack_from(view, pos)
    pos += _PAYLOAD_LEN.size
    if len(view) - pos < payload_len:
        raise FrameFormatError("Truncated frame payload.")
    try:
        colorspace = Colorspace(cs_code)
    except ValueError as exc:
        raise FrameFormatError(f"Unknown colorspace code {cs_code}.") from exc
    try:
        frame = Frame(
            ts=ts,
            width=width,
            height=height,
            colorspace=colorspace,
            pixels=bytes(view[pos : pos + payload_len]),
            camera_id=camera_id,
        )
    except ValueError as exc:
        raise FrameFormatError(str(exc)) from exc
    return frame, pos + payload_len


def deserialize_frame(data: bytes) -> Frame:
    frame, end = read_frame(data)
    if end != len(data):
        raise FrameFormatError(f"{len(data) - end} trailing bytes after frame.")
    return frame


def deflate(payload: bytes) -> bytes:
    # raw DEFLATE stream, no zlib wrapper
    compressor = zlib.compressobj(DEFLATE_LEVEL, zlib.DEFLATED, -15)
    return compressor.compress(payload) + compressor.flush()


def encoded_size(frame: Frame) -> int:
    """Header bytes plus the DEFLATE-compressed payload length."""
    return len(_header(frame)) + _PAYLOAD_LEN.size + len(deflate(frame.pixels))
