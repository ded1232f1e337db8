"""Length-prefixed binary RPC framing shared by brokers and clients.

Every message is ``u32 length | u8 type | u64 request id | body`` in
little-endian order; ``length`` counts the type, request id and body bytes.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple

from .errors import WireFormatError
from .frames import QosBound

MAX_MESSAGE_BYTES = 64 * 1024 * 1024
OPEN_END = 2**64 - 1

_LENGTH = struct.Struct("<I")
_TYPE_ID = struct.Struct("<BQ")


class MessageType(IntEnum):
    CONNECT = 1
    CONNECT_ACK = 2
    PUBLISH = 3
    PUBLISH_ACK = 4
    GET_CAMERA_INFO = 5
    CAMERA_INFO_RESP = 6
    SUBSCRIBE = 7
    FRAME_DELIVERY = 8
    UNSUBSCRIBE = 9
    ACK = 10
    REGISTER = 11
    UNREGISTER = 12
    ERROR = 13
    INFEASIBLE_NOTICE = 14
    SET_TARGET = 15
    BACKFILL = 16


class Role(IntEnum):
    PUBLISHER = 1
    SUBSCRIBER = 2
    CAMERA = 3


class PublishResult(IntEnum):
    ACCEPTED = 0
    REJECTED_STALE = 1


@dataclass(frozen=True)
class Message:
    type: MessageType
    request_id: int
    body: bytes = b""


def encode_message(message: Message) -> bytes:
    length = _TYPE_ID.size + len(message.body)
    return (
        _LENGTH.pack(length)
        + _TYPE_ID.pack(int(message.type), message.request_id)
        + message.body
    )


def recv_exactly(sock: socket.socket, n: int) -> Optional[bytes]:
    """Read ``n`` bytes; ``None`` on EOF before the first byte."""
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            if not chunks:
                return None
            raise WireFormatError(f"Connection closed after {len(chunks)} of {n} bytes.")
        chunks.extend(chunk)
    return bytes(chunks)


def read_message(sock: socket.socket) -> Optional[Message]:
    head = recv_exactly(sock, _LENGTH.size)
    if head is None:
        return None
    (length,) = _LENGTH.unpack(head)
    if length < _TYPE_ID.size or length > MAX_MESSAGE_BYTES:
        raise WireFormatError(f"Bad message length {length}.")
    rest = recv_exactly(sock, length)
    if rest is None:
        raise WireFormatError("Connection closed inside a message.")
    type_code, request_id = _TYPE_ID.unpack_from(rest)
    try:
        message_type = MessageType(type_code)
    except ValueError as exc:
        raise WireFormatError(f"Unknown message type {type_code}.") from exc
    return Message(message_type, request_id, rest[_TYPE_ID.size :])


class Connection:
    """A socket plus a send lock so several threads can write whole messages."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.send_lock = threading.Lock()
        self._closed = False

    def send(self, message: Message) -> None:
        data = encode_message(message)
        with self.send_lock:
            self.sock.sendall(data)

    def send_locked(self, message: Message) -> None:
        """Send while the caller already holds ``send_lock``."""
        self.sock.sendall(encode_message(message))

    def recv(self) -> Optional[Message]:
        return read_message(self.sock)

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"Address must look like host:port, got '{text}'.")
    value = int(port)
    if not 0 <= value <= 65535:
        raise ValueError(f"Port out of range in '{text}'.")
    return host or "127.0.0.1", value


# -- bodies ---------------------------------------------------------------------


class BodyWriter:
    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def u8(self, value: int) -> "BodyWriter":
        self._parts.append(struct.pack("<B", value))
        return self

    def u16(self, value: int) -> "BodyWriter":
        self._parts.append(struct.pack("<H", value))
        return self

    def u32(self, value: int) -> "BodyWriter":
        self._parts.append(struct.pack("<I", value))
        return self

    def u64(self, value: int) -> "BodyWriter":
        self._parts.append(struct.pack("<Q", value))
        return self

    def f64(self, value: float) -> "BodyWriter":
        self._parts.append(struct.pack("<d", value))
        return self

    def text(self, value: str) -> "BodyWriter":
        data = value.encode("utf-8")
        self.u16(len(data))
        self._parts.append(data)
        return self

    def build(self) -> bytes:
        return b"".join(self._parts)


class BodyReader:
    def __init__(self, body: bytes):
        self._view = memoryview(body)
        self._pos = 0

    def _take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self._pos + size > len(self._view):
            raise WireFormatError("Message body truncated.")
        (value,) = struct.unpack_from(fmt, self._view, self._pos)
        self._pos += size
        return value

    def u8(self) -> int:
        return self._take("<B")

    def u16(self) -> int:
        return self._take("<H")

    def u32(self) -> int:
        return self._take("<I")

    def u64(self) -> int:
        return self._take("<Q")

    def f64(self) -> float:
        return self._take("<d")

    def text(self) -> str:
        size = self.u16()
        if self._pos + size > len(self._view):
            raise WireFormatError("Message string truncated.")
        value = bytes(self._view[self._pos : self._pos + size]).decode("utf-8")
        self._pos += size
        return value

    def end(self) -> None:
        if self._pos != len(self._view):
            raise WireFormatError(f"{len(self._view) - self._pos} unexpected trailing bytes.")


@dataclass(frozen=True)
class ConnectRequest:
    role: Role
    token: str = ""

    def encode(self) -> bytes:
        return BodyWriter().u8(int(self.role)).text(self.token).build()

    @classmethod
    def decode(cls, body: bytes) -> "ConnectRequest":
        reader = BodyReader(body)
        try:
            role = Role(reader.u8())
        except ValueError as exc:
            raise WireFormatError(str(exc)) from exc
        token = reader.text()
        reader.end()
        return cls(role, token)


@dataclass(frozen=True)
class CameraInfo:
    camera_id: str
    width: int
    height: int
    fps: float
    online: bool = True


def encode_camera_infos(infos: List[CameraInfo]) -> bytes:
    writer = BodyWriter().u32(len(infos))
    for info in infos:
        writer.text(info.camera_id).u16(info.width).u16(info.height).f64(info.fps).u8(
            1 if info.online else 0
        )
    return writer.build()


def decode_camera_infos(body: bytes) -> List[CameraInfo]:
    reader = BodyReader(body)
    infos = [
        CameraInfo(reader.text(), reader.u16(), reader.u16(), reader.f64(), bool(reader.u8()))
        for _ in range(reader.u32())
    ]
    reader.end()
    return infos


@dataclass(frozen=True)
class SubscribeRequest:
    camera_id: str
    begin: int
    end: int
    bound: QosBound

    def encode(self) -> bytes:
        return (
            BodyWriter()
            .text(self.camera_id)
            .u64(self.begin)
            .u64(self.end)
            .f64(self.bound.latency_max_ms)
            .f64(self.bound.accuracy_min)
            .build()
        )

    @classmethod
    def decode(cls, body: bytes) -> "SubscribeRequest":
        reader = BodyReader(body)
        camera_id, begin, end = reader.text(), reader.u64(), reader.u64()
        latency, accuracy = reader.f64(), reader.f64()
        reader.end()
        try:
            bound = QosBound(latency, accuracy)
        except ValueError as exc:
            raise WireFormatError(str(exc)) from exc
        return cls(camera_id, begin, end, bound)


@dataclass(frozen=True)
class RegisterRequest:
    camera_id: str
    width: int
    height: int
    fps: float
    endpoint: str = ""

    def encode(self) -> bytes:
        return (
            BodyWriter()
            .text(self.camera_id)
            .u16(self.width)
            .u16(self.height)
            .f64(self.fps)
            .text(self.endpoint)
            .build()
        )

    @classmethod
    def decode(cls, body: bytes) -> "RegisterRequest":
        reader = BodyReader(body)
        request = cls(reader.text(), reader.u16(), reader.u16(), reader.f64(), reader.text())
        reader.end()
        return request


@dataclass(frozen=True)
class SetTargetRequest:
    active: bool
    bound: Optional[QosBound] = None
    resume_from: int = 0

    def encode(self) -> bytes:
        latency = self.bound.latency_max_ms if self.bound else 0.0
        accuracy = self.bound.accuracy_min if self.bound else 0.0
        return (
            BodyWriter()
            .u8(1 if self.active else 0)
            .f64(latency)
            .f64(accuracy)
            .u64(self.resume_from)
            .build()
        )

    @classmethod
    def decode(cls, body: bytes) -> "SetTargetRequest":
        reader = BodyReader(body)
        active, latency, accuracy, resume_from = (
            bool(reader.u8()),
            reader.f64(),
            reader.f64(),
            reader.u64(),
        )
        reader.end()
        bound = None
        if active:
            try:
                bound = QosBound(latency, accuracy)
            except ValueError as exc:
                raise WireFormatError(str(exc)) from exc
        return cls(active, bound, resume_from)


@dataclass(frozen=True)
class BackfillRequest:
    """Replay ``[begin, end]`` of the camera log outside the running transfer."""

    begin: int
    end: int

    def encode(self) -> bytes:
        return BodyWriter().u64(self.begin).u64(self.end).build()

    @classmethod
    def decode(cls, body: bytes) -> "BackfillRequest":
        reader = BodyReader(body)
        request = cls(reader.u64(), reader.u64())
        reader.end()
        if request.begin > request.end:
            raise WireFormatError("Backfill begin is after end.")
        return request


@dataclass(frozen=True)
class AckBody:
    value: int = 0
    metric: float = 0.0

    def encode(self) -> bytes:
        return BodyWriter().u64(self.value).f64(self.metric).build()

    @classmethod
    def decode(cls, body: bytes) -> "AckBody":
        reader = BodyReader(body)
        ack = cls(reader.u64(), reader.f64())
        reader.end()
        return ack


@dataclass(frozen=True)
class ErrorBody:
    code: int
    message: str

    def encode(self) -> bytes:
        return BodyWriter().u16(self.code).text(self.message[:4000]).build()

    @classmethod
    def decode(cls, body: bytes) -> "ErrorBody":
        reader = BodyReader(body)
        error = cls(reader.u16(), reader.text())
        reader.end()
        return error


@dataclass(frozen=True)
class InfeasibleNotice:
    camera_id: str
    best_accuracy: float

    def encode(self) -> bytes:
        return BodyWriter().text(self.camera_id).f64(self.best_accuracy).build()

    @classmethod
    def decode(cls, body: bytes) -> "InfeasibleNotice":
        reader = BodyReader(body)
        notice = cls(reader.text(), reader.f64())
        reader.end()
        return notice


def encode_text(value: str) -> bytes:
    return BodyWriter().text(value).build()


def decode_text(body: bytes) -> str:
    reader = BodyReader(body)
    value = reader.text()
    reader.end()
    return value


def encode_u64(value: int) -> bytes:
    return BodyWriter().u64(value).build()


def decode_u64(body: bytes) -> int:
    reader = BodyReader(body)
    value = reader.u64()
    reader.end()
    return value


def encode_u8(value: int) -> bytes:
    return BodyWriter().u8(value).build()


def decode_u8(body: bytes) -> int:
    reader = BodyReader(body)
    value = reader.u8()
    reader.end()
    return value
