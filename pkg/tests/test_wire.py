import socket
import struct

import pytest

from vidbus.errors import WireFormatError
from vidbus.frames import QosBound
from vidbus.wire import (
    BackfillRequest,
    CameraInfo,
    ConnectRequest,
    Connection,
    ErrorBody,
    Message,
    MessageType,
    Role,
    SetTargetRequest,
    SubscribeRequest,
    decode_camera_infos,
    encode_camera_infos,
    encode_message,
    parse_address,
    read_message,
)


@pytest.fixture
def pipe():
    left, right = socket.socketpair()
    yield Connection(left), Connection(right)
    left.close()
    right.close()


def test_messages_cross_a_socket_in_order(pipe):
    sender, receiver = pipe
    body = SubscribeRequest("cam0", 3, 7, QosBound(100.0, 96.0)).encode()
    sender.send(Message(MessageType.SUBSCRIBE, 41, body))
    sender.send(Message(MessageType.ACK, 42))
    first = receiver.recv()
    assert first is not None
    assert (first.type, first.request_id) == (MessageType.SUBSCRIBE, 41)
    request = SubscribeRequest.decode(first.body)
    assert (request.camera_id, request.begin, request.end) == ("cam0", 3, 7)
    assert request.bound == QosBound(100.0, 96.0)
    second = receiver.recv()
    assert second == Message(MessageType.ACK, 42, b"")


def test_eof_between_messages_is_clean(pipe):
    sender, receiver = pipe
    sender.close()
    assert receiver.recv() is None


def test_truncated_message_is_a_wire_error(pipe):
    sender, receiver = pipe
    data = encode_message(Message(MessageType.PUBLISH, 1, b"payload"))
    sender.sock.sendall(data[:-2])
    sender.close()
    with pytest.raises(WireFormatError):
        receiver.recv()


def test_unknown_type_and_bad_length_are_rejected(pipe):
    sender, receiver = pipe
    sender.sock.sendall(struct.pack("<IBQ", 9, 99, 1))
    with pytest.raises(WireFormatError) as exc:
        read_message(receiver.sock)
    assert "Unknown message type" in str(exc.value)
    sender.sock.sendall(struct.pack("<I", 2))
    with pytest.raises(WireFormatError):
        read_message(receiver.sock)


def test_body_decoders_reject_trailing_and_invalid_fields():
    body = ConnectRequest(Role.SUBSCRIBER, "secret").encode()
    assert ConnectRequest.decode(body) == ConnectRequest(Role.SUBSCRIBER, "secret")
    with pytest.raises(WireFormatError):
        ConnectRequest.decode(body + b"\x00")
    with pytest.raises(WireFormatError):
        ConnectRequest.decode(b"\x09" + body[1:])
    bad_bound = SubscribeRequest("cam0", 0, 1, QosBound(100.0, 90.0)).encode()
    bad_bound = bad_bound[:-16] + struct.pack("<dd", 0.0, 90.0)
    with pytest.raises(WireFormatError):
        SubscribeRequest.decode(bad_bound)


def test_inactive_set_target_carries_no_bound():
    decoded = SetTargetRequest.decode(SetTargetRequest(active=False).encode())
    assert not decoded.active
    assert decoded.bound is None
    active = SetTargetRequest(True, QosBound(80.0, 95.0), resume_from=12)
    assert SetTargetRequest.decode(active.encode()) == active


def test_backfill_range_must_not_run_backwards():
    assert BackfillRequest.decode(BackfillRequest(3, 3).encode()) == BackfillRequest(3, 3)
    with pytest.raises(WireFormatError):
        BackfillRequest.decode(BackfillRequest(9, 4).encode())
    assert MessageType(16) is MessageType.BACKFILL


def test_camera_infos_and_error_bodies():
    infos = [CameraInfo("cam0", 640, 480, 5.0), CameraInfo("cam1", 320, 240, 2.5, online=False)]
    assert decode_camera_infos(encode_camera_infos(infos)) == infos
    assert decode_camera_infos(encode_camera_infos([])) == []
    long = ErrorBody(3, "x" * 5000)
    assert len(ErrorBody.decode(long.encode()).message) == 4000


def test_parse_address():
    assert parse_address("10.0.0.2:7000") == ("10.0.0.2", 7000)
    assert parse_address(":7000") == ("127.0.0.1", 7000)
    for text in ("localhost", "host:http", "host:70000"):
        with pytest.raises(ValueError):
            parse_address(text)
