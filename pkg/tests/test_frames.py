import random

import numpy as np
import pytest

from vidbus.errors import FrameFormatError
from vidbus.frames import (
    Colorspace,
    Frame,
    QosBound,
    deserialize_frame,
    encoded_size,
    read_frame,
    serialize_frame,
    serialized_size,
)


def _frame(ts=1, width=4, height=3, colorspace=Colorspace.BGR, camera_id="cam0", fill=7):
    channels = 1 if colorspace is Colorspace.GRAY else 3
    return Frame(
        ts=ts,
        width=width,
        height=height,
        colorspace=colorspace,
        pixels=bytes([fill]) * (width * height * channels),
        camera_id=camera_id,
    )


def test_serialize_roundtrip_random_shapes():
    rng = random.Random(5)
    for _ in range(50):
        width, height = rng.randint(1, 40), rng.randint(1, 40)
        colorspace = rng.choice(list(Colorspace))
        pixels = bytes(rng.getrandbits(8) for _ in range(width * height * colorspace.channels))
        frame = Frame(
            ts=rng.getrandbits(63),
            width=width,
            height=height,
            colorspace=colorspace,
            pixels=pixels,
            camera_id=f"cam-{rng.randint(0, 99)}",
        )
        data = serialize_frame(frame)
        assert len(data) == serialized_size(frame)
        assert deserialize_frame(data) == frame


def test_read_frame_returns_offset_of_next_frame():
    first, second = _frame(ts=1), _frame(ts=2, fill=9)
    data = serialize_frame(first) + serialize_frame(second)
    decoded, offset = read_frame(data)
    assert decoded == first
    decoded, end = read_frame(data, offset)
    assert decoded == second
    assert end == len(data)


def test_deserialize_rejects_corrupt_input():
    data = serialize_frame(_frame())
    with pytest.raises(FrameFormatError) as exc:
        deserialize_frame(b"XXXX" + data[4:])
    assert "magic" in str(exc.value)
    with pytest.raises(FrameFormatError):
        deserialize_frame(data[:-1])
    with pytest.raises(FrameFormatError) as exc:
        deserialize_frame(data + b"\x00")
    assert "trailing" in str(exc.value)


def test_frame_validates_payload_length():
    with pytest.raises(ValueError) as exc:
        Frame(ts=1, width=2, height=2, colorspace=Colorspace.BGR, pixels=b"\x00" * 4, camera_id="c")
    assert "expected 12" in str(exc.value)
    with pytest.raises(ValueError):
        _frame(camera_id="")
    with pytest.raises(ValueError):
        _frame(ts=-1)


def test_array_views_keep_shape_and_identity():
    array = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    frame = Frame.from_array(10, array, Colorspace.BGR, "cam0")
    assert (frame.width, frame.height) == (3, 2)
    assert np.array_equal(frame.as_array(), array)
    gray = frame.with_pixels(array[:, :, 0], Colorspace.GRAY)
    assert gray.channels == 1
    assert (gray.ts, gray.camera_id) == (10, "cam0")


def test_encoded_size_shrinks_on_redundant_payload():
    flat = _frame(width=64, height=64)
    assert encoded_size(flat) < serialized_size(flat)


def test_qos_bound_validation():
    QosBound(100.0, 96.0)
    with pytest.raises(ValueError):
        QosBound(0.0, 96.0)
    with pytest.raises(ValueError):
        QosBound(100.0, 0.0)
    with pytest.raises(ValueError):
        QosBound(100.0, 100.5)
