import random

import numpy as np
import pytest

from vidbus.errors import (
    KernelTooLargeError,
    ShapeMismatchError,
    UnsupportedConversionError,
    UpscaleRequestedError,
)
from vidbus.frames import Colorspace, Frame, encoded_size
from vidbus.knobs import (
    BLUR_KERNELS,
    COLORSPACES,
    IDENTITY,
    RESOLUTIONS,
    FrameDiffState,
    KnobSetting,
    apply_setting,
    blur,
    convert_colorspace,
    downscale,
    enumerate_settings,
    fit_within,
    frame_diff,
    should_drop,
)
from vidbus.sources import SyntheticSource


@pytest.fixture(scope="module")
def corpus():
    return list(SyntheticSource("cam0", 1920, 1080, count=2, seed=3).frames())


def _gray(values, ts=1, camera_id="cam0"):
    array = np.asarray(values, dtype=np.uint8)
    return Frame.from_array(ts, array, Colorspace.GRAY, camera_id)


def _apply(frame, setting):
    out = apply_setting(frame, setting)
    assert out is not None
    return out


def _bgr(pixel, width=2, height=2):
    array = np.tile(np.asarray(pixel, dtype=np.uint8), (height, width, 1))
    return Frame.from_array(1, array, Colorspace.BGR, "cam0")


def test_setting_text_roundtrip_and_validation():
    setting = KnobSetting.parse("res=480x256;cs=gray;blur=5;fd=0.18")
    assert setting.resolution == (480, 256)
    assert setting.colorspace is Colorspace.GRAY
    assert setting.to_text() == "res=480x256;cs=gray;blur=5;fd=0.18"
    assert KnobSetting.parse("identity") == IDENTITY
    assert IDENTITY.to_text() == "identity"

    with pytest.raises(ValueError) as exc:
        KnobSetting.parse("res=800x600")
    assert "Unsupported resolution" in str(exc.value)
    with pytest.raises(ValueError):
        KnobSetting.parse("blur=7")
    with pytest.raises(ValueError):
        KnobSetting.parse("fd=0.5")
    with pytest.raises(ValueError):
        KnobSetting.parse("cs=xyz")
    with pytest.raises(ValueError) as exc:
        KnobSetting.parse("blur=5;blur=8")
    assert "Duplicate" in str(exc.value)


def test_enumerate_settings_covers_every_combination():
    settings = list(enumerate_settings())
    assert settings[0] == IDENTITY
    assert len(settings) == 5 * 5 * 5 * 6
    assert len(set(settings)) == len(settings)


def test_fit_within_keeps_aspect_ratio():
    assert fit_within(1920, 1080, (480, 256)) == (455, 256)
    assert fit_within(1312, 736, (1312, 736)) == (1312, 736)
    with pytest.raises(UpscaleRequestedError):
        fit_within(320, 240, (480, 256))


def test_downscale_identity_and_constant_field():
    frame = _bgr((10, 20, 30), width=1312, height=736)
    assert downscale(frame, (1312, 736)) is frame
    small = downscale(frame, (480, 256))
    assert (small.width, small.height) == (455, 256)
    assert set(small.pixels) == {10, 20, 30}
    assert (small.ts, small.camera_id) == (frame.ts, frame.camera_id)


def test_gray_conversion_uses_bt601_luma():
    white = convert_colorspace(_bgr((255, 255, 255)), Colorspace.GRAY)
    assert white.channels == 1
    assert set(white.pixels) == {255}
    blue = convert_colorspace(_bgr((255, 0, 0)), Colorspace.GRAY)
    assert set(blue.pixels) == {29}
    assert len(blue.pixels) * 3 == len(_bgr((255, 0, 0)).pixels)


def test_colorspace_conversions_tag_output():
    frame = _bgr((40, 120, 200))
    for colorspace in COLORSPACES:
        out = convert_colorspace(frame, colorspace)
        assert out.colorspace is colorspace
        assert out.channels == colorspace.channels
    gray = convert_colorspace(frame, Colorspace.GRAY)
    with pytest.raises(UnsupportedConversionError):
        convert_colorspace(gray, Colorspace.HSV)


def test_hsv_and_lab_use_8bit_ranges():
    def pixel(bgr, colorspace):
        return tuple(convert_colorspace(_bgr(bgr), colorspace).as_array()[0, 0])

    assert pixel((0, 0, 255), Colorspace.HSV) == (0, 255, 255)
    assert pixel((255, 0, 0), Colorspace.HSV) == (120, 255, 255)
    assert pixel((255, 255, 255), Colorspace.LAB) == (255, 128, 128)
    assert pixel((0, 0, 0), Colorspace.LAB) == (0, 128, 128)


def test_blur_constant_and_ramp_center():
    constant = _gray(np.full((12, 12), 77))
    for kernel in BLUR_KERNELS[:3]:
        assert blur(constant, kernel).pixels == constant.pixels
    ramp = _gray(np.arange(25).reshape(5, 5))
    out = blur(ramp, 5).as_array()
    assert out[2, 2, 0] == 12
    with pytest.raises(KernelTooLargeError):
        blur(_gray(np.zeros((4, 4))), 5)


def test_frame_diff_bounds_and_single_pixel():
    zeros = _gray(np.zeros((10, 10)))
    full = _gray(np.full((10, 10), 255))
    assert frame_diff(zeros, zeros) == 0.0
    assert frame_diff(zeros, full) == 1.0
    changed = np.zeros((10, 10))
    changed[3, 4] = 255
    one = _gray(changed)
    assert frame_diff(zeros, one) == pytest.approx(0.01)
    assert frame_diff(one, zeros) == frame_diff(zeros, one)
    with pytest.raises(ShapeMismatchError):
        frame_diff(zeros, _gray(np.zeros((5, 10))))


def test_should_drop_matches_brute_force_replay():
    rng = random.Random(11)
    base = np.full((8, 8), 100, dtype=np.int16)
    frames = []
    for ts in range(1, 101):
        step = rng.choice([0, 0, 10, 40, 90, 200])
        frames.append(_gray(np.clip(base + step, 0, 255), ts=ts))
    for threshold in (None, 0.0, 0.18, 0.36, 0.72):
        state = FrameDiffState()
        observed = [should_drop(state, frame, threshold) for frame in frames]

        expected = []
        last_sent = None
        for frame in frames:
            if threshold is not None and last_sent is not None:
                a = np.frombuffer(last_sent.pixels, dtype=np.uint8).astype(int)
                b = np.frombuffer(frame.pixels, dtype=np.uint8).astype(int)
                if np.abs(a - b).mean() / 255.0 <= threshold:
                    expected.append(True)
                    continue
            expected.append(False)
            last_sent = frame
        assert observed == expected
    assert not any(should_drop(FrameDiffState(), f, None) for f in frames)


def test_should_drop_rejects_foreign_camera():
    state = FrameDiffState()
    should_drop(state, _gray(np.zeros((4, 4))), 0.18)
    with pytest.raises(ShapeMismatchError):
        should_drop(state, _gray(np.zeros((4, 4)), ts=2, camera_id="cam9"), 0.18)


def test_apply_setting_identity_and_drop():
    frame = _bgr((1, 2, 3), width=16, height=16)
    assert apply_setting(frame, IDENTITY, FrameDiffState()) == frame
    state = FrameDiffState()
    setting = KnobSetting(framediff_threshold=0.0)
    assert apply_setting(frame, setting, state) == frame
    assert apply_setting(frame, setting, state) is None


def test_single_knobs_never_grow_encoded_size(corpus):
    for frame in corpus:
        native = encoded_size(frame)
        for resolution in RESOLUTIONS:
            assert encoded_size(_apply(frame, KnobSetting(resolution=resolution))) < native
        for colorspace in COLORSPACES:
            assert encoded_size(_apply(frame, KnobSetting(colorspace=colorspace))) <= native
        for kernel in BLUR_KERNELS:
            assert encoded_size(_apply(frame, KnobSetting(blur_kernel=kernel))) <= native


def test_combined_setting_is_deterministic_and_smaller(corpus):
    setting = KnobSetting.parse("res=480x256;cs=gray;blur=5")
    frame = corpus[0]
    first = apply_setting(frame, setting, FrameDiffState())
    second = apply_setting(frame, setting, FrameDiffState())
    assert first == second
    assert first is not None
    assert (first.width, first.height, first.colorspace) == (455, 256, Colorspace.GRAY)
    assert encoded_size(first) < encoded_size(frame)
