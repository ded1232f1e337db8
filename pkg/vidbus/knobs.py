"""Frame-quality tuning knobs: resolution, colorspace, box blur and frame differencing.

Every stage is a pure function on :class:`~vidbus.frames.Frame` values; only the
frame-differencing state carries memory between frames of one camera.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import cv2

from .errors import (
    KernelTooLargeError,
    ShapeMismatchError,
    UnsupportedConversionError,
    UpscaleRequestedError,
)
from .frames import Colorspace, Frame

Resolution = Tuple[int, int]

RESOLUTIONS: Tuple[Resolution, ...] = ((1312, 736), (960, 528), (640, 352), (480, 256))
COLORSPACES: Tuple[Colorspace, ...] = (
    Colorspace.GRAY,
    Colorspace.HSV,
    Colorspace.LAB,
    Colorspace.LUV,
)
BLUR_KERNELS: Tuple[int, ...] = (5, 8, 10, 15)
FRAMEDIFF_THRESHOLDS: Tuple[float, ...] = (0.0, 0.18, 0.36, 0.54, 0.72)

_CS_NAMES = {cs: cs.name.lower() for cs in COLORSPACES}


@dataclass(frozen=True)
class KnobSetting:
    """One combination of knob values. ``None`` means identity/off for that knob."""

    resolution: Optional[Resolution] = None
    colorspace: Optional[Colorspace] = None
    blur_kernel: Optional[int] = None
    framediff_threshold: Optional[float] = None

    def __post_init__(self) -> None:
        if self.resolution is not None:
            res = (int(self.resolution[0]), int(self.resolution[1]))
            if res not in RESOLUTIONS:
                raise ValueError(f"Unsupported resolution {res}; allowed: {list(RESOLUTIONS)}")
            object.__setattr__(self, "resolution", res)
        if self.colorspace is not None:
            if Colorspace(self.colorspace) not in COLORSPACES:
                raise ValueError(f"Unsupported colorspace knob {self.colorspace!r}.")
            object.__setattr__(self, "colorspace", Colorspace(self.colorspace))
        if self.blur_kernel is not None and self.blur_kernel not in BLUR_KERNELS:
            raise ValueError(f"Unsupported blur kernel {self.blur_kernel}; allowed: {BLUR_KERNELS}")
        if self.framediff_threshold is not None:
            object.__setattr__(
                self, "framediff_threshold", _snap_threshold(self.framediff_threshold)
            )

    @property
    def is_identity(self) -> bool:
        return (
            self.resolution is None
            and self.colorspace is None
            and self.blur_kernel is None
            and self.framediff_threshold is None
        )

    def to_text(self) -> str:
        parts: List[str] = []
        if self.resolution is not None:
            parts.append(f"res={self.resolution[0]}x{self.resolution[1]}")
        if self.colorspace is not None:
            parts.append(f"cs={_CS_NAMES[self.colorspace]}")
        if self.blur_kernel is not None:
            parts.append(f"blur={self.blur_kernel}")
        if self.framediff_threshold is not None:
            parts.append(f"fd={self.framediff_threshold:g}")
        return ";".join(parts) if parts else "identity"

    @classmethod
    def parse(cls, text: str) -> "KnobSetting":
        text = text.strip()
        if text in ("", "identity"):
            return cls()
        fields: dict = {}
        for part in text.split(";"):
            key, sep, value = part.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep or not value:
                raise ValueError(f"Malformed knob field '{part}'.")
            if key in fields:
                raise ValueError(f"Duplicate knob field '{key}'.")
            if key == "res":
                width, _, height = value.lower().partition("x")
                try:
                    fields[key] = (int(width), int(height))
                except ValueError as exc:
                    raise ValueError(f"Malformed resolution '{value}'.") from exc
            elif key == "cs":
                try:
                    fields[key] = Colorspace[value.upper()]
                except KeyError as exc:
                    raise ValueError(f"Unknown colorspace '{value}'.") from exc
            elif key == "blur":
                fields[key] = int(value)
            elif key == "fd":
                fields[key] = float(value)
            else:
                raise ValueError(f"Unknown knob '{key}'.")
        return cls(
            resolution=fields.get("res"),
            colorspace=fields.get("cs"),
            blur_kernel=fields.get("blur"),
            framediff_threshold=fields.get("fd"),
        )

    def __str__(self) -> str:
        return self.to_text()


IDENTITY = KnobSetting()


def _snap_threshold(value: float) -> float:
    for allowed in FRAMEDIFF_THRESHOLDS:
        if math.isclose(value, allowed, abs_tol=1e-9):
            return allowed
    raise ValueError(f"Unsupported frame-diff threshold {value}; allowed: {FRAMEDIFF_THRESHOLDS}")


def enumerate_settings() -> Iterator[KnobSetting]:
    """Every knob combination, identity first."""
    for res, cs, blur, fd in itertools.product(
        (None, *RESOLUTIONS),
        (None, *COLORSPACES),
        (None, *BLUR_KERNELS),
        (None, *FRAMEDIFF_THRESHOLDS),
    ):
        yield KnobSetting(resolution=res, colorspace=cs, blur_kernel=blur, framediff_threshold=fd)


# -- resolution ----------------------------------------------------------------


def fit_within(width: int, height: int, target: Resolution) -> Resolution:
    if target[0] > width or target[1] > height:
        raise UpscaleRequestedError(
            f"Target {target[0]}x{target[1]} exceeds native {width}x{height}."
        )
    scale = min(target[0] / width, target[1] / height)
    # round() is round-half-to-even
    return max(1, round(width * scale)), max(1, round(height * scale))


def downscale(frame: Frame, target: Optional[Resolution]) -> Frame:
    if target is None:
        return frame
    out_w, out_h = fit_within(frame.width, frame.height, target)
    if (out_w, out_h) == (frame.width, frame.height):
        return frame
    resized = cv2.resize(frame.as_array(), (out_w, out_h), interpolation=cv2.INTER_LINEAR)
    return frame.with_pixels(resized)


# -- colorspace ----------------------------------------------------------------

# OpenCV's 8-bit conversions: H in [0, 180), L/a/b and L/u/v scaled into [0, 255]
_CONVERSIONS = {
    Colorspace.GRAY: cv2.COLOR_BGR2GRAY,
    Colorspace.HSV: cv2.COLOR_BGR2HSV,
    Colorspace.LAB: cv2.COLOR_BGR2Lab,
    Colorspace.LUV: cv2.COLOR_BGR2Luv,
}


def convert_colorspace(frame: Frame, colorspace: Optional[Colorspace]) -> Frame:
    if colorspace is None:
        return frame
    if frame.colorspace is not Colorspace.BGR:
        raise UnsupportedConversionError(
            f"Only BGR input can be converted (got {frame.colorspace.name})."
        )
    code = _CONVERSIONS.get(Colorspace(colorspace))
    if code is None:
        raise UnsupportedConversionError(f"No conversion from BGR to {colorspace!r}.")
    return frame.with_pixels(cv2.cvtColor(frame.as_array(), code), Colorspace(colorspace))


# -- blur ----------------------------------------------------------------------


def blur(frame: Frame, kernel: Optional[int]) -> Frame:
    if kernel is None:
        return frame
    if kernel < 1 or kernel > min(frame.width, frame.height):
        raise KernelTooLargeError(
            f"Kernel {kernel} does not fit a {frame.width}x{frame.height} frame."
        )
    # anchor at kernel // 2, edges replicated
    out = cv2.blur(frame.as_array(), (kernel, kernel), borderType=cv2.BORDER_REPLICATE)
    return frame.with_pixels(out)


# -- frame differencing --------------------------------------------------------


def frame_diff(prev: Frame, cur: Frame) -> float:
    """Mean absolute pixel difference, normalized to [0, 1]."""
    if (prev.width, prev.height, prev.colorspace) != (cur.width, cur.height, cur.colorspace):
        raise ShapeMismatchError(
            f"Cannot diff {prev.width}x{prev.height} {prev.colorspace.name} against "
            f"{cur.width}x{cur.height} {cur.colorspace.name}."
        )
    delta = cv2.absdiff(prev.as_array(), cur.as_array())
    return float(delta.mean()) / 255.0


@dataclass
class FrameDiffState:
    """Last transmitted (unmodified) frame of one camera."""

    prev: Optional[Frame] = None


def should_drop(state: FrameDiffState, cur: Frame, threshold: Optional[float]) -> bool:
    if threshold is not None and state.prev is not None:
        if state.prev.camera_id != cur.camera_id:
            raise ShapeMismatchError(
                f"Frame-diff state belongs to '{state.prev.camera_id}', got '{cur.camera_id}'."
            )
        if frame_diff(state.prev, cur) <= threshold:
            return True
    state.prev = cur
    return False


def apply_setting(
    frame: Frame, setting: KnobSetting, state: Optional[FrameDiffState] = None
) -> Optional[Frame]:
    """Run the knob pipeline; ``None`` means the frame was dropped."""
    if state is not None and should_drop(state, frame, setting.framediff_threshold):
        return None
    out = downscale(frame, setting.resolution)
    out = convert_colorspace(out, setting.colorspace)
    return blur(out, setting.blur_kernel)
