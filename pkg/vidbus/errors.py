"""Exception hierarchy shared by every vidbus module.

Validation-style failures also derive from ``ValueError`` so callers that only
know about the standard exception keep working.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Dict, Optional, Type


class VidbusError(Exception):
    """Base class for all vidbus errors."""


# -- frames / memlog ---------------------------------------------------------


class FrameFormatError(VidbusError, ValueError):
    pass


class FrameTooLargeError(VidbusError, ValueError):
    def __init__(self, nbytes: int, budget: int):
        super().__init__(f"Frame of {nbytes} bytes exceeds segment budget of {budget} bytes.")
        self.nbytes = nbytes
        self.budget = budget


class InvalidRangeError(VidbusError, ValueError):
    pass


class SegmentFormatError(VidbusError, ValueError):
    pass


class WireFormatError(VidbusError, ValueError):
    pass


# -- knobs -------------------------------------------------------------------


class KnobError(VidbusError, ValueError):
    pass


class UpscaleRequestedError(KnobError):
    pass


class UnsupportedConversionError(KnobError):
    pass


class KernelTooLargeError(KnobError):
    pass


class ShapeMismatchError(KnobError):
    pass


# -- profile -----------------------------------------------------------------


class ProfileParseError(VidbusError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyProfileError(VidbusError, ValueError):
    pass


class DegeneratePointsError(VidbusError, ValueError):
    pass


class BelowInterceptError(VidbusError, ValueError):
    pass


class UnknownAccuracyError(VidbusError, KeyError):
    pass


class DetectionParseError(VidbusError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# -- netsim / eval -----------------------------------------------------------


class NonMonotonicScheduleError(VidbusError, ValueError):
    pass


class EmptySamplesError(VidbusError, ValueError):
    pass


class ZeroBaselineError(VidbusError, ValueError):
    pass


# -- broker ------------------------------------------------------------------


class ErrorCode(IntEnum):
    INTERNAL = 1
    AUTH_FAILED = 2
    BROKER_UNAVAILABLE = 3
    DUPLICATE_CAMERA = 4
    UNKNOWN_CAMERA = 5
    UNKNOWN_SUBSCRIPTION = 6
    TIMEOUT = 7
    GAVE_UP = 8
    INFEASIBLE_BOUND = 9
    BAD_REQUEST = 10
    FRAME_TOO_LARGE = 11


class BrokerError(VidbusError):
    code: ErrorCode = ErrorCode.INTERNAL

    def __init__(self, message: str = "", code: Optional[ErrorCode] = None):
        super().__init__(message or self.__class__.__name__)
        if code is not None:
            self.code = code


class AuthFailedError(BrokerError):
    code = ErrorCode.AUTH_FAILED


class BrokerUnavailableError(BrokerError):
    code = ErrorCode.BROKER_UNAVAILABLE


class DuplicateCameraError(BrokerError):
    code = ErrorCode.DUPLICATE_CAMERA


class UnknownCameraError(BrokerError):
    code = ErrorCode.UNKNOWN_CAMERA


class UnknownSubscriptionError(BrokerError):
    code = ErrorCode.UNKNOWN_SUBSCRIPTION


class BrokerTimeoutError(BrokerError):
    code = ErrorCode.TIMEOUT


class GaveUpError(BrokerError):
    code = ErrorCode.GAVE_UP


class BadRequestError(BrokerError):
    code = ErrorCode.BAD_REQUEST


class InfeasibleBoundError(BrokerError):
    code = ErrorCode.INFEASIBLE_BOUND

    def __init__(self, best_accuracy: float, camera_id: str = ""):
        super().__init__(
            f"Accuracy bound infeasible for camera '{camera_id}' (best achievable {best_accuracy:.2f}%)."
        )
        self.best_accuracy = best_accuracy
        self.camera_id = camera_id


_BY_CODE: Dict[ErrorCode, Type[BrokerError]] = {
    ErrorCode.AUTH_FAILED: AuthFailedError,
    ErrorCode.BROKER_UNAVAILABLE: BrokerUnavailableError,
    ErrorCode.DUPLICATE_CAMERA: DuplicateCameraError,
    ErrorCode.UNKNOWN_CAMERA: UnknownCameraError,
    ErrorCode.UNKNOWN_SUBSCRIPTION: UnknownSubscriptionError,
    ErrorCode.TIMEOUT: BrokerTimeoutError,
    ErrorCode.GAVE_UP: GaveUpError,
    ErrorCode.BAD_REQUEST: BadRequestError,
}


def error_from_code(code: int, message: str) -> BrokerError:
    """Rebuild the exception carried by an Error message."""
    try:
        resolved = ErrorCode(code)
    except ValueError:
        return BrokerError(message, ErrorCode.INTERNAL)
    cls = _BY_CODE.get(resolved)
    if cls is None:
        return BrokerError(message, resolved)
    return cls(message)
