"""PI latency controller: observed p95 latency -> target frame size -> knob setting."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Deque, Optional

from .errors import BelowInterceptError
from .frames import Frame, QosBound, now_micros
from .knobs import IDENTITY, FrameDiffState, KnobSetting, apply_setting
from .profiles import LinearLatencyModel, ProfileTable, lookup_by_size, size_for_latency
from .stats import percentile

logger = logging.getLogger(__name__)

DEFAULT_PROPORTIONAL_GAIN = 0.6
DEFAULT_INTEGRAL_GAIN = 0.1 * DEFAULT_PROPORTIONAL_GAIN
DEFAULT_ERROR_THRESHOLD_MS = 5.0
DEFAULT_SAMPLE_WINDOW = 20
DEFAULT_CLAMP_FACTOR = 2.0


@dataclass(frozen=True)
class ControllerConfig:
    """Gains in bytes per ms of error (k1) and per ms*sample of integral (k2)."""

    k1: float
    k2: float
    integral_clamp_bytes: float
    error_threshold_ms: float = DEFAULT_ERROR_THRESHOLD_MS
    sample_window: int = DEFAULT_SAMPLE_WINDOW
    recover_quality: bool = False

    def __post_init__(self) -> None:
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("Controller gains must be >= 0.")
        if not self.error_threshold_ms > 0:
            raise ValueError("error_threshold_ms must be > 0.")
        if not self.integral_clamp_bytes > 0:
            raise ValueError("integral_clamp_bytes must be > 0.")
        if self.sample_window < 1:
            raise ValueError("sample_window must be >= 1.")

    @classmethod
    def from_gains(
        cls,
        model: LinearLatencyModel,
        table: ProfileTable,
        proportional: float = DEFAULT_PROPORTIONAL_GAIN,
        integral: float = DEFAULT_INTEGRAL_GAIN,
        *,
        error_threshold_ms: float = DEFAULT_ERROR_THRESHOLD_MS,
        sample_window: int = DEFAULT_SAMPLE_WINDOW,
        clamp_factor: float = DEFAULT_CLAMP_FACTOR,
        recover_quality: bool = False,
    ) -> "ControllerConfig":
        """Scale dimensionless gains by the model's bytes-per-ms."""
        return cls(
            k1=proportional * model.bytes_per_ms,
            k2=integral * model.bytes_per_ms,
            integral_clamp_bytes=clamp_factor * table.largest.size_bytes,
            error_threshold_ms=error_threshold_ms,
            sample_window=sample_window,
            recover_quality=recover_quality,
        )


class ControlOutcome(Enum):
    SETTING = "setting"
    NO_CHANGE = "no_change"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class ControlDecision:
    outcome: ControlOutcome
    setting: KnobSetting
    p95_ms: Optional[float] = None
    image_size: Optional[float] = None
    best_accuracy: Optional[float] = None
    changed: bool = False


class LatencyController:
    """One camera's controller. Not thread-safe; callers serialize access."""

    def __init__(
        self,
        config: ControllerConfig,
        profile: ProfileTable,
        model: LinearLatencyModel,
        camera_id: str = "",
        clock: Callable[[], int] = now_micros,
    ):
        self.config = config
        self.profile = profile
        self.model = model
        self.camera_id = camera_id
        self._clock = clock
        self.target: Optional[QosBound] = None
        self.error_integral_ms = 0.0
        self.current_setting: KnobSetting = IDENTITY
        self.samples: Deque[float] = deque(maxlen=config.sample_window)
        self.latency_sampled: Optional[float] = None
        self.nominal_size = 0.0
        self.epoch = 0
        self.infeasible = False

    def set_target(self, bound: QosBound) -> bool:
        """Install a new bound. Returns False when it equals the current one."""
        if bound == self.target:
            return False
        self.target = bound
        self.error_integral_ms = 0.0
        self.infeasible = False
        try:
            self.nominal_size = size_for_latency(self.model, bound.latency_max_ms, self.profile)
        except BelowInterceptError:
            self.nominal_size = 0.0
        self._switch(IDENTITY)
        return True

    def _switch(self, setting: KnobSetting) -> None:
        self.current_setting = setting
        self.epoch += 1
        self.samples.clear()
        self.latency_sampled = None

    def observe_latency(self, latency_ms: float, epoch: Optional[int] = None) -> Optional[float]:
        """Push one frame latency; samples from an older epoch are discarded."""
        if latency_ms < 0:
            raise ValueError("latency_ms must be >= 0.")
        if epoch is not None and epoch != self.epoch:
            return None
        self.samples.append(latency_ms)
        self.latency_sampled = percentile(self.samples, 95)
        return self.latency_sampled

    def control_step(self) -> ControlDecision:
        if self.target is None:
            raise ValueError("control_step before set_target.")
        sampled = self.latency_sampled
        if sampled is None:
            return ControlDecision(ControlOutcome.NO_CHANGE, self.current_setting)

        cfg = self.config
        error = sampled - self.target.latency_max_ms
        inside = error <= cfg.error_threshold_ms
        if cfg.recover_quality:
            inside = abs(error) <= cfg.error_threshold_ms
        if inside:
            return ControlDecision(ControlOutcome.NO_CHANGE, self.current_setting, p95_ms=sampled)

        self.error_integral_ms += error
        if cfg.k2 > 0:
            limit = cfg.integral_clamp_bytes / cfg.k2
            self.error_integral_ms = max(-limit, min(limit, self.error_integral_ms))
        # positive error shrinks the frame
        image_size = self.nominal_size - (cfg.k1 * error + cfg.k2 * self.error_integral_ms)

        entry = lookup_by_size(self.profile, image_size)
        if entry is None or entry.accuracy_pct < self.target.accuracy_min:
            best = entry.accuracy_pct if entry is not None else self.profile.smallest.accuracy_pct
            fallback = self.profile.smallest.setting
            changed = fallback != self.current_setting
            if changed:
                self._switch(fallback)
            if not self.infeasible:
                logger.warning(
                    "ts=%d event=infeasible best_acc=%.3f camera=%s",
                    self._clock(),
                    best,
                    self.camera_id,
                )
            self.infeasible = True
            return ControlDecision(
                ControlOutcome.INFEASIBLE,
                self.current_setting,
                p95_ms=sampled,
                image_size=image_size,
                best_accuracy=best,
                changed=changed,
            )

        self.infeasible = False
        changed = entry.setting != self.current_setting
        if changed:
            self._switch(entry.setting)
            logger.info(
                "ts=%d event=knob_change setting=%s p95_ms=%.3f camera=%s",
                self._clock(),
                entry.setting.to_text(),
                sampled,
                self.camera_id,
            )
        return ControlDecision(
            ControlOutcome.SETTING,
            entry.setting,
            p95_ms=sampled,
            image_size=image_size,
            changed=changed,
        )

    def process_frame(self, frame: Frame, diff_state: Optional[FrameDiffState]) -> Optional[Frame]:
        return apply_setting(frame, self.current_setting, diff_state)

    def accuracy_of_current(self) -> float:
        entry = self.profile.entry_for(self.current_setting)
        if entry is not None:
            return entry.accuracy_pct
        return 100.0 if self.current_setting.is_identity else 0.0
