"""Deterministic simulated wireless channel and the virtual-time closed loop.

The channel is the single-node affine latency model scaled by a
piecewise-constant interference multiplier, with seeded uniform jitter.
Nothing here reads the wall clock.
"""

from __future__ import annotations

import heapq
import logging
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from .controller import ControllerConfig, ControlOutcome, LatencyController
from .errors import NonMonotonicScheduleError
from .frames import QosBound
from .knobs import IDENTITY
from .profiles import LinearLatencyModel, ProfileTable
from .stats import percentile

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 0.05
PLAIN_WINDOW = 20

__all__ = [
    "Channel",
    "ChannelModel",
    "ClosedLoopScenario",
    "LatencyRecord",
    "SeriesPoint",
    "SimEvent",
    "SimulationClock",
    "SimulationResult",
    "percentile",
    "run_closed_loop",
    "run_node_scaling",
]


@dataclass
class ChannelModel:
    base: LinearLatencyModel
    interference_schedule: List[Tuple[float, float]] = field(default_factory=list)
    jitter: float = DEFAULT_JITTER
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1).")
        schedule = [(float(t), float(m)) for t, m in self.interference_schedule]
        self.interference_schedule = []
        for t_ms, multiplier in schedule:
            self.set_interference_step(t_ms, multiplier)

    def set_interference_step(self, t_ms: float, multiplier: float) -> None:
        """Multiplier applies to every transmission at virtual time >= t_ms."""
        if multiplier < 1:
            raise ValueError(f"Interference multiplier must be >= 1, got {multiplier}.")
        if self.interference_schedule and t_ms <= self.interference_schedule[-1][0]:
            raise NonMonotonicScheduleError(
                f"Step at {t_ms} ms does not follow {self.interference_schedule[-1][0]} ms."
            )
        self.interference_schedule.append((float(t_ms), float(multiplier)))

    def multiplier_at(self, t_ms: float) -> float:
        times = [t for t, _ in self.interference_schedule]
        pos = bisect_right(times, t_ms) - 1
        return self.interference_schedule[pos][1] if pos >= 0 else 1.0


class Channel:
    """Stateful view of a ChannelModel: owns the seeded PRNG."""

    def __init__(self, model: ChannelModel):
        self.model = model
        self._rng = random.Random(model.seed)

    def transmit(self, size_bytes: float, now_ms: float) -> float:
        if size_bytes <= 0:
            raise ValueError("size_bytes must be > 0.")
        jitter = self.model.jitter
        noise = self._rng.uniform(-jitter, jitter) if jitter else 0.0
        return self.model.base.predict(size_bytes) * self.model.multiplier_at(now_ms) * (1.0 + noise)


class SimulationClock:
    """Virtual milliseconds; only moves forward."""

    def __init__(self) -> None:
        self._now_ms = 0.0

    def now_ms(self) -> float:
        return self._now_ms

    def now_micros(self) -> int:
        return int(round(self._now_ms * 1000))

    def advance_to(self, t_ms: float) -> None:
        if t_ms < self._now_ms:
            raise ValueError(f"Cannot move clock backwards from {self._now_ms} to {t_ms}")
        self._now_ms = t_ms

    def reset(self) -> None:
        self._now_ms = 0.0


@dataclass(frozen=True)
class LatencyRecord:
    ts_sent: int
    ts_received: int
    size_bytes: int
    camera_id: str

    @property
    def latency_ms(self) -> float:
        return (self.ts_received - self.ts_sent) / 1000.0


@dataclass(frozen=True)
class SeriesPoint:
    t_ms: float
    p95_ms: float
    setting: str
    accuracy_pct: float
    latency_ms: float
    camera_id: str


@dataclass(frozen=True)
class SimEvent:
    t_ms: float
    camera_id: str
    kind: str
    detail: str


@dataclass
class ClosedLoopScenario:
    channel: ChannelModel
    profile: ProfileTable
    bound: QosBound
    model: Optional[LinearLatencyModel] = None
    fps: float = 5.0
    duration_s: float = 20.0
    cameras: int = 1
    controller_enabled: bool = True
    controller: Optional[ControllerConfig] = None
    name: str = "scenario"

    def __post_init__(self) -> None:
        if self.fps <= 0:
            raise ValueError("fps must be > 0.")
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0.")
        if self.cameras < 1:
            raise ValueError("cameras must be >= 1.")

    @property
    def latency_model(self) -> LinearLatencyModel:
        return self.model if self.model is not None else self.channel.base

    def controller_config(self) -> ControllerConfig:
        if self.controller is not None:
            return self.controller
        return ControllerConfig.from_gains(self.latency_model, self.profile)


@dataclass
class SimulationResult:
    scenario: str
    series: List[SeriesPoint] = field(default_factory=list)
    records: List[LatencyRecord] = field(default_factory=list)
    events: List[SimEvent] = field(default_factory=list)
    frames_sent: int = 0

    def camera_ids(self) -> List[str]:
        return sorted({r.camera_id for r in self.records})

    def series_for(self, camera_id: str) -> List[SeriesPoint]:
        return [p for p in self.series if p.camera_id == camera_id]

    def p95_after(self, t_ms: float, camera_id: Optional[str] = None) -> Optional[float]:
        """p95 of per-frame latencies for frames sent at or after ``t_ms``."""
        latencies = [
            r.latency_ms
            for r in self.records
            if r.ts_sent >= t_ms * 1000 and (camera_id is None or r.camera_id == camera_id)
        ]
        return percentile(latencies, 95) if latencies else None

    @property
    def infeasible_count(self) -> int:
        return sum(1 for e in self.events if e.kind == "infeasible")


_DELIVERY = 0
_PUBLISH = 1


@dataclass
class _CameraSim:
    camera_id: str
    channel: Channel
    controller: Optional[LatencyController]
    window: Deque[float]


def run_closed_loop(scenario: ClosedLoopScenario) -> SimulationResult:
    """Publisher -> controller -> channel -> latency observation, in virtual time.

    Events are ordered by (time, camera_id, kind, seq); a delivery due at the
    same instant as a publish is handled first.
    """
    result = SimulationResult(scenario=scenario.name)
    duration_ms = scenario.duration_s * 1000.0
    if duration_ms <= 0:
        return result

    clock = SimulationClock()
    interval_ms = 1000.0 / scenario.fps
    width = len(str(scenario.cameras - 1))
    cams: Dict[str, _CameraSim] = {}
    for index in range(scenario.cameras):
        camera_id = f"cam{index:0{width}d}"
        channel = Channel(replace(scenario.channel, seed=scenario.channel.seed + index))
        controller = None
        if scenario.controller_enabled:
            controller = LatencyController(
                scenario.controller_config(),
                scenario.profile,
                scenario.latency_model,
                camera_id=camera_id,
                clock=clock.now_micros,
            )
            controller.set_target(scenario.bound)
        cams[camera_id] = _CameraSim(camera_id, channel, controller, deque(maxlen=PLAIN_WINDOW))

    heap: List[tuple] = []
    seq = 0
    for camera_id in cams:
        heapq.heappush(heap, (0.0, camera_id, _PUBLISH, seq, None))
        seq += 1

    while heap:
        t_ms, camera_id, kind, _, payload = heapq.heappop(heap)
        clock.advance_to(t_ms)
        cam = cams[camera_id]
        ctrl = cam.controller

        if kind == _PUBLISH:
            setting = ctrl.current_setting if ctrl is not None else IDENTITY
            epoch = ctrl.epoch if ctrl is not None else 0
            size = scenario.profile.size_of(setting)
            latency = cam.channel.transmit(size, t_ms)
            result.frames_sent += 1
            heapq.heappush(heap, (t_ms + latency, camera_id, _DELIVERY, seq, (t_ms, size, epoch)))
            seq += 1
            next_t = t_ms + interval_ms
            if next_t < duration_ms:
                heapq.heappush(heap, (next_t, camera_id, _PUBLISH, seq, None))
                seq += 1
            continue

        sent_ms, size, epoch = payload
        latency = t_ms - sent_ms
        result.records.append(
            LatencyRecord(
                ts_sent=int(round(sent_ms * 1000)),
                ts_received=int(round(t_ms * 1000)),
                size_bytes=int(size),
                camera_id=camera_id,
            )
        )
        if ctrl is None:
            cam.window.append(latency)
            p95 = percentile(cam.window, 95)
            setting = IDENTITY
            accuracy = scenario.profile.accuracy_of(IDENTITY)
        else:
            observed = ctrl.observe_latency(latency, epoch)
            if observed is None:
                continue
            p95 = observed
            decision = ctrl.control_step()
            if decision.outcome is ControlOutcome.INFEASIBLE:
                result.events.append(
                    SimEvent(t_ms, camera_id, "infeasible", f"best_acc={decision.best_accuracy:.3f}")
                )
            if decision.changed:
                result.events.append(
                    SimEvent(t_ms, camera_id, "knob_change", ctrl.current_setting.to_text())
                )
            setting = ctrl.current_setting
            accuracy = ctrl.accuracy_of_current()
        result.series.append(
            SeriesPoint(
                t_ms=t_ms,
                p95_ms=p95,
                setting=setting.to_text(),
                accuracy_pct=accuracy,
                latency_ms=latency,
                camera_id=camera_id,
            )
        )

    logger.debug(
        "event=sim_done scenario=%s frames=%d points=%d",
        scenario.name,
        result.frames_sent,
        len(result.series),
    )
    return result


def run_node_scaling(
    scenario: ClosedLoopScenario, multipliers: Sequence[float]
) -> Dict[int, SimulationResult]:
    """Run 1..N cameras, N-th run under the N-th multiplier for its whole duration."""
    results: Dict[int, SimulationResult] = {}
    for count, multiplier in enumerate(multipliers, start=1):
        channel = replace(scenario.channel, interference_schedule=[(0.0, multiplier)])
        run = replace(scenario, channel=channel, cameras=count, name=f"{scenario.name}-n{count}")
        results[count] = run_closed_loop(run)
    return results
