"""Pub-sub latency benchmarks: virtual-time simulation and real loopback brokers."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .broker import CamBroker, EdgeBroker
from .client import PublisherClient, SubscriberClient, SubscriptionStream, TimeoutPolicy
from .errors import BrokerTimeoutError, BrokerUnavailableError, InfeasibleBoundError
from .frames import QosBound, now_micros
from .netsim import ChannelModel, ClosedLoopScenario, SimulationResult, run_closed_loop
from .profiles import LinearLatencyModel, ProfileTable, synthetic_profile
from .sources import SyntheticSource
from .stats import latency_summary

logger = logging.getLogger(__name__)

STAGES = ("publish", "cam_append", "controller", "edge_receive", "edge_send", "subscribe")
COMPONENTS = ("publish", "controller", "network", "broker", "subscribe")

# per-frame overheads added around the simulated network hop
DEFAULT_STAGE_MS: Dict[str, float] = {
    "publish": 1.0,
    "controller": 6.0,
    "broker": 1.5,
    "subscribe": 1.0,
}


class StageTracer:
    """Records the first time each (camera, ts) passes each pipeline stage."""

    def __init__(self, clock=now_micros):
        self._clock = clock
        self._lock = threading.Lock()
        self._marks: Dict[Tuple[str, int], Dict[str, int]] = {}

    def __call__(self, camera_id: str, ts: int, stage: str) -> None:
        now = self._clock()
        with self._lock:
            self._marks.setdefault((camera_id, ts), {}).setdefault(stage, now)

    def complete(self) -> List[Dict[str, int]]:
        with self._lock:
            return [dict(m) for m in self._marks.values() if all(s in m for s in STAGES)]

    def breakdown_ms(self) -> Dict[str, float]:
        """Mean milliseconds spent in each component over fully traced frames."""
        rows = self.complete()
        if not rows:
            return {name: 0.0 for name in COMPONENTS}
        spans = {
            "publish": ("publish", "cam_append"),
            "controller": ("cam_append", "controller"),
            "network": ("controller", "edge_receive"),
            "broker": ("edge_receive", "edge_send"),
            "subscribe": ("edge_send", "subscribe"),
        }
        result: Dict[str, float] = {}
        for name, (start, stop) in spans.items():
            total = sum(max(0, row[stop] - row[start]) for row in rows)
            result[name] = total / len(rows) / 1000.0
        return result


def breakdown_percentages(breakdown_ms: Dict[str, float]) -> Dict[str, float]:
    total = sum(breakdown_ms.values())
    if total <= 0:
        return {name: (100.0 if name == "network" else 0.0) for name in COMPONENTS}
    return {name: 100.0 * breakdown_ms.get(name, 0.0) / total for name in COMPONENTS}


@dataclass
class BenchOptions:
    mode: str = "sim"
    nodes: int = 1
    subscribers: int = 1
    fps: float = 5.0
    duration_s: float = 10.0
    seed: int = 0
    bound: QosBound = field(default_factory=lambda: QosBound(100.0, 95.0))
    width: int = 320
    height: int = 240
    link_delay_ms: float = 20.0
    link_jitter: float = 0.0
    drain_s: float = 2.0
    max_workers: int = 16

    def __post_init__(self) -> None:
        if self.mode not in {"sim", "loopback"}:
            raise ValueError("mode must be 'sim' or 'loopback'.")
        if self.nodes < 1 or self.subscribers < 1:
            raise ValueError("nodes and subscribers must be >= 1.")
        if self.fps <= 0:
            raise ValueError("fps must be > 0.")
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0.")


@dataclass
class BenchReport:
    mode: str
    nodes: int
    subscribers: int
    latency: Dict[str, float]
    breakdown_ms: Dict[str, float]
    breakdown_pct: Dict[str, float]
    frames_sent: int = 0
    frames_dropped: int = 0
    frames_delivered: int = 0
    samples: List[Dict] = field(default_factory=list)
    simulation: Optional[SimulationResult] = None
    infeasible_notices: int = 0

    @property
    def p95_ms(self) -> float:
        return float(self.latency.get("p95_ms", 0.0))

    def summary_row(self) -> Dict:
        row: Dict = {
            "mode": self.mode,
            "nodes": self.nodes,
            "subscribers": self.subscribers,
            "frames_sent": self.frames_sent,
            "frames_dropped": self.frames_dropped,
            "frames_delivered": self.frames_delivered,
        }
        row.update({k: round(v, 3) for k, v in self.latency.items() if k != "count"})
        return row


def _build_report(
    options: BenchOptions,
    latencies: List[float],
    breakdown_ms: Dict[str, float],
    **counts,
) -> BenchReport:
    return BenchReport(
        mode=options.mode,
        nodes=options.nodes,
        subscribers=options.subscribers,
        latency=latency_summary(latencies),
        breakdown_ms=breakdown_ms,
        breakdown_pct=breakdown_percentages(breakdown_ms),
        **counts,
    )


# -- sim ----------------------------------------------------------------------------


def run_sim_bench(
    scenario: ClosedLoopScenario,
    options: BenchOptions,
    stage_ms: Optional[Dict[str, float]] = None,
) -> BenchReport:
    """Closed-loop run in virtual time; stage overheads are fixed per frame."""
    stages = dict(DEFAULT_STAGE_MS)
    stages.update(stage_ms or {})
    channel = replace(scenario.channel, seed=options.seed)
    run = replace(
        scenario,
        channel=channel,
        cameras=options.nodes,
        fps=options.fps,
        duration_s=options.duration_s,
    )
    result = run_closed_loop(run)
    overhead = sum(stages.get(name, 0.0) for name in COMPONENTS if name != "network")
    latencies: List[float] = []
    samples: List[Dict] = []
    for record in result.records:
        total = record.latency_ms + overhead
        for sub in range(options.subscribers):
            latencies.append(total)
            samples.append(
                {
                    "camera_id": record.camera_id,
                    "subscriber": sub,
                    "ts": record.ts_sent,
                    "latency_ms": round(total, 6),
                }
            )
    network = (
        sum(r.latency_ms for r in result.records) / len(result.records) if result.records else 0.0
    )
    breakdown = {name: float(stages.get(name, 0.0)) for name in COMPONENTS}
    breakdown["network"] = network
    report = _build_report(
        options,
        latencies,
        breakdown,
        frames_sent=result.frames_sent,
        frames_dropped=0,
        frames_delivered=len(latencies),
        samples=samples,
        simulation=result,
        infeasible_notices=result.infeasible_count,
    )
    logger.info(
        "event=bench_done mode=sim nodes=%d subscribers=%d p95_ms=%.3f",
        options.nodes,
        options.subscribers,
        report.p95_ms,
    )
    return report


# -- loopback -----------------------------------------------------------------------


@dataclass
class _SubscriberRun:
    camera_id: str
    index: int
    stream: Optional[SubscriptionStream] = None
    receipts: List[Tuple[int, int]] = field(default_factory=list)
    infeasible: int = 0


def _consume(
    stream: SubscriptionStream, run: _SubscriberRun, stop: threading.Event
) -> _SubscriberRun:
    while not stop.is_set():
        try:
            frame = stream.receive(timeout_s=0.2)
        except BrokerTimeoutError:
            continue
        except InfeasibleBoundError:
            run.infeasible += 1
            continue
        except BrokerUnavailableError:
            break
        if frame is None:
            break
    run.receipts = list(stream.receipts)
    return run


def _publish(cam: CamBroker, options: BenchOptions, seed: int) -> int:
    count = max(0, int(round(options.fps * options.duration_s)))
    source = SyntheticSource(cam.camera_id, options.width, options.height, count, seed=seed)
    interval = 1.0 / options.fps
    published = 0
    with PublisherClient(cam.address, tracer=cam.tracer) as publisher:
        start = time.monotonic()
        for index, frame in enumerate(source.frames()):
            publisher.publish(frame)
            published += 1
            delay = start + (index + 1) * interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
    return published


def run_loopback_bench(
    options: BenchOptions, profile: Optional[ProfileTable] = None
) -> BenchReport:
    """Real EdgeBroker + CamBrokers on 127.0.0.1 with an emulated upstream link."""
    tracer = StageTracer()
    table = profile or synthetic_profile()
    model = LinearLatencyModel(slope=1e-6, intercept=options.link_delay_ms)
    policy = TimeoutPolicy.for_stream(
        options.fps, base_latency_ms=options.link_delay_ms + 100.0, publish_timeout_ms=1000.0
    )
    edge = EdgeBroker(tracer=tracer).start()
    cams: List[CamBroker] = []
    clients: List[SubscriberClient] = []
    stop = threading.Event()
    runs: List[_SubscriberRun] = []
    published = 0
    try:
        width = len(str(options.nodes - 1))
        for index in range(options.nodes):
            link = ChannelModel(
                base=LinearLatencyModel(slope=1e-9, intercept=options.link_delay_ms),
                jitter=options.link_jitter,
                seed=options.seed + index,
            )
            cam = CamBroker(
                f"cam{index:0{width}d}",
                edge.address,
                table,
                model,
                width=options.width,
                height=options.height,
                fps=options.fps,
                link=link,
                policy=policy,
                tracer=tracer,
            ).start()
            cams.append(cam)
            if not cam.wait_registered(5.0):
                raise BrokerUnavailableError(f"Camera {cam.camera_id} did not register.")

        with ThreadPoolExecutor(max_workers=max(1, options.max_workers)) as executor:
            consumers = []
            pending: List[_SubscriberRun] = []
            for cam in cams:
                for sub in range(options.subscribers):
                    client = SubscriberClient(edge.address, policy=policy, tracer=tracer)
                    clients.append(client)
                    stream = client.subscribe(cam.camera_id, options.bound)
                    run = _SubscriberRun(cam.camera_id, sub, stream)
                    pending.append(run)
                    consumers.append(executor.submit(_consume, stream, run, stop))
            _wait_for(lambda: all(c.transfer_active() for c in cams), 5.0)

            publishers = [
                executor.submit(_publish, cam, options, options.seed + i)
                for i, cam in enumerate(cams)
            ]
            for future in as_completed(publishers):
                published += future.result()
            expected = published * options.subscribers
            _wait_for(
                lambda: sum(len(r.stream.receipts) for r in pending if r.stream is not None) >= expected,
                options.drain_s,
            )
            stop.set()
            for future in as_completed(consumers):
                runs.append(future.result())
    finally:
        stop.set()
        for client in clients:
            client.close()
        for cam in cams:
            cam.stop()
        edge.stop(flush=False)

    latencies: List[float] = []
    samples: List[Dict] = []
    for run in sorted(runs, key=lambda r: (r.camera_id, r.index)):
        for ts, received in run.receipts:
            latency = max(0.0, (received - ts) / 1000.0)
            latencies.append(latency)
            samples.append(
                {
                    "camera_id": run.camera_id,
                    "subscriber": run.index,
                    "ts": ts,
                    "latency_ms": round(latency, 6),
                }
            )
    report = _build_report(
        options,
        latencies,
        tracer.breakdown_ms(),
        frames_sent=published,
        frames_dropped=sum(c.stats.dropped for c in cams),
        frames_delivered=len(latencies),
        samples=samples,
        infeasible_notices=sum(r.infeasible for r in runs),
    )
    logger.info(
        "event=bench_done mode=loopback nodes=%d subscribers=%d p95_ms=%.3f delivered=%d",
        options.nodes,
        options.subscribers,
        report.p95_ms,
        report.frames_delivered,
    )
    return report


def _wait_for(predicate, timeout_s: float) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.02)
    return predicate()


def run_subscriber_scaling(
    options: BenchOptions, counts: Sequence[int] = (1, 8)
) -> Dict[int, BenchReport]:
    """Same loopback scenario with different subscriber counts on one camera."""
    reports: Dict[int, BenchReport] = {}
    for count in counts:
        reports[count] = run_loopback_bench(replace(options, mode="loopback", nodes=1, subscribers=count))
    return reports


def run_bench(
    options: BenchOptions,
    scenario: Optional[ClosedLoopScenario] = None,
    stage_ms: Optional[Dict[str, float]] = None,
) -> BenchReport:
    if options.mode == "sim":
        if scenario is None:
            raise ValueError("Sim mode needs a scenario.")
        return run_sim_bench(scenario, options, stage_ms)
    return run_loopback_bench(options, scenario.profile if scenario is not None else None)


def node_p95_second_half(
    results: Dict[int, SimulationResult], duration_s: float
) -> Dict[int, Dict[str, float]]:
    """Per node count, each camera's p95 over frames sent in the second half of the run."""
    half_ms = duration_s * 1000.0 / 2.0
    table: Dict[int, Dict[str, float]] = {}
    for count, result in sorted(results.items()):
        table[count] = {}
        for camera_id in result.camera_ids():
            value = result.p95_after(half_ms, camera_id)
            if value is not None:
                table[count][camera_id] = value
    return table


__all__ = [
    "BenchOptions",
    "BenchReport",
    "StageTracer",
    "breakdown_percentages",
    "node_p95_second_half",
    "run_bench",
    "run_loopback_bench",
    "run_sim_bench",
    "run_subscriber_scaling",
]
