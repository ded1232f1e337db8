from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from tabulate import tabulate

from .accuracy import load_detections
from .bench import BenchOptions, node_p95_second_half, run_bench
from .broker import CamBroker, EdgeBroker
from .client import PublisherClient, ResilientSubscription, TimeoutPolicy
from .config import (
    CamConfig,
    EdgeConfig,
    GateSettings,
    load_cam_config,
    load_edge_config,
    load_scenario_config,
    validate_cam_config,
    validate_edge_config,
)
from .errors import (
    BrokerError,
    BrokerTimeoutError,
    BrokerUnavailableError,
    GaveUpError,
    InfeasibleBoundError,
    UnknownCameraError,
    VidbusError,
)
from .frames import QosBound, now_micros, serialize_frame
from .gate import GateThresholds, build_gate_report, write_gate_report
from .knobs import IDENTITY, KnobSetting
from .logging_setup import configure_logging
from .netsim import run_closed_loop, run_node_scaling
from .profiles import build_corpus_profile, save_profile, synthetic_profile
from .report import (
    format_breakdown_table,
    format_counts_table,
    format_latency_table,
    format_scaling_table,
    generate_bench_reports,
    generate_simulation_reports,
    scaling_chart,
    write_samples_csv,
    write_series_csv,
)
from .sources import DirectorySource, SourceFactory
from .wire import OPEN_END

ROOT = Path(__file__).resolve().parents[1]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_CONNECTIVITY = 4

DEFAULT_SCENARIO = "configs/scenarios/jaad_step.yaml"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidbus",
        description="Latency-aware video-frame pub-sub for camera nodes and an edge server.",
    )
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO).")
    sub = parser.add_subparsers(dest="command", required=True)

    edge = sub.add_parser("edge", help="Run the EdgeBroker.")
    edge.add_argument("--config", help="Edge YAML config.")
    edge.add_argument("--listen", help="host:port to listen on.")
    edge.add_argument("--persist-dir", help="Directory for persisted log segments.")
    edge.add_argument("--capacity-mb", type=float, help="Replica log capacity per camera (MB).")
    edge.add_argument("--segments", type=int, help="Segments per replica log.")
    edge.add_argument("--auth-token", help="Shared token clients must present.")
    edge.add_argument(
        "--encrypt-at-rest",
        action="store_true",
        help="Encrypt persisted segments with the key in $VIDBUS_LOG_KEY.",
    )
    edge.add_argument(
        "--run-seconds",
        type=float,
        default=0.0,
        help="Stop after this many seconds (0 runs until interrupted).",
    )

    cam = sub.add_parser("camnode", help="Run a CamBroker and publish frames into it.")
    cam.add_argument("--config", help="Camera node YAML config.")
    cam.add_argument("--edge", help="EdgeBroker host:port.")
    cam.add_argument("--listen", help="host:port for the local publisher API.")
    cam.add_argument("--camera-id", help="Camera id to register.")
    cam.add_argument("--profile", help="Characterization profile file.")
    cam.add_argument("--latency-calib", help="Latency calibration file (size, ms).")
    cam.add_argument("--fps", type=float, help="Publishing frame rate.")
    cam.add_argument("--frames", type=int, help="Stop after publishing this many frames.")
    cam.add_argument("--duration-s", type=float, help="Stop after this many seconds.")
    cam.add_argument("--source", choices=["synthetic", "directory"], help="Frame source.")
    cam.add_argument("--source-dir", help="Directory of images or .frame files.")
    cam.add_argument("--width", type=int, help="Synthetic frame width.")
    cam.add_argument("--height", type=int, help="Synthetic frame height.")
    cam.add_argument("--retries", type=int, help="Edge reconnect attempts before giving up.")
    cam.add_argument("--backoff-s", type=float, help="Fixed delay between reconnect attempts.")
    cam.add_argument("--edge-token", help="Token presented to the EdgeBroker.")

    subscribe = sub.add_parser("subscribe", help="Subscribe to a camera and save its frames.")
    subscribe.add_argument("--edge", default="127.0.0.1:7400", help="EdgeBroker host:port.")
    subscribe.add_argument("--camera-id", required=True, help="Camera to subscribe to.")
    subscribe.add_argument("--latency-ms", type=float, default=100.0, help="Latency bound (ms).")
    subscribe.add_argument(
        "--accuracy-min", type=float, default=95.0, help="Accuracy floor (percent)."
    )
    subscribe.add_argument("--begin", type=int, default=0, help="First timestamp (micros).")
    subscribe.add_argument("--end", type=int, help="Last timestamp (micros); open when omitted.")
    subscribe.add_argument("--out-dir", help="Write each frame here as <ts>.frame.")
    subscribe.add_argument("--latency-csv", help="Per-frame latency CSV path.")
    subscribe.add_argument("--max-frames", type=int, help="Stop after this many frames.")
    subscribe.add_argument("--fps", type=float, default=5.0, help="Expected camera frame rate.")
    subscribe.add_argument("--retries", type=int, default=3, help="Reconnect attempts.")
    subscribe.add_argument("--backoff-s", type=float, default=0.5, help="Reconnect backoff.")
    subscribe.add_argument("--token", default="", help="Token presented to the EdgeBroker.")

    bench = sub.add_parser("bench", help="Measure pub-sub latency (sim or loopback).")
    bench.add_argument("--config", default=DEFAULT_SCENARIO, help="Scenario YAML (sim mode).")
    bench.add_argument("--mode", choices=["sim", "loopback"], default="sim")
    bench.add_argument("--nodes", type=int, default=1)
    bench.add_argument("--subscribers", type=int, default=1)
    bench.add_argument("--duration-s", type=float, default=10.0)
    bench.add_argument("--fps", type=float, help="Frame rate (defaults to the scenario's).")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--link-delay-ms", type=float, default=20.0, help="Loopback link delay.")
    bench.add_argument("--width", type=int, default=320, help="Loopback frame width.")
    bench.add_argument("--height", type=int, default=240, help="Loopback frame height.")
    bench.add_argument("--out", help="Per-frame latency CSV path.")
    bench.add_argument("--output-dir", help="Directory for Markdown, CSV and charts.")

    simulate = sub.add_parser("simulate", help="Run a closed-loop scenario in virtual time.")
    simulate.add_argument("--config", default=DEFAULT_SCENARIO, help="Scenario YAML.")
    simulate.add_argument(
        "--controller",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Force the controller on or off.",
    )
    simulate.add_argument("--duration-s", type=float)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--cameras", type=int)
    simulate.add_argument("--node-scaling", action="store_true", help="Run 1..N node scaling.")
    simulate.add_argument("--out", help="Series CSV path.")
    simulate.add_argument("--output-dir", help="Directory for series CSV, charts and gate report.")
    simulate.add_argument("--gate", action="store_true", help="Evaluate the settling gate.")
    simulate.add_argument(
        "--fail-on-gate", action="store_true", help="Exit with status 1 when the gate fails."
    )

    profile = sub.add_parser("profile-build", help="Write a characterization profile.")
    profile.add_argument("--out", required=True, help="Profile file to write.")
    profile.add_argument("--synthetic", action="store_true", help="Fabricate a synthetic table.")
    profile.add_argument("--min-size", type=int, default=100_000)
    profile.add_argument("--native-size", type=int, default=1_000_000)
    profile.add_argument("--count", type=int, default=30)
    profile.add_argument("--knee", type=float, default=25_000.0)
    profile.add_argument("--frames-dir", help="Corpus images or .frame files.")
    profile.add_argument("--ground-truth", help="Ground-truth detection file.")
    profile.add_argument("--baseline", help="Detections on unmodified frames.")
    profile.add_argument(
        "--detections",
        action="append",
        default=[],
        metavar="SETTING=PATH",
        help="Detections for one knob setting; repeatable.",
    )
    profile.add_argument("--iou-threshold", type=float, default=0.5)
    return parser


def _resolve_to_path(path_value: str, root: Path) -> Path:
    path = Path(path_value)
    if not path.is_absolute() and not path.exists():
        path = root / path
    return path


# -- edge ---------------------------------------------------------------------------


def apply_edge_overrides(config: EdgeConfig, args: argparse.Namespace) -> EdgeConfig:
    updates: Dict[str, object] = {}
    if args.listen:
        updates["listen"] = args.listen
    if args.persist_dir:
        updates["persist_dir"] = Path(args.persist_dir).resolve()
    if args.capacity_mb is not None:
        updates["capacity_mb"] = float(args.capacity_mb)
    if args.segments is not None:
        updates["segments"] = int(args.segments)
    if args.auth_token is not None:
        updates["auth_token"] = args.auth_token
    if args.encrypt_at_rest:
        updates["encrypt_at_rest"] = True
    if updates:
        config = replace(config, **updates)
    return config


def cmd_edge(args: argparse.Namespace) -> int:
    config = load_edge_config(_resolve_to_path(args.config, ROOT)) if args.config else EdgeConfig()
    config = apply_edge_overrides(config, args)
    validate_edge_config(config)
    broker = EdgeBroker(config.listen, config.log_config(), auth_token=config.auth_token)
    try:
        broker.start()
    except OSError as exc:
        print(f"error: cannot listen on {config.listen}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"EdgeBroker listening on {broker.address}")
    for camera_id, report in sorted(broker.recovery.items()):
        print(
            f"- recovered {camera_id}: loaded={report.loaded} discarded={report.discarded} "
            f"skipped={report.skipped}"
        )
    try:
        if args.run_seconds > 0:
            time.sleep(args.run_seconds)
        else:
            while True:
                time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return EXIT_OK


# -- camera node --------------------------------------------------------------------


def apply_cam_overrides(config: CamConfig, args: argparse.Namespace) -> CamConfig:
    updates: Dict[str, object] = {}
    for name in ("edge", "listen", "camera_id", "source", "edge_token"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    for name in ("profile", "latency_calib", "source_dir"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = Path(value).resolve()
    for name in ("fps", "duration_s", "backoff_s"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = float(value)
    for name in ("frames", "width", "height", "retries"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = int(value)
    if updates:
        config = replace(config, **updates)
    return config


def cmd_camnode(args: argparse.Namespace) -> int:
    config = load_cam_config(_resolve_to_path(args.config, ROOT)) if args.config else CamConfig()
    config = apply_cam_overrides(config, args)
    validate_cam_config(config)
    profile = config.load_profile()
    model = config.latency_model()
    policy = TimeoutPolicy.for_stream(config.fps, publish_timeout_ms=1000.0)
    source = SourceFactory.create(
        config.source,
        config.camera_id,
        width=config.width,
        height=config.height,
        directory=config.source_dir,
    )
    node = CamBroker(
        config.camera_id,
        config.edge,
        profile,
        model,
        width=source.width,
        height=source.height,
        fps=config.fps,
        listen=config.listen,
        log_config=config.log_config(),
        controller=config.controller.build(model, profile),
        auth_token=config.auth_token,
        edge_token=config.edge_token,
        link=config.link_model(),
        retries=config.retries,
        backoff_s=config.backoff_s,
        policy=policy,
    ).start()
    wait_s = (config.retries + 1) * (config.backoff_s + policy.control_timeout_ms / 1000.0) + 1.0
    if not node.wait_registered(wait_s):
        node.stop(unregister=False)
        print(
            f"error: could not register '{config.camera_id}' with {config.edge} "
            f"after {config.retries} retries",
            file=sys.stderr,
        )
        return EXIT_CONNECTIVITY
    print(f"Camera {config.camera_id} registered; publishing on {node.address}")

    limit = config.frames
    if limit is None and config.duration_s is not None:
        limit = int(round(config.duration_s * config.fps))
    interval = 1.0 / config.fps
    published = failed = 0
    status = EXIT_OK
    try:
        with PublisherClient(node.address, config.auth_token, policy=policy) as publisher:
            start = time.monotonic()
            for index, frame in enumerate(source.frames()):
                if limit is not None and index >= limit:
                    break
                if node.gave_up.is_set():
                    status = EXIT_CONNECTIVITY
                    break
                try:
                    publisher.publish(frame)
                    published += 1
                except BrokerTimeoutError:
                    failed += 1
                delay = start + (index + 1) * interval - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
    except KeyboardInterrupt:
        pass
    finally:
        node.stop()
    print(
        tabulate(
            [
                ["published", published],
                ["publish_timeouts", failed],
                ["transferred", node.stats.transferred],
                ["dropped", node.stats.dropped],
                ["infeasible_notices", node.stats.infeasible_notices],
            ],
            headers=["counter", "value"],
            tablefmt="github",
        )
    )
    if status == EXIT_CONNECTIVITY:
        print("error: lost the EdgeBroker and gave up reconnecting", file=sys.stderr)
    return status


# -- subscriber ---------------------------------------------------------------------


def cmd_subscribe(args: argparse.Namespace) -> int:
    bound = QosBound(args.latency_ms, args.accuracy_min)
    end = args.end if args.end is not None else OPEN_END
    policy = TimeoutPolicy.for_stream(args.fps)
    subscription = ResilientSubscription(
        args.edge,
        args.camera_id,
        bound,
        args.begin,
        end,
        retries=args.retries,
        backoff_s=args.backoff_s,
        token=args.token,
        policy=policy,
    )
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows: List[Dict[str, object]] = []
    status = EXIT_OK
    try:
        for frame in subscription:
            received = now_micros()
            rows.append(
                {
                    "ts": frame.ts,
                    "received_micros": received,
                    "latency_ms": round((received - frame.ts) / 1000.0, 3),
                    "width": frame.width,
                    "height": frame.height,
                    "colorspace": frame.colorspace.name.lower(),
                }
            )
            if out_dir is not None:
                (out_dir / f"{frame.ts}.frame").write_bytes(serialize_frame(frame))
            if args.max_frames is not None and len(rows) >= args.max_frames:
                break
    except InfeasibleBoundError as exc:
        print(
            f"infeasible: camera {args.camera_id} cannot meet {bound.latency_max_ms} ms at "
            f"{bound.accuracy_min}% (best accuracy {exc.best_accuracy:.2f}%)",
            file=sys.stderr,
        )
        status = EXIT_INFEASIBLE
    except UnknownCameraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_USAGE
    except GaveUpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONNECTIVITY
    except KeyboardInterrupt:
        pass
    finally:
        subscription.close()
    if args.latency_csv:
        path = Path(args.latency_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["ts", "received_micros", "latency_ms", "width", "height", "colorspace"],
            )
            writer.writeheader()
            writer.writerows(rows)
    print(f"Received {len(rows)} frames from {args.camera_id}")
    return status


# -- bench --------------------------------------------------------------------------


def cmd_bench(args: argparse.Namespace) -> int:
    scenario = None
    stage_ms = None
    fps = args.fps
    if args.mode == "sim":
        scenario_config = load_scenario_config(_resolve_to_path(args.config, ROOT))
        scenario = scenario_config.build()
        stage_ms = scenario_config.stage_ms
        fps = fps or scenario_config.fps
    options = BenchOptions(
        mode=args.mode,
        nodes=args.nodes,
        subscribers=args.subscribers,
        fps=fps or 5.0,
        duration_s=args.duration_s,
        seed=args.seed,
        bound=scenario.bound if scenario is not None else QosBound(100.0, 95.0),
        width=args.width,
        height=args.height,
        link_delay_ms=args.link_delay_ms,
    )
    report = run_bench(options, scenario, stage_ms)
    print("Benchmark completed.")
    print(f"- Mode: {report.mode} (nodes={report.nodes}, subscribers={report.subscribers})")
    if args.out:
        print(f"- CSV: {write_samples_csv(report, Path(args.out))}")
    if args.output_dir:
        artifacts = generate_bench_reports(report, Path(args.output_dir))
        print(f"- Markdown: {artifacts['markdown']}")
    print("\nPub-sub latency")
    print(format_latency_table(report))
    print("\nComponent breakdown")
    print(format_breakdown_table(report))
    print("\nFrames")
    print(format_counts_table(report))
    return EXIT_OK


# -- simulate -----------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_scenario_config(_resolve_to_path(args.config, ROOT))
    updates: Dict[str, object] = {}
    if args.duration_s is not None:
        updates["duration_s"] = float(args.duration_s)
    if args.seed is not None:
        updates["seed"] = int(args.seed)
    if args.cameras is not None:
        updates["cameras"] = int(args.cameras)
    if args.controller is not None:
        updates["controller"] = replace(config.controller, enabled=bool(args.controller))
    if updates:
        config = replace(config, **updates)
    scenario = config.build()
    output_dir = Path(args.output_dir) if args.output_dir else None

    if args.node_scaling:
        if not config.node_multipliers:
            print("error: scenario has no node_multipliers", file=sys.stderr)
            return EXIT_USAGE
        results = run_node_scaling(scenario, config.node_multipliers)
        table = node_p95_second_half(results, config.duration_s)
        print(f"Node scaling: {config.name}")
        print(format_scaling_table(table, scenario.bound))
        if output_dir is not None:
            output_dir.mkdir(parents=True, exist_ok=True)
            for count, result in results.items():
                write_series_csv(result, output_dir / f"{config.name}_n{count}_series.csv")
            print(f"- Chart: {scaling_chart(table, output_dir / 'chart_scaling.png', bound=scenario.bound)}")
        return EXIT_OK

    result = run_closed_loop(scenario)
    step_s = config.schedule[0][0] if config.schedule else None
    if args.out:
        print(f"- Series CSV: {write_series_csv(result, Path(args.out))}")
    if output_dir is not None:
        artifacts = generate_simulation_reports(result, output_dir, bound=scenario.bound, step_s=step_s)
        print(f"- Series CSV: {artifacts['series_csv']}")
        print(f"- Chart: {artifacts['step_chart']}")

    rows = []
    for camera_id in result.camera_ids():
        after = result.p95_after(step_s * 1000.0 if step_s is not None else 0.0, camera_id)
        rows.append([camera_id, len(result.series_for(camera_id)), _fmt(after)])
    print(f"Simulation {config.name}: frames={result.frames_sent} infeasible={result.infeasible_count}")
    print(tabulate(rows, headers=["camera_id", "points", "p95_after_step_ms"], tablefmt="github"))

    if args.gate or args.fail_on_gate:
        report = build_gate_report(result, scenario.bound, _gate_thresholds(config.gate))
        artifacts = write_gate_report(report, output_dir=output_dir or Path("results"))
        status = "PASS" if report["passed"] else "FAIL"
        print(f"Controller gate: {status} ({artifacts['gate_json']})")
        if args.fail_on_gate and not report["passed"]:
            return EXIT_FAILURE
    return EXIT_OK


def _gate_thresholds(settings: GateSettings) -> GateThresholds:
    return GateThresholds(
        step_s=settings.step_s,
        settle_window_s=settings.settle_window_s,
        max_settle_s=settings.max_settle_s,
        min_compliance=settings.min_compliance,
    )


def _fmt(value: Optional[float]) -> str:
    return f"{value:.3f}" if value is not None else ""


# -- profile builder ----------------------------------------------------------------


def cmd_profile_build(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.synthetic:
        table = synthetic_profile(args.min_size, args.native_size, args.count, args.knee)
        save_profile(table, out, comment="fabricated; not measured on a corpus")
        print(f"Wrote synthetic profile with {len(table.entries)} entries to {out}")
        return EXIT_OK

    missing = [
        flag
        for flag, value in (
            ("--frames-dir", args.frames_dir),
            ("--ground-truth", args.ground_truth),
            ("--baseline", args.baseline),
            ("--detections", args.detections),
        )
        if not value
    ]
    if missing:
        print(f"error: corpus mode needs {', '.join(missing)}", file=sys.stderr)
        return EXIT_USAGE
    frames = list(DirectorySource(args.frames_dir).frames())
    detections: Dict[KnobSetting, Dict] = {}
    for item in args.detections:
        text, sep, path = item.partition("=")
        if not sep or not path:
            print(f"error: --detections expects SETTING=PATH, got '{item}'", file=sys.stderr)
            return EXIT_USAGE
        detections[KnobSetting.parse(text)] = load_detections(path)
    baseline = load_detections(args.baseline)
    detections.setdefault(IDENTITY, baseline)
    table = build_corpus_profile(
        frames,
        load_detections(args.ground_truth),
        baseline,
        detections,
        iou_threshold=args.iou_threshold,
    )
    save_profile(table, out, comment=f"corpus: {args.frames_dir} ({len(frames)} frames)")
    print(f"Wrote profile with {len(table.entries)} entries to {out}")
    return EXIT_OK


COMMANDS = {
    "edge": cmd_edge,
    "camnode": cmd_camnode,
    "subscribe": cmd_subscribe,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
    "profile-build": cmd_profile_build,
}


def main(argv: Optional[Iterable[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        configure_logging(args.log_level)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownCameraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleBoundError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (BrokerUnavailableError, GaveUpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONNECTIVITY
    except (BrokerError, VidbusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
