import json
import socket
from pathlib import Path

import numpy as np

from vidbus import cli
from vidbus.broker import CamBroker, EdgeBroker
from vidbus.frames import Colorspace, Frame, deserialize_frame
from vidbus.memlog import LogConfig
from vidbus.profiles import LinearLatencyModel, load_profile, synthetic_profile

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "configs" / "scenarios"


def _closed_port_address():
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return f"127.0.0.1:{port}"


def test_cli_simulate_writes_series_and_passes_gate(tmp_path, capsys):
    output_dir = tmp_path / "sim"
    args = [
        "simulate",
        "--config",
        str(SCENARIOS / "jaad_step.yaml"),
        "--output-dir",
        str(output_dir),
        "--fail-on-gate",
    ]
    assert cli.main(args) == cli.EXIT_OK
    captured = capsys.readouterr()
    assert "Simulation jaad_step" in captured.out
    assert "Controller gate: PASS" in captured.out
    assert (output_dir / "jaad_step_series.csv").exists()
    assert (output_dir / "jaad_step_step.png").exists()
    report = json.loads((output_dir / "gate_report.json").read_text())
    assert report["passed"]
    assert (output_dir / "gate_report.md").exists()


def test_cli_fail_on_gate_exits_non_zero(tmp_path, capsys):
    args = [
        "simulate",
        "--config",
        str(SCENARIOS / "jaad_step.yaml"),
        "--no-controller",
        "--output-dir",
        str(tmp_path),
        "--fail-on-gate",
    ]
    assert cli.main(args) == cli.EXIT_FAILURE
    assert "Controller gate: FAIL" in capsys.readouterr().out


def test_cli_node_scaling(tmp_path, capsys):
    args = [
        "simulate",
        "--config",
        str(SCENARIOS / "node_scaling.yaml"),
        "--node-scaling",
        "--output-dir",
        str(tmp_path),
    ]
    assert cli.main(args) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "Node scaling: node_scaling" in out
    assert "under_bound" in out
    assert (tmp_path / "chart_scaling.png").exists()
    assert (tmp_path / "node_scaling_n5_series.csv").exists()

    args = ["simulate", "--config", str(SCENARIOS / "jaad_step.yaml"), "--node-scaling"]
    assert cli.main(args) == cli.EXIT_USAGE
    assert "no node_multipliers" in capsys.readouterr().err


def test_cli_bench_sim_mode(tmp_path, capsys):
    output_dir = tmp_path / "bench"
    csv_path = tmp_path / "samples.csv"
    args = [
        "bench",
        "--config",
        str(SCENARIOS / "jaad_step.yaml"),
        "--duration-s",
        "2",
        "--subscribers",
        "2",
        "--out",
        str(csv_path),
        "--output-dir",
        str(output_dir),
    ]
    assert cli.main(args) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "Benchmark completed." in out
    assert "Component breakdown" in out
    assert csv_path.exists()
    assert (output_dir / "bench.md").exists()
    assert (output_dir / "chart_breakdown.png").exists()


def test_cli_profile_build_synthetic(tmp_path, capsys):
    out = tmp_path / "profiles" / "synthetic.tsv"
    args = ["profile-build", "--synthetic", "--out", str(out), "--count", "12"]
    assert cli.main(args) == cli.EXIT_OK
    table = load_profile(out)
    assert table.synthetic
    assert len(table) == 12
    assert "fabricated" in out.read_text()
    assert "12 entries" in capsys.readouterr().out


def test_cli_profile_build_corpus_needs_inputs(tmp_path, capsys):
    args = ["profile-build", "--out", str(tmp_path / "p.tsv"), "--frames-dir", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "--ground-truth" in err
    assert "--frames-dir" not in err


def test_cli_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["--log-level", "chatty", "simulate"]) == cli.EXIT_USAGE
    assert "Unknown log level" in capsys.readouterr().err
    missing = ["simulate", "--config", "configs/scenarios/missing.yaml"]
    assert cli.main(missing) == cli.EXIT_USAGE


def test_cli_edge_runs_and_stops(capsys):
    args = ["edge", "--listen", "127.0.0.1:0", "--run-seconds", "0.2"]
    assert cli.main(args) == cli.EXIT_OK
    assert "EdgeBroker listening on 127.0.0.1:" in capsys.readouterr().out


def test_cli_connectivity_failures(capsys):
    address = _closed_port_address()
    args = ["subscribe", "--edge", address, "--camera-id", "cam0", "--retries", "0"]
    assert cli.main(args) == cli.EXIT_CONNECTIVITY
    args = [
        "camnode",
        "--edge",
        address,
        "--retries",
        "0",
        "--backoff-s",
        "0",
        "--width",
        "32",
        "--height",
        "32",
        "--frames",
        "1",
    ]
    assert cli.main(args) == cli.EXIT_CONNECTIVITY
    assert "could not register" in capsys.readouterr().err


def test_cli_subscribe_saves_frames(tmp_path, capsys):
    logs = LogConfig(capacity_bytes=1 << 20, segment_count=4)
    profile = synthetic_profile(1_000, 3_072, count=4, knee_bytes=500)
    model = LinearLatencyModel(slope=1e-3, intercept=1.0)
    with EdgeBroker(log_config=logs) as edge:
        cam = CamBroker(
            "cam0", edge.address, profile, model, width=32, height=32, log_config=logs
        ).start()
        try:
            assert cam.wait_registered()
            for ts in range(1, 6):
                array = np.full((32, 32, 3), ts, dtype=np.uint8)
                cam.publish_local(Frame.from_array(ts, array, Colorspace.BGR, "cam0"))

            unknown = ["subscribe", "--edge", edge.address, "--camera-id", "ghost"]
            assert cli.main(unknown) == cli.EXIT_USAGE

            out_dir = tmp_path / "frames"
            latency_csv = tmp_path / "latency.csv"
            args = [
                "subscribe",
                "--edge",
                edge.address,
                "--camera-id",
                "cam0",
                "--latency-ms",
                "500",
                "--accuracy-min",
                "90",
                "--begin",
                "1",
                "--end",
                "5",
                "--out-dir",
                str(out_dir),
                "--latency-csv",
                str(latency_csv),
            ]
            assert cli.main(args) == cli.EXIT_OK
        finally:
            cam.stop()
    assert "Received 5 frames from cam0" in capsys.readouterr().out
    saved = sorted(out_dir.glob("*.frame"), key=lambda p: int(p.stem))
    assert [int(p.stem) for p in saved] == [1, 2, 3, 4, 5]
    assert deserialize_frame(saved[0].read_bytes()).camera_id == "cam0"
    assert len(latency_csv.read_text().splitlines()) == 6
