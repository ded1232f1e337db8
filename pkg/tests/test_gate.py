import json

from vidbus.frames import QosBound
from vidbus.gate import GateThresholds, build_gate_report, settling_time_ms, write_gate_report
from vidbus.netsim import LatencyRecord, SeriesPoint, SimEvent, SimulationResult

BOUND = QosBound(100.0, 96.0)


def _point(t_ms, p95, accuracy=97.0, camera_id="cam0"):
    return SeriesPoint(t_ms, p95, "identity", accuracy, p95, camera_id)


def _result(points, events=()):
    records = [
        LatencyRecord(int(p.t_ms * 1000), int((p.t_ms + p.latency_ms) * 1000), 1000, p.camera_id)
        for p in points
    ]
    return SimulationResult("unit", series=points, records=records, events=list(events))


def _step_series(peak_until_ms, camera_id="cam0"):
    points = []
    for t_ms in range(0, 10_000, 200):
        if t_ms < 5_000:
            p95 = 50.0
        elif t_ms < peak_until_ms:
            p95 = 150.0
        else:
            p95 = 60.0
        points.append(_point(float(t_ms), p95, camera_id=camera_id))
    return points


def test_settling_time_reference_values():
    assert settling_time_ms(_step_series(5_600), 100.0, 5_000.0) == 600.0
    assert settling_time_ms([_point(6_000.0, 80.0)], 100.0, 5_000.0) == 0.0
    assert settling_time_ms(_step_series(20_000), 100.0, 5_000.0) is None


def test_gate_passes_on_quick_recovery():
    report = build_gate_report(_result(_step_series(5_600)), BOUND, GateThresholds())
    assert report["passed"]
    verdict = report["cameras"][0]
    assert verdict["settling_ms"] == 600.0
    assert verdict["compliance"] == 1.0
    assert verdict["reasons"] == []


def test_gate_fails_on_slow_recovery_and_low_accuracy():
    slow = _step_series(7_000)
    report = build_gate_report(_result(slow), BOUND, GateThresholds())
    assert not report["passed"]
    reasons = report["cameras"][0]["reasons"]
    assert any("settling took 2000 ms" in r for r in reasons)
    assert any("compliance" in r for r in reasons)

    points = [_point(p.t_ms, p.p95_ms, accuracy=92.0) for p in _step_series(5_600)]
    report = build_gate_report(_result(points), BOUND, GateThresholds())
    assert "accuracy 92.00 below floor 96.0" in report["cameras"][0]["reasons"]


def test_gate_fails_when_never_recovering_or_infeasible():
    report = build_gate_report(_result(_step_series(20_000)), BOUND, GateThresholds())
    assert report["cameras"][0]["settling_ms"] is None
    assert "p95 never returned under the bound" in report["cameras"][0]["reasons"]

    events = [SimEvent(5_200.0, "cam0", "infeasible", "best_acc=93.000")]
    report = build_gate_report(_result(_step_series(5_600), events), BOUND, GateThresholds())
    assert report["cameras"][0]["passed"]
    assert report["infeasible_events"] == 1
    assert not report["passed"]


def test_gate_judges_each_camera():
    points = _step_series(5_600, "cam0") + _step_series(20_000, "cam1")
    report = build_gate_report(_result(points), BOUND, GateThresholds())
    assert [c["camera_id"] for c in report["cameras"]] == ["cam0", "cam1"]
    assert [c["passed"] for c in report["cameras"]] == [True, False]
    assert not report["passed"]
    assert not build_gate_report(_result([]), BOUND, GateThresholds())["passed"]


def test_write_gate_report(tmp_path):
    report = build_gate_report(_result(_step_series(5_600)), BOUND, GateThresholds())
    artifacts = write_gate_report(report, output_dir=tmp_path)
    assert artifacts["gate_json"] == tmp_path / "gate_report.json"
    assert json.loads(artifacts["gate_json"].read_text())["passed"] is True
    markdown = artifacts["gate_markdown"].read_text()
    assert "# Controller Gate Report" in markdown
    assert "| cam0" in markdown

    custom = tmp_path / "nested" / "gate.json"
    artifacts = write_gate_report(report, output_dir=tmp_path, json_path=custom)
    assert custom.exists()
    assert custom.with_suffix(".md").exists()
