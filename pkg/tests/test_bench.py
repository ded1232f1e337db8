from pathlib import Path

import pytest

from vidbus.bench import (
    COMPONENTS,
    BenchOptions,
    StageTracer,
    breakdown_percentages,
    run_bench,
    run_loopback_bench,
    run_sim_bench,
    run_subscriber_scaling,
)
from vidbus.config import load_scenario_config

ROOT = Path(__file__).resolve().parents[1]
JAAD = ROOT / "configs" / "scenarios" / "jaad_step.yaml"


def test_stage_tracer_breakdown_uses_complete_frames_only():
    ticks = iter([0, 1_000, 7_000, 27_000, 28_500, 29_500, 50_000])
    tracer = StageTracer(clock=lambda: next(ticks))
    for stage in ("publish", "cam_append", "controller", "edge_receive", "edge_send", "subscribe"):
        tracer("cam0", 1, stage)
    tracer("cam0", 2, "publish")
    assert len(tracer.complete()) == 1
    breakdown = tracer.breakdown_ms()
    assert breakdown == pytest.approx(
        {"publish": 1.0, "controller": 6.0, "network": 20.0, "broker": 1.5, "subscribe": 1.0}
    )


def test_stage_tracer_keeps_first_mark():
    ticks = iter([0, 500, 1_000, 2_000, 3_000, 4_000, 5_000])
    tracer = StageTracer(clock=lambda: next(ticks))
    tracer("cam0", 1, "publish")
    tracer("cam0", 1, "publish")
    assert tracer.breakdown_ms() == {name: 0.0 for name in COMPONENTS}
    for stage in ("cam_append", "controller", "edge_receive", "edge_send", "subscribe"):
        tracer("cam0", 1, stage)
    assert tracer.breakdown_ms()["publish"] == pytest.approx(1.0)


def test_breakdown_percentages_sum_to_100():
    pct = breakdown_percentages({"publish": 1.0, "controller": 6.0, "network": 20.0})
    assert sum(pct.values()) == pytest.approx(100.0)
    assert pct["network"] == pytest.approx(100.0 * 20.0 / 27.0)
    assert pct["broker"] == 0.0
    empty = breakdown_percentages({})
    assert empty["network"] == 100.0


def test_bench_options_validation():
    with pytest.raises(ValueError) as exc:
        BenchOptions(mode="udp")
    assert "mode" in str(exc.value)
    with pytest.raises(ValueError):
        BenchOptions(subscribers=0)
    with pytest.raises(ValueError):
        BenchOptions(fps=0)
    with pytest.raises(ValueError):
        run_bench(BenchOptions(mode="sim"))


def test_sim_bench_counts_every_subscriber():
    config = load_scenario_config(JAAD)
    options = BenchOptions(mode="sim", nodes=1, subscribers=2, fps=5.0, duration_s=4.0)
    report = run_sim_bench(config.build(), options, config.stage_ms)
    assert report.frames_sent == 20
    assert report.simulation is not None
    assert report.frames_delivered == 2 * len(report.simulation.records)
    assert len(report.samples) == report.frames_delivered
    assert {s["subscriber"] for s in report.samples} == {0, 1}
    assert sum(report.breakdown_pct.values()) == pytest.approx(100.0)
    assert report.breakdown_ms["controller"] == 6.0
    assert max(report.breakdown_pct, key=report.breakdown_pct.get) == "network"
    fastest = min(r.latency_ms for r in report.simulation.records)
    assert report.latency["p50_ms"] >= fastest + 9.5


def test_sim_bench_nodes_run_side_by_side():
    config = load_scenario_config(JAAD)
    options = BenchOptions(mode="sim", nodes=3, duration_s=2.0)
    report = run_bench(options, config.build(), config.stage_ms)
    assert report.simulation is not None
    assert report.simulation.camera_ids() == ["cam0", "cam1", "cam2"]
    assert report.summary_row()["nodes"] == 3


def test_loopback_bench_delivers_through_real_brokers():
    options = BenchOptions(
        mode="loopback",
        subscribers=2,
        fps=20.0,
        duration_s=1.0,
        width=64,
        height=48,
        link_delay_ms=5.0,
    )
    report = run_loopback_bench(options)
    assert report.frames_sent == 20
    assert report.frames_delivered >= 36
    assert report.latency["p50_ms"] >= 5.0
    assert report.breakdown_ms["network"] >= 4.0
    assert sum(report.breakdown_pct.values()) == pytest.approx(100.0)


def test_subscriber_fanout_costs_less_than_double():
    options = BenchOptions(
        mode="loopback", fps=10.0, duration_s=1.5, width=64, height=48, link_delay_ms=20.0
    )
    reports = run_subscriber_scaling(options, counts=(1, 8))
    assert reports[8].frames_delivered >= 8 * reports[1].frames_delivered * 0.9
    assert reports[8].p95_ms < 2.0 * reports[1].p95_ms
