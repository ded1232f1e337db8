from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from tabulate import tabulate  # noqa: E402

from .bench import COMPONENTS, BenchReport  # noqa: E402
from .frames import QosBound  # noqa: E402
from .netsim import SimulationResult  # noqa: E402

SERIES_FIELDS = ["t_virtual_ms", "p95_ms", "setting", "accuracy_pct"]
SAMPLE_FIELDS = ["camera_id", "subscriber", "ts", "latency_ms"]


def write_series_csv(result: SimulationResult, path: str | Path) -> Path:
    """Closed-loop series; a camera_id column is added for multi-camera runs."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    multi = len(result.camera_ids()) > 1
    fields = SERIES_FIELDS + (["camera_id"] if multi else [])
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for point in result.series:
            row: Dict[str, object] = {
                "t_virtual_ms": f"{point.t_ms:.3f}",
                "p95_ms": f"{point.p95_ms:.3f}",
                "setting": point.setting,
                "accuracy_pct": f"{point.accuracy_pct:.3f}",
            }
            if multi:
                row["camera_id"] = point.camera_id
            writer.writerow(row)
    return out


def read_series_csv(path: str | Path) -> List[Dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_samples_csv(report: BenchReport, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SAMPLE_FIELDS)
        writer.writeheader()
        writer.writerows(report.samples)
    return out


def format_latency_table(report: BenchReport) -> str:
    headers = ["percentile", "latency_ms"]
    rows = [
        [name.replace("_ms", ""), f"{report.latency.get(name, 0.0):.3f}"]
        for name in ("p50_ms", "p95_ms", "p99_ms", "mean_ms")
    ]
    return tabulate(rows, headers=headers, tablefmt="github")


def format_breakdown_table(report: BenchReport) -> str:
    headers = ["component", "ms", "percent"]
    rows = [
        [name, f"{report.breakdown_ms.get(name, 0.0):.3f}", f"{report.breakdown_pct.get(name, 0.0):.1f}"]
        for name in COMPONENTS
    ]
    return tabulate(rows, headers=headers, tablefmt="github")


def format_counts_table(report: BenchReport) -> str:
    rows = [
        ["frames_sent", report.frames_sent],
        ["frames_dropped", report.frames_dropped],
        ["frames_delivered", report.frames_delivered],
        ["infeasible_notices", report.infeasible_notices],
    ]
    return tabulate(rows, headers=["counter", "value"], tablefmt="github")


def format_scaling_table(table: Dict[int, Dict[str, float]], bound: Optional[QosBound] = None) -> str:
    headers = ["nodes", "camera_id", "p95_ms"] + (["under_bound"] if bound else [])
    rows = []
    for count, per_camera in sorted(table.items()):
        for camera_id, value in sorted(per_camera.items()):
            row: List[object] = [count, camera_id, f"{value:.3f}"]
            if bound is not None:
                row.append("yes" if value < bound.latency_max_ms else "no")
            rows.append(row)
    return tabulate(rows, headers=headers, tablefmt="github")


def render_bench_markdown(report: BenchReport, chart_paths: Optional[Dict[str, Path]] = None) -> str:
    lines = [
        "# vidbus benchmark",
        "",
        f"- Mode: {report.mode}",
        f"- Nodes: {report.nodes}",
        f"- Subscribers per node: {report.subscribers}",
        "",
        "## Pub-sub latency",
        format_latency_table(report),
        "",
        "## Component breakdown",
        format_breakdown_table(report),
        "",
        "## Frames",
        format_counts_table(report),
        "",
    ]
    for name, path in (chart_paths or {}).items():
        lines.append(f"![{name}]({path.name})")
    return "\n".join(lines).rstrip() + "\n"


def step_response_chart(
    result: SimulationResult,
    path: str | Path,
    *,
    bound: Optional[QosBound] = None,
    step_s: Optional[float] = None,
) -> Path:
    out = Path(path)
    fig, (ax_lat, ax_acc) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    for camera_id in result.camera_ids():
        points = result.series_for(camera_id)
        times = [p.t_ms / 1000.0 for p in points]
        ax_lat.plot(times, [p.p95_ms for p in points], label=camera_id, linewidth=1)
        ax_acc.step(times, [p.accuracy_pct for p in points], where="post", linewidth=1)
    if bound is not None:
        ax_lat.axhline(bound.latency_max_ms, color="#C0504D", linestyle="--", linewidth=1)
        ax_acc.axhline(bound.accuracy_min, color="#C0504D", linestyle="--", linewidth=1)
    if step_s is not None:
        for ax in (ax_lat, ax_acc):
            ax.axvline(step_s, color="#7F7F7F", linestyle=":", linewidth=1)
    ax_lat.set_ylabel("p95 latency (ms)")
    ax_lat.set_title(f"Step response: {result.scenario}")
    ax_acc.set_ylabel("Accuracy (%)")
    ax_acc.set_xlabel("Virtual time (s)")
    if len(result.camera_ids()) > 1:
        ax_lat.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def scaling_chart(
    table: Dict[int, Dict[str, float]], path: str | Path, *, bound: Optional[QosBound] = None
) -> Path:
    out = Path(path)
    counts = sorted(table)
    worst = [max(table[c].values()) if table[c] else 0.0 for c in counts]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(c) for c in counts], worst, color="#6C8EBF")
    for idx, value in enumerate(worst):
        ax.text(idx, value, f"{value:.1f}", ha="center", va="bottom", fontsize=8)
    if bound is not None:
        ax.axhline(bound.latency_max_ms, color="#C0504D", linestyle="--", linewidth=1)
    ax.set_xlabel("Camera nodes")
    ax.set_ylabel("Worst node p95 (ms)")
    ax.set_title("Node scaling")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def breakdown_chart(report: BenchReport, path: str | Path) -> Path:
    out = Path(path)
    values = [report.breakdown_pct.get(name, 0.0) for name in COMPONENTS]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(list(COMPONENTS), values, color=["#6C8EBF", "#F6C344", "#88C999", "#B4A7D6", "#E6B8AF"])
    for idx, value in enumerate(values):
        ax.text(idx, value, f"{value:.1f}%", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("Share of latency (%)")
    ax.set_title("Pub-sub latency breakdown")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def generate_bench_reports(report: BenchReport, output_dir: str | Path) -> Dict[str, Path]:
    output_path = Path(output_dir)
    output_path.mkdir(parents=True, exist_ok=True)
    artifacts: Dict[str, Path] = {
        "samples_csv": write_samples_csv(report, output_path / "latency_samples.csv"),
        "breakdown_chart": breakdown_chart(report, output_path / "chart_breakdown.png"),
    }
    if report.simulation is not None:
        artifacts["series_csv"] = write_series_csv(report.simulation, output_path / "series.csv")
    md_path = output_path / "bench.md"
    md_path.write_text(render_bench_markdown(report, {"breakdown": artifacts["breakdown_chart"]}))
    artifacts["markdown"] = md_path
    return artifacts


def generate_simulation_reports(
    result: SimulationResult,
    output_dir: str | Path,
    *,
    bound: Optional[QosBound] = None,
    step_s: Optional[float] = None,
) -> Dict[str, Path]:
    output_path = Path(output_dir)
    output_path.mkdir(parents=True, exist_ok=True)
    return {
        "series_csv": write_series_csv(result, output_path / f"{result.scenario}_series.csv"),
        "step_chart": step_response_chart(
            result, output_path / f"{result.scenario}_step.png", bound=bound, step_s=step_s
        ),
    }
