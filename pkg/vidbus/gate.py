"""Pass/fail verdicts for closed-loop runs, written as JSON + Markdown."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from tabulate import tabulate

from .frames import QosBound
from .netsim import SeriesPoint, SimulationResult


@dataclass
class GateThresholds:
    step_s: float = 5.0
    settle_window_s: float = 1.0
    max_settle_s: float = 1.0
    min_compliance: float = 0.95
    max_infeasible: int = 0


def settling_time_ms(points: List[SeriesPoint], bound_ms: float, step_ms: float) -> Optional[float]:
    """Time from the step until p95 is back under the bound.

    0 when the bound is never exceeded after the step, ``None`` when it never
    recovers.
    """
    after = [p for p in points if p.t_ms >= step_ms]
    violation = next((i for i, p in enumerate(after) if p.p95_ms > bound_ms), None)
    if violation is None:
        return 0.0
    for point in after[violation + 1 :]:
        if point.p95_ms < bound_ms:
            return point.t_ms - step_ms
    return None


def _camera_verdict(
    camera_id: str,
    points: List[SeriesPoint],
    bound: QosBound,
    thresholds: GateThresholds,
) -> Dict:
    step_ms = thresholds.step_s * 1000.0
    settle = settling_time_ms(points, bound.latency_max_ms, step_ms)
    window_start = step_ms + thresholds.settle_window_s * 1000.0
    settled = [p for p in points if p.t_ms >= window_start]
    compliant = sum(1 for p in settled if p.p95_ms < bound.latency_max_ms)
    compliance = compliant / len(settled) if settled else 0.0
    min_accuracy = min((p.accuracy_pct for p in settled), default=0.0)
    reasons: List[str] = []
    if settle is None:
        reasons.append("p95 never returned under the bound")
    elif settle > thresholds.max_settle_s * 1000.0:
        reasons.append(f"settling took {settle:.0f} ms")
    if compliance < thresholds.min_compliance:
        reasons.append(f"compliance {compliance:.3f} below {thresholds.min_compliance}")
    if settled and min_accuracy < bound.accuracy_min:
        reasons.append(f"accuracy {min_accuracy:.2f} below floor {bound.accuracy_min}")
    if not settled:
        reasons.append("no points after the settling window")
    return {
        "camera_id": camera_id,
        "settling_ms": round(settle, 3) if settle is not None else None,
        "compliance": round(compliance, 6),
        "points_evaluated": len(settled),
        "min_accuracy_pct": round(min_accuracy, 6),
        "passed": not reasons,
        "reasons": reasons,
    }


def build_gate_report(
    result: SimulationResult, bound: QosBound, thresholds: GateThresholds
) -> Dict:
    verdicts = [
        _camera_verdict(camera_id, result.series_for(camera_id), bound, thresholds)
        for camera_id in result.camera_ids()
    ]
    infeasible = result.infeasible_count
    passed = bool(verdicts) and all(v["passed"] for v in verdicts)
    if infeasible > thresholds.max_infeasible:
        passed = False
    return {
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "scenario": result.scenario,
        "bound": asdict(bound),
        "thresholds": asdict(thresholds),
        "infeasible_events": infeasible,
        "cameras": verdicts,
        "passed": passed,
    }


def write_gate_report(
    report: Dict,
    *,
    output_dir: Path,
    json_path: Path | None = None,
) -> Dict[str, Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    json_output = json_path or (output_dir / "gate_report.json")
    json_output.parent.mkdir(parents=True, exist_ok=True)
    json_output.write_text(json.dumps(report, indent=2))

    md_output = json_output.with_suffix(".md")
    md_output.write_text(_render_gate_markdown(report))
    return {"gate_json": json_output, "gate_markdown": md_output}


def _render_gate_markdown(report: Dict) -> str:
    bound = report.get("bound", {})
    lines = [
        "# Controller Gate Report",
        "",
        f"- Generated at: {report.get('generated_at', '')}",
        f"- Scenario: {report.get('scenario', '')}",
        f"- Bound: {bound.get('latency_max_ms')} ms / {bound.get('accuracy_min')} %",
        f"- Infeasible events: {report.get('infeasible_events', 0)}",
        f"- Passed: {report.get('passed')}",
        "",
        "## Thresholds",
        "```json",
        json.dumps(report.get("thresholds", {}), indent=2),
        "```",
        "",
        "## Cameras",
    ]
    cameras = report.get("cameras", [])
    if cameras:
        headers = ["camera_id", "settling_ms", "compliance", "min_accuracy_pct", "passed", "reasons"]
        rows = [
            [
                item.get("camera_id", ""),
                _fmt(item.get("settling_ms")),
                _fmt(item.get("compliance")),
                _fmt(item.get("min_accuracy_pct")),
                item.get("passed"),
                "; ".join(item.get("reasons", [])),
            ]
            for item in cameras
        ]
        lines.append(tabulate(rows, headers=headers, tablefmt="github"))
    else:
        lines.append("_No camera series recorded._")
    lines.append("")
    return "\n".join(lines)


def _fmt(value: object) -> str:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return f"{value:.4f}"
    return "n/a"
