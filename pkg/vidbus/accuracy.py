"""Detection accuracy arithmetic: IoU, greedy exclusive matching and F1."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

from .errors import DetectionParseError, ZeroBaselineError

DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"Degenerate box ({self.x1},{self.y1},{self.x2},{self.y2}).")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp else 0.0


def iou(a: BBox, b: BBox) -> float:
    width = min(a.x2, b.x2) - max(a.x1, b.x1)
    height = min(a.y2, b.y2) - max(a.y1, b.y1)
    if width <= 0 or height <= 0:
        return 0.0
    inter = width * height
    return inter / (a.area + b.area - inter)


def match_detections(
    preds: Sequence[BBox],
    gts: Sequence[BBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Ground truths in order each claim their best unclaimed prediction.

    A claim needs IoU strictly above the threshold; ties go to the lowest
    prediction index.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1].")
    claimed = [False] * len(preds)
    tp = 0
    for gt in gts:
        best_index = -1
        best_iou = iou_threshold
        for index, pred in enumerate(preds):
            if claimed[index]:
                continue
            overlap = iou(pred, gt)
            if overlap > best_iou:
                best_iou = overlap
                best_index = index
        if best_index >= 0:
            claimed[best_index] = True
            tp += 1
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp)


def f1(result: MatchResult) -> float:
    if result.tp == 0:
        return 0.0
    precision, recall = result.precision, result.recall
    return 2 * precision * recall / (precision + recall)


def normalized_f1(modified_score: float, baseline_score: float) -> float:
    if baseline_score <= 0:
        raise ZeroBaselineError("Baseline F1 is zero; cannot normalize.")
    return 100.0 * modified_score / baseline_score


def load_detections(path: str | Path) -> Dict[int, List[BBox]]:
    """Read ``frame_ts<TAB>x1,y1,x2,y2`` lines into boxes per frame."""
    boxes: Dict[int, List[BBox]] = defaultdict(list)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        ts_text, sep, coords = line.partition("\t")
        if not sep:
            raise DetectionParseError(number, "expected frame_ts<TAB>x1,y1,x2,y2")
        try:
            ts = int(ts_text)
            values = [float(v) for v in coords.split(",")]
        except ValueError as exc:
            raise DetectionParseError(number, str(exc)) from exc
        if len(values) != 4:
            raise DetectionParseError(number, f"expected 4 coordinates, got {len(values)}")
        try:
            boxes[ts].append(BBox(*values))
        except ValueError as exc:
            raise DetectionParseError(number, str(exc)) from exc
    return dict(boxes)


def score_detections(
    predicted: Mapping[int, Sequence[BBox]],
    ground_truth: Mapping[int, Sequence[BBox]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchResult:
    """Sum per-frame match counts over every frame present in either input."""
    total = MatchResult()
    for ts in sorted(set(predicted) | set(ground_truth)):
        total = total + match_detections(
            predicted.get(ts, ()), ground_truth.get(ts, ()), iou_threshold
        )
    return total
