"""Characterization profiles: knob setting -> (encoded size, accuracy), plus the
linear latency/size model the controller inverts."""

from __future__ import annotations

import logging
import math
import statistics
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .accuracy import BBox, f1, normalized_f1, score_detections
from .errors import (
    BelowInterceptError,
    DegeneratePointsError,
    EmptyProfileError,
    ProfileParseError,
    UnknownAccuracyError,
)
from .frames import Frame, encoded_size
from .knobs import (
    IDENTITY,
    RESOLUTIONS,
    FrameDiffState,
    KnobSetting,
    apply_setting,
    enumerate_settings,
)

logger = logging.getLogger(__name__)

SYNTHETIC_MARKER = "# synthetic"


@dataclass(frozen=True)
class ProfileEntry:
    setting: KnobSetting
    size_bytes: int
    accuracy_pct: float

    def __post_init__(self) -> None:
        if self.size_bytes <= 0:
            raise ValueError("size_bytes must be > 0.")
        if not 0 < self.accuracy_pct <= 100:
            raise ValueError("accuracy_pct must be in (0, 100].")


class ProfileTable:
    """Immutable profile with the two lookups the controller needs.

    ``size_index`` holds the Pareto frontier: for each size the most accurate
    entry, and only entries more accurate than every smaller one. Accuracy keys
    are therefore unique and grow with size.

    This is stricter than a plain floor search over every entry. A larger entry
    that is no more accurate than some smaller one is left out of the index, so
    ``lookup_by_size`` answers with the smaller, more accurate entry where a raw
    floor lookup would have returned the dominated one. Both lookups only ever
    see frontier entries; ``entries`` and ``entry_for`` still hold the full list.
    """

    def __init__(self, entries: Iterable[ProfileEntry], synthetic: bool = False):
        self.entries: List[ProfileEntry] = list(entries)
        if not self.entries:
            raise EmptyProfileError("Profile has no entries.")
        self.synthetic = synthetic

        best_at_size: Dict[int, ProfileEntry] = {}
        for entry in self.entries:
            current = best_at_size.get(entry.size_bytes)
            if current is None or entry.accuracy_pct > current.accuracy_pct:
                best_at_size[entry.size_bytes] = entry

        frontier: List[ProfileEntry] = []
        for size in sorted(best_at_size):
            entry = best_at_size[size]
            if frontier and entry.accuracy_pct <= frontier[-1].accuracy_pct:
                continue
            frontier.append(entry)

        self._sizes: List[int] = [entry.size_bytes for entry in frontier]
        self._frontier = frontier
        self.accuracy_index: Dict[float, ProfileEntry] = {}
        for entry in frontier:
            existing = self.accuracy_index.get(entry.accuracy_pct)
            if existing is None or entry.size_bytes > existing.size_bytes:
                self.accuracy_index[entry.accuracy_pct] = entry
        self._by_setting: Dict[KnobSetting, ProfileEntry] = {}
        for entry in self.entries:
            known = self._by_setting.get(entry.setting)
            if known is None or entry.accuracy_pct > known.accuracy_pct:
                self._by_setting[entry.setting] = entry

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def size_index(self) -> List[Tuple[int, ProfileEntry]]:
        return list(zip(self._sizes, self._frontier))

    @property
    def smallest(self) -> ProfileEntry:
        return self._frontier[0]

    @property
    def largest(self) -> ProfileEntry:
        return self._frontier[-1]

    @property
    def max_accuracy(self) -> float:
        return self._frontier[-1].accuracy_pct

    def entry_for(self, setting: KnobSetting) -> Optional[ProfileEntry]:
        return self._by_setting.get(setting)

    def size_of(self, setting: KnobSetting) -> int:
        entry = self._by_setting.get(setting)
        if entry is not None:
            return entry.size_bytes
        if setting.is_identity:
            return self.largest.size_bytes
        raise KeyError(f"Setting '{setting.to_text()}' is not in the profile.")

    def accuracy_of(self, setting: KnobSetting) -> float:
        entry = self._by_setting.get(setting)
        if entry is not None:
            return entry.accuracy_pct
        if setting.is_identity:
            return 100.0
        raise KeyError(f"Setting '{setting.to_text()}' is not in the profile.")


def lookup_by_size(table: ProfileTable, size_bytes: float) -> Optional[ProfileEntry]:
    """Floor query over the size index."""
    pos = bisect_right(table._sizes, size_bytes) - 1
    if pos < 0:
        return None
    return table._frontier[pos]


def lookup_by_accuracy(table: ProfileTable, accuracy_pct: float) -> KnobSetting:
    entry = table.accuracy_index.get(accuracy_pct)
    if entry is None:
        raise UnknownAccuracyError(f"No profile entry with accuracy {accuracy_pct}.")
    return entry.setting


# -- latency model -------------------------------------------------------------


@dataclass(frozen=True)
class LinearLatencyModel:
    slope: float
    intercept: float

    def __post_init__(self) -> None:
        if not self.slope > 0:
            raise ValueError("Latency model slope must be > 0.")

    def predict(self, size_bytes: float) -> float:
        return self.intercept + self.slope * size_bytes

    @property
    def bytes_per_ms(self) -> float:
        return 1.0 / self.slope


def fit_latency_model(points: Sequence[Tuple[float, float]]) -> LinearLatencyModel:
    """Ordinary least squares fit of latency (ms) on size (bytes)."""
    if len(points) < 2:
        raise DegeneratePointsError("Need at least two calibration points.")
    data = np.asarray(points, dtype=np.float64)
    sizes, latencies = data[:, 0], data[:, 1]
    dx = sizes - sizes.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise DegeneratePointsError("All calibration sizes are equal.")
    slope = float(np.dot(dx, latencies - latencies.mean())) / sxx
    intercept = float(latencies.mean() - slope * sizes.mean())
    return LinearLatencyModel(slope=slope, intercept=intercept)


def size_for_latency(
    model: LinearLatencyModel, latency_ms: float, table: Optional[ProfileTable] = None
) -> float:
    """Invert the model; with a table the result is clamped to its size range."""
    if latency_ms <= model.intercept:
        raise BelowInterceptError(
            f"Latency {latency_ms} ms is at or below the model intercept {model.intercept:.3f} ms."
        )
    size = (latency_ms - model.intercept) / model.slope
    if table is not None:
        size = min(max(size, float(table.smallest.size_bytes)), float(table.largest.size_bytes))
    return size


# -- files ---------------------------------------------------------------------


def _data_lines(path: Path) -> Iterable[Tuple[int, List[str]]]:
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield number, raw.rstrip("\r\n").split("\t")


def load_profile(path: str | Path) -> ProfileTable:
    profile_path = Path(path)
    text = profile_path.read_text(encoding="utf-8")
    synthetic = any(line.strip().lower() == SYNTHETIC_MARKER for line in text.splitlines())
    entries: List[ProfileEntry] = []
    for number, fields in _data_lines(profile_path):
        if len(fields) != 3:
            raise ProfileParseError(number, f"expected 3 tab-separated fields, got {len(fields)}")
        try:
            setting = KnobSetting.parse(fields[0])
        except ValueError as exc:
            raise ProfileParseError(number, f"bad setting: {exc}") from exc
        try:
            size = int(fields[1])
            accuracy = float(fields[2])
        except ValueError as exc:
            raise ProfileParseError(number, f"bad number: {exc}") from exc
        if size <= 0:
            raise ProfileParseError(number, "size_bytes must be > 0")
        if not (0 < accuracy <= 100) or math.isnan(accuracy):
            raise ProfileParseError(number, f"accuracy {accuracy} outside (0, 100]")
        entries.append(ProfileEntry(setting=setting, size_bytes=size, accuracy_pct=accuracy))
    if not entries:
        raise EmptyProfileError(f"Profile {profile_path} has no entries.")
    return ProfileTable(entries, synthetic=synthetic)


def save_profile(table: ProfileTable, path: str | Path, *, comment: str | None = None) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines: List[str] = []
    if table.synthetic:
        lines.append(SYNTHETIC_MARKER)
    if comment:
        lines.extend(f"# {row}" for row in comment.splitlines())
    lines.append("# setting\tsize_bytes\taccuracy_pct")
    for entry in sorted(table.entries, key=lambda e: (e.size_bytes, e.accuracy_pct)):
        lines.append(f"{entry.setting.to_text()}\t{entry.size_bytes}\t{entry.accuracy_pct:g}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_latency_calibration(path: str | Path) -> List[Tuple[int, float]]:
    points: List[Tuple[int, float]] = []
    for number, fields in _data_lines(Path(path)):
        if len(fields) != 2:
            raise ProfileParseError(number, f"expected 2 tab-separated fields, got {len(fields)}")
        try:
            size = int(fields[0])
            latency = float(fields[1])
        except ValueError as exc:
            raise ProfileParseError(number, f"bad number: {exc}") from exc
        if size <= 0 or latency < 0:
            raise ProfileParseError(number, "size must be > 0 and latency >= 0")
        points.append((size, latency))
    if not points:
        raise EmptyProfileError(f"Calibration file {path} has no points.")
    return points


# -- builders ------------------------------------------------------------------


def _degradation_order() -> List[KnobSetting]:
    # least degraded first; frame differencing has no size meaning per frame
    candidates = [
        s
        for s in enumerate_settings()
        if not s.is_identity and s.framediff_threshold is None
    ]

    def rank(setting: KnobSetting) -> Tuple[int, int, int]:
        res_rank = 0 if setting.resolution is None else RESOLUTIONS.index(setting.resolution) + 1
        cs_rank = 0 if setting.colorspace is None else (2 if setting.colorspace.name == "GRAY" else 1)
        blur_rank = setting.blur_kernel or 0
        return (res_rank, cs_rank, blur_rank)

    return sorted(candidates, key=rank)


def synthetic_profile(
    min_size_bytes: int = 100_000,
    native_size_bytes: int = 1_000_000,
    count: int = 30,
    knee_bytes: float = 25_000.0,
) -> ProfileTable:
    """Labeled-synthetic table: geometric size grid, accuracy saturating with size.

    accuracy = 100 - 10 * exp(-(size - min_size) / knee), capped just below 100; only
    the native size, which carries the identity setting, reaches exactly 100%.
    """
    if count < 2:
        raise ValueError("count must be >= 2.")
    if not 0 < min_size_bytes < native_size_bytes:
        raise ValueError("Need 0 < min_size_bytes < native_size_bytes.")
    if knee_bytes <= 0:
        raise ValueError("knee_bytes must be > 0.")
    order = _degradation_order()
    if count - 1 > len(order):
        raise ValueError(f"count must be <= {len(order) + 1}.")

    sizes = np.geomspace(min_size_bytes, native_size_bytes, count)
    # most degraded settings go to the smallest sizes
    picks = np.linspace(len(order) - 1, 0, count - 1).round().astype(int)
    entries: List[ProfileEntry] = []
    for index in range(count - 1):
        size = int(round(float(sizes[index])))
        accuracy = 100.0 - 10.0 * math.exp(-(size - min_size_bytes) / knee_bytes)
        entries.append(
            ProfileEntry(
                setting=order[int(picks[index])],
                size_bytes=size,
                accuracy_pct=min(round(accuracy, 3), 99.999),
            )
        )
    entries.append(ProfileEntry(setting=IDENTITY, size_bytes=native_size_bytes, accuracy_pct=100.0))
    return ProfileTable(entries, synthetic=True)


def median_encoded_size(frames: Sequence[Frame], setting: KnobSetting) -> Optional[int]:
    state = FrameDiffState()
    sizes = []
    for frame in frames:
        out = apply_setting(frame, setting, state)
        if out is not None:
            sizes.append(encoded_size(out))
    if not sizes:
        return None
    return int(statistics.median(sizes))


def build_corpus_profile(
    frames: Sequence[Frame],
    ground_truth: Mapping[int, List[BBox]],
    baseline: Mapping[int, List[BBox]],
    detections: Mapping[KnobSetting, Mapping[int, List[BBox]]],
    iou_threshold: float = 0.5,
) -> ProfileTable:
    """Measure sizes on the corpus and normalize each setting's F1 to the baseline's."""
    if not frames:
        raise ValueError("Corpus has no frames.")
    baseline_f1 = f1(score_detections(baseline, ground_truth, iou_threshold))
    native = median_encoded_size(frames, IDENTITY)
    assert native is not None
    entries = [ProfileEntry(setting=IDENTITY, size_bytes=native, accuracy_pct=100.0)]
    for setting, predicted in detections.items():
        if setting.is_identity:
            continue
        size = median_encoded_size(frames, setting)
        if size is None:
            logger.warning("event=profile_skip setting=%s reason=all_dropped", setting.to_text())
            continue
        score = f1(score_detections(predicted, ground_truth, iou_threshold))
        accuracy = min(100.0, normalized_f1(score, baseline_f1))
        if accuracy <= 0:
            logger.warning("event=profile_skip setting=%s reason=zero_f1", setting.to_text())
            continue
        entries.append(ProfileEntry(setting=setting, size_bytes=size, accuracy_pct=round(accuracy, 4)))
    return ProfileTable(entries)
