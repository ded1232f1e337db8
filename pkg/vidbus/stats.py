from __future__ import annotations

import math
from typing import Dict, Iterable, Sequence

from .errors import EmptySamplesError


def percentile(samples: Iterable[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    ordered = sorted(samples)
    if not ordered:
        raise EmptySamplesError("percentile of an empty sample set")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100].")
    rank = max(1, math.ceil(p * len(ordered) / 100.0))
    return ordered[rank - 1]


def latency_summary(samples: Sequence[float]) -> Dict[str, float]:
    if not samples:
        return {"count": 0, "p50_ms": 0.0, "p95_ms": 0.0, "p99_ms": 0.0, "mean_ms": 0.0}
    return {
        "count": len(samples),
        "p50_ms": percentile(samples, 50),
        "p95_ms": percentile(samples, 95),
        "p99_ms": percentile(samples, 99),
        "mean_ms": sum(samples) / len(samples),
    }
