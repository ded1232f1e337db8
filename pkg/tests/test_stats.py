import math
import random

import pytest

from vidbus.errors import EmptySamplesError
from vidbus.stats import latency_summary, percentile


def test_nearest_rank_reference_values():
    samples = list(range(1, 101))
    random.Random(1).shuffle(samples)
    assert percentile(samples, 95) == 95
    assert percentile(samples, 100) == 100
    assert percentile([42.0], 95) == 42.0
    assert percentile([7.0] * 13, 50) == 7.0


def test_percentile_matches_sorted_index():
    rng = random.Random(6)
    for _ in range(300):
        samples = [rng.uniform(0, 500) for _ in range(rng.randint(1, 60))]
        p = rng.uniform(0.1, 100)
        rank = math.ceil(p * len(samples) / 100.0)
        assert percentile(samples, p) == sorted(samples)[max(rank, 1) - 1]


def test_percentile_rejects_bad_input():
    with pytest.raises(EmptySamplesError):
        percentile([], 95)
    with pytest.raises(ValueError):
        percentile([1.0], 0)
    with pytest.raises(ValueError):
        percentile([1.0], 101)


def test_latency_summary():
    summary = latency_summary([10.0, 20.0, 30.0, 40.0])
    assert summary["count"] == 4
    assert summary["p50_ms"] == 20.0
    assert summary["p95_ms"] == 40.0
    assert summary["mean_ms"] == 25.0
    assert latency_summary([])["count"] == 0
