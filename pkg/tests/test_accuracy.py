import random
from itertools import permutations

import pytest

from vidbus.accuracy import (
    BBox,
    MatchResult,
    f1,
    iou,
    load_detections,
    match_detections,
    normalized_f1,
    score_detections,
)
from vidbus.errors import DetectionParseError, ZeroBaselineError


def _random_box(rng, span=20.0):
    x1, y1 = rng.uniform(0, span), rng.uniform(0, span)
    return BBox(x1, y1, x1 + rng.uniform(1, 8), y1 + rng.uniform(1, 8))


def _optimal_tp(preds, gts, threshold):
    best = 0
    slots = list(range(len(preds))) + [None] * len(gts)
    for assignment in set(permutations(slots, len(gts))):
        tp = sum(
            1
            for gt, index in zip(gts, assignment)
            if index is not None and iou(preds[index], gt) > threshold
        )
        best = max(best, tp)
    return best


def test_iou_reference_values():
    a = BBox(0, 0, 2, 2)
    b = BBox(1, 1, 3, 3)
    assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 6, 6)) == 0.0
    assert iou(a, BBox(2, 0, 4, 2)) == 0.0


def test_iou_is_symmetric_and_bounded():
    rng = random.Random(3)
    for _ in range(500):
        a, b = _random_box(rng), _random_box(rng)
        value = iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == iou(b, a)


def test_degenerate_box_is_rejected():
    with pytest.raises(ValueError):
        BBox(1, 1, 1, 2)


def test_match_identical_lists():
    rng = random.Random(5)
    boxes = [_random_box(rng, span=200) for _ in range(6)]
    assert match_detections(boxes, boxes) == MatchResult(tp=6, fp=0, fn=0)
    assert match_detections([], [boxes[0]]) == MatchResult(tp=0, fp=0, fn=1)
    assert match_detections([boxes[0]], []) == MatchResult(tp=0, fp=1, fn=0)


def test_threshold_is_strict_and_validated():
    gt = BBox(0, 0, 2, 2)
    half = BBox(0, 0, 2, 1)
    assert iou(half, gt) == 0.5
    assert match_detections([half], [gt], 0.5).tp == 0
    assert match_detections([half], [gt], 0.49).tp == 1
    with pytest.raises(ValueError):
        match_detections([half], [gt], 0.0)


def test_tie_goes_to_lowest_prediction_index():
    gt = BBox(0, 0, 4, 4)
    left = BBox(0, 0, 4, 3)
    right = BBox(0, 1, 4, 4)
    second_gt = BBox(0, 1, 4, 4.5)
    result = match_detections([left, right], [gt, second_gt])
    assert result.tp == 2


def test_count_identities_and_greedy_bound():
    rng = random.Random(17)
    for _ in range(1000):
        preds = [_random_box(rng) for _ in range(rng.randint(0, 3))]
        gts = [_random_box(rng) for _ in range(rng.randint(0, 3))]
        result = match_detections(preds, gts)
        assert result.tp + result.fp == len(preds)
        assert result.tp + result.fn == len(gts)
        optimal = _optimal_tp(preds, gts, 0.5)
        assert result.tp <= optimal


def test_f1_reference_values():
    assert f1(MatchResult(tp=4, fp=1, fn=4)) == pytest.approx(0.6153846, abs=1e-6)
    assert f1(MatchResult(tp=7)) == 1.0
    assert f1(MatchResult(tp=0, fp=3, fn=2)) == 0.0
    result = MatchResult(tp=3, fp=2, fn=5)
    low, high = sorted((result.precision, result.recall))
    assert low <= f1(result) <= high


def test_normalized_f1():
    assert normalized_f1(0.5, 0.5) == 100.0
    assert normalized_f1(0.48, 0.50) == pytest.approx(96.0)
    with pytest.raises(ZeroBaselineError):
        normalized_f1(0.4, 0.0)


def test_load_and_score_detection_files(tmp_path):
    truth = tmp_path / "truth.tsv"
    truth.write_text("# ts\tbox\n1\t0,0,2,2\n1\t10,10,12,12\n2\t0,0,2,2\n", encoding="utf-8")
    preds = tmp_path / "preds.tsv"
    preds.write_text("1\t0,0,2,2\n2\t5,5,6,6\n3\t0,0,1,1\n", encoding="utf-8")
    gt = load_detections(truth)
    assert sorted(gt) == [1, 2]
    assert len(gt[1]) == 2
    result = score_detections(load_detections(preds), gt)
    assert result == MatchResult(tp=1, fp=2, fn=2)


def test_detection_parse_errors_carry_line(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("1\t0,0,2,2\n2\t0,0,2\n", encoding="utf-8")
    with pytest.raises(DetectionParseError) as exc:
        load_detections(bad)
    assert exc.value.line == 2
    bad.write_text("1 0,0,2,2\n", encoding="utf-8")
    with pytest.raises(DetectionParseError):
        load_detections(bad)
