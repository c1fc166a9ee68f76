import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossmix_lab import detector as D
from lossmix_lab.boxes import iou
from lossmix_lab.detector import Detection
from lossmix_lab.evaluation import average_precision, evaluate, evaluate_detections
from lossmix_lab.scenegen import Instance, SceneConfig, generate_dataset


def raster_iou(a, b, res=50):
    """IoU by counting sub-pixel samples of a res x res grid per unit."""
    lo = min(a[0], a[1], b[0], b[1])
    hi = max(a[2], a[3], b[2], b[3])
    t = lo + (np.arange(int((hi - lo) * res)) + 0.5) / res
    X, Y = np.meshgrid(t, t)

    def inside(bx):
        return (X >= bx[0]) & (X < bx[2]) & (Y >= bx[1]) & (Y < bx[3])

    ia, ib = inside(a), inside(b)
    return (ia & ib).sum() / (ia | ib).sum()


def test_iou_examples_and_raster_oracle():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (3, 3, 4, 4)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(raster_iou((0, 0, 2, 2), (1, 1, 3, 3)), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(30):
        a = np.sort(rng.integers(0, 8, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        b = np.sort(rng.integers(0, 8, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        if a[2] > a[0] and a[3] > a[1] and b[2] > b[0] and b[3] > b[1]:
            assert iou(a, b) == pytest.approx(raster_iou(a, b, 10), abs=1e-12)
            assert iou(a, b) == iou(b, a)


def gt_boxes(n):
    return [Instance(0, (10.0 * k, 0.0, 10.0 * k + 8, 8.0)) for k in range(n)]


def dets_for(pattern, gts, scores=None):
    """pattern[k] = GT index the k-th detection sits on exactly, or -1 for a false positive."""
    scores = scores if scores is not None else [1.0 - 0.1 * k for k in range(len(pattern))]
    out = []
    for k, (p, s) in enumerate(zip(pattern, scores)):
        box = gts[p].box if p >= 0 else (100.0 + 10 * k, 50.0, 108.0 + 10 * k, 58.0)
        out.append(Detection(0, box, s))
    return out


def exact_all_point_ap(pattern, num_gt):
    """Area under the precision envelope, from the ranked list directly."""
    matched, tp = set(), []
    for p in pattern:
        hit = p >= 0 and p not in matched
        tp.append(hit)
        if hit:
            matched.add(p)
    area, prev_r = 0.0, 0.0
    for k in range(len(tp)):
        if not tp[k]:
            continue
        r = sum(tp[:k + 1]) / num_gt
        env = max(sum(tp[:j + 1]) / (j + 1) for j in range(k, len(tp)))
        area += (r - prev_r) * env
        prev_r = r
    return area


def test_ap_examples():
    g = gt_boxes(2)
    assert average_precision(dets_for([0, 1], g), g) == 1.0
    assert average_precision([], g) == 0.0
    assert average_precision(dets_for([0], g), g) == pytest.approx(0.5, abs=0.005)


def test_ap_matches_brute_force_enumeration_exhaustively():
    worst = 0.0
    for n_gt in (1, 2, 3):
        g = gt_boxes(n_gt)
        for n_det in range(6):
            for pattern in itertools.product(range(-1, n_gt), repeat=n_det):
                got = average_precision(dets_for(pattern, g), g)
                worst = max(worst, abs(got - exact_all_point_ap(pattern, n_gt)))
    assert worst <= 0.005


def test_greedy_matching_prefers_highest_iou_unmatched():
    g = [Instance(0, (0, 0, 10, 10)), Instance(0, (2, 0, 12, 10))]
    d = [Detection(0, (2, 0, 12, 10), 0.9), Detection(0, (0, 0, 10, 10), 0.8)]
    assert average_precision(d, g) == 1.0


def test_ap_ignores_other_classes_and_averages_over_gt_classes():
    g = [Instance(0, (0, 0, 8, 8)), Instance(1, (20, 0, 28, 8))]
    d = [Detection(0, (0, 0, 8, 8), 0.9), Detection(1, (0, 0, 8, 8), 0.95)]
    assert average_precision(d, g) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1, 3), max_size=6), st.integers(0, 3))
def test_adding_a_correct_detection_never_decreases_ap(pattern, new_gt):
    g = gt_boxes(4)
    pattern = list(pattern)
    if new_gt in pattern:
        return
    scores = [1.0 - 0.1 * k for k in range(len(pattern))]
    before = average_precision(dets_for(pattern, g, scores), g)
    for pos_score in (1.5, 0.01):
        after = average_precision(dets_for(pattern + [new_gt], g, scores + [pos_score]), g)
        assert after >= before - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1, 2), st.floats(0.01, 0.99)), max_size=6))
def test_ap_invariant_to_monotone_score_transform(items):
    g = gt_boxes(3)
    pattern = [p for p, _ in items]
    scores = [s for _, s in items]
    a = average_precision(dets_for(pattern, g, scores), g)
    b = average_precision(dets_for(pattern, g, [np.log(s / (1 - s)) * 3 + 7 for s in scores]), g)
    assert a == b


def test_evaluate_detections_perfect_and_duplicated():
    data = generate_dataset(3, 20, SceneConfig())
    gts = [s.instances for s in data]
    perfect = [[Detection(i.class_id, i.box, 1.0) for i in gs] for gs in gts]
    r = evaluate_detections(perfect, gts)
    assert r.ap == r.ap50 == r.ap75 == 1.0
    rng = np.random.default_rng(1)
    noisy = [[Detection(i.class_id, tuple(np.add(i.box, rng.uniform(-3, 3, 4))), float(rng.uniform()))
              for i in gs] + [Detection(int(rng.integers(3)), (1, 1, 9, 9), float(rng.uniform()))]
             for gs in gts]
    once = evaluate_detections(noisy, gts)
    twice = evaluate_detections(noisy + noisy, gts + gts)
    assert twice.ap == pytest.approx(once.ap, abs=1e-12)
    assert twice.ap50 == pytest.approx(once.ap50, abs=1e-12)
    assert 0 <= once.ap <= max(once.ap50, once.ap75) <= 1


def test_evaluate_model_smoke_and_empty_error():
    cfg = D.DetectorConfig()
    data = generate_dataset(4, 10, SceneConfig())
    r = evaluate(D.init_params(0, cfg), data, cfg)
    assert all(0.0 <= v <= 1.0 for v in (r.ap, r.ap50, r.ap75))
    assert r == evaluate(D.init_params(0, cfg), data, cfg)
    with pytest.raises(ValueError, match="empty"):
        evaluate(D.init_params(0, cfg), [], cfg)
