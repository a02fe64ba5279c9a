from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ap_cases import ap_cases
from m3dv.evaluation import RECALL_POSITIONS, UndefinedAPError, ap_r40, ap_table, filter_by_confidence, pr_curve
from m3dv.geometry import iou_3d, iou_bev
from m3dv.kitti_io import generate_scene, generate_scenes


@pytest.mark.parametrize("name,dets,gts,expected", ap_cases(), ids=[c[0] for c in ap_cases()])
def test_ap_fixtures(name, dets, gts, expected):
    assert ap_r40(dets, gts, iou_3d, 0.7) == expected
    assert ap_r40(dets, gts, iou_bev, 0.7) == expected


def test_recall_positions():
    assert len(RECALL_POSITIONS) == 40
    assert RECALL_POSITIONS[0] == 1 / 40 and RECALL_POSITIONS[-1] == 1.0


def test_no_ground_truth_is_undefined():
    with pytest.raises(UndefinedAPError):
        ap_r40([[]], [[]])


def test_threshold_must_be_open_unit_interval():
    _, dets, gts, _ = ap_cases()[0]
    for thr in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            ap_r40(dets, gts, iou_3d, thr)


def test_scene_count_mismatch():
    _, dets, gts, _ = ap_cases()[0]
    with pytest.raises(ValueError):
        ap_r40(dets + [[]], gts)


def test_gt_used_once():
    scene = generate_scene(3, 1)
    gt = scene.objects[0]
    dets = [[replace(gt, score=0.9), replace(gt, score=0.8)]]
    p, r = pr_curve(dets, [[gt]], iou_3d, 0.5)
    assert p.tolist() == [1.0, 0.5]
    assert r.tolist() == [1.0, 1.0]


def test_category_must_agree():
    gt = generate_scene(3, 1).objects[0]
    other = "Pedestrian" if gt.category != "Pedestrian" else "Car"
    assert ap_r40([[replace(gt, category=other, score=1.0)]], [[gt]], iou_3d, 0.5) == 0.0


def test_per_category_filter():
    scene = generate_scene(11, 3)
    dets = [[replace(o, score=1.0) for o in scene.objects]]
    for cat in {o.category for o in scene.objects}:
        assert ap_r40(dets, [scene.objects], iou_3d, 0.5, category=cat) == 100.0


def _noisy_detections(seed: int):
    rng = np.random.default_rng(seed)
    scenes = generate_scenes(seed, 4, (1, 3))
    dets = []
    for s in scenes:
        ds = []
        for o in s.objects:
            x, y, z = o.location
            ds.append(replace(o, location=(x + rng.normal(0, 0.3), y, z + rng.normal(0, 0.5)),
                              score=float(rng.uniform(0.05, 1.0))))
        for o in s.objects[:1]:
            x, y, z = o.location
            ds.append(replace(o, location=(x + 30.0, y, z), score=float(rng.uniform(0.05, 1.0))))
        dets.append(ds)
    return dets, [s.objects for s in scenes]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_score_transform_invariance(seed):
    dets, gts = _noisy_detections(seed)
    base = ap_r40(dets, gts, iou_bev, 0.3)
    squashed = [[replace(d, score=d.score ** 3) for d in ds] for ds in dets]
    assert ap_r40(squashed, gts, iou_bev, 0.3) == base


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_removing_false_positive_never_lowers_ap(seed):
    dets, gts = _noisy_detections(seed)
    base = ap_r40(dets, gts, iou_bev, 0.3)
    # The far-shifted copy is always a false positive.
    trimmed = [ds[:-1] for ds in dets]
    assert ap_r40(trimmed, gts, iou_bev, 0.3) >= base


def test_tiny_threshold_with_overlapping_dets_is_perfect():
    scenes = generate_scenes(5, 4, (1, 3))
    nudged = [[replace(o, location=(o.location[0] + 0.05, *o.location[1:]), score=0.5) for o in s.objects]
              for s in scenes]
    assert ap_r40(nudged, [s.objects for s in scenes], iou_bev, 1e-9) == 100.0


def test_filter_by_confidence_boundaries():
    objs = generate_scene(2, 3).objects
    scored = [replace(o, score=s) for o, s in zip(objs, (0.1, 0.2, 0.9))]
    kept = filter_by_confidence(scored)
    assert [d.score for d in kept] == [0.2, 0.9]
    assert filter_by_confidence([replace(o, score=0.05) for o in objs]) == []
    above = [replace(o, score=0.5) for o in objs]
    assert filter_by_confidence(above) == above


def test_invalid_scores_rejected():
    obj = generate_scene(2, 1).objects[0]
    for bad in (None, float("nan"), 1.5, -0.1):
        with pytest.raises(ValueError):
            filter_by_confidence([replace(obj, score=bad)])


def test_ap_table_rows():
    _, dets, gts, _ = ap_cases()[0]
    rows = ap_table(dets, gts, {"3d": iou_3d, "bev": iou_bev}, [0.5, 0.7], ["Car", "Pedestrian", "Cyclist", "Van"])
    cats = {o.category for o in gts[0]}
    assert {r["category"] for r in rows} == cats
    assert len(rows) == 4 * len(cats)
    assert all(r["ap_r40"] == 100.0 for r in rows)
