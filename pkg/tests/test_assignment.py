import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from posekit.assignment import (CandidateLabel, CentroidMode, LevelConfig, assign_coarse_targets, assign_fpn_level,
                                cell_center, label_candidates, label_matrix, nearest_cell, pose_centroid)
from posekit.domain import Pose, PoseError
from posekit.oks import OksParams, oks

CFG = LevelConfig((4, 8, 16), 32.0)
GRIDS = CFG.grids(64, 64)


def square(cx, cy, side, K=4):
    h = side / 2
    pts = [[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]][:K]
    return Pose.from_xy(pts)


def test_centroid_examples():
    sym = Pose.from_xy([[3, 3], [7, 3], [7, 7], [3, 7]])
    assert pose_centroid(sym, "keypoints") == pose_centroid(sym, "bbox") == (5.0, 5.0)
    p = Pose([(0, 0, 2), (10, 0, 2), (2, 6, 2)])
    assert pose_centroid(p, CentroidMode.KEYPOINTS) == pytest.approx((4.0, 2.0), abs=1e-15)
    assert pose_centroid(p, CentroidMode.BBOX) == (5.0, 3.0)
    one = Pose([(3, 7, 2), (50, 50, 0)])
    assert pose_centroid(one, "keypoints") == pose_centroid(one, "bbox") == (3.0, 7.0)
    with pytest.raises(PoseError):
        pose_centroid(Pose([(0, 0, 0)]))
    with pytest.raises(ValueError):
        pose_centroid(p, "middle")


def test_fpn_level_examples():
    assert assign_fpn_level(square(50, 50, 32), CFG) == 0
    assert assign_fpn_level(square(50, 50, 128), CFG) == 2
    assert assign_fpn_level(square(50, 50, 64), CFG) == 1
    assert assign_fpn_level(square(50, 50, 4 * 32), LevelConfig((4, 8), 32.0)) == 1  # clamped
    assert assign_fpn_level(Pose.from_xy([[3, 3]]), CFG) == 0


@given(st.floats(0.0, 1000.0))
def test_fpn_level_in_range(side):
    lvl = assign_fpn_level(Pose.from_xy([[0, 0], [side, side]]), CFG)
    assert 0 <= lvl < CFG.level_count


def test_level_config_validation():
    with pytest.raises(ValueError):
        LevelConfig((8, 4))
    with pytest.raises(ValueError):
        LevelConfig(())
    with pytest.raises(ValueError):
        LevelConfig((4,), 0.0)


def test_nearest_cell_ties_prefer_smaller_row_then_col():
    # (8, 8) is equidistant from the centres of cells (1,1), (1,2), (2,1), (2,2) at stride 4... centres 6 and 10
    assert nearest_cell(8.0, 8.0, 4, (16, 16)) == (1, 1)
    assert nearest_cell(6.0, 6.0, 4, (16, 16)) == (1, 1)
    assert nearest_cell(-100, 500, 4, (16, 16)) == (15, 0)


def test_aligned_centroid():
    # side 20 -> level 0, stride 4; centroid at the centre of cell (3, 5) = (22, 14)
    gt = square(22, 14, 20)
    (t,) = assign_coarse_targets([gt], CFG, GRIDS)
    assert (t.level, t.cell, t.gt_index) == (0, (3, 5), 0)
    expected = ((gt.xy - np.array([22.0, 14.0])) / 4).ravel()
    np.testing.assert_array_equal(t.target_offsets, expected)


@given(st.floats(-1.99, 1.99), st.floats(-1.99, 1.99))
def test_small_shift_keeps_cell(dx, dy):
    (t,) = assign_coarse_targets([square(22 + dx, 14 + dy, 20)], CFG, GRIDS)
    assert t.cell == (3, 5)


def test_two_sizes_two_levels():
    targets = assign_coarse_targets([square(12, 12, 16), square(40, 40, 66)], CFG, GRIDS)
    assert sorted((t.level, t.gt_index) for t in targets) == [(0, 0), (1, 1)]


def test_collision_later_wins_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="posekit.assignment"):
        targets = assign_coarse_targets([square(22, 14, 20), square(22.5, 14.5, 21)], CFG, GRIDS)
    assert [t.gt_index for t in targets] == [1]
    assert "collides" in caplog.text


def test_invisible_joints_masked():
    gt = Pose([(10, 10, 2), (30, 30, 2), (90, 90, 0)])
    (t,) = assign_coarse_targets([gt], CFG, GRIDS)
    np.testing.assert_array_equal(t.mask, [1, 1, 1, 1, 0, 0])
    assert t.target_offsets[4] == t.target_offsets[5] == 0.0


@st.composite
def scenes(draw):
    n = draw(st.integers(1, 3))
    out = []
    for _ in range(n):
        k = 5
        xy = np.array(draw(st.lists(st.tuples(st.floats(0, 63.9), st.floats(0, 63.9)), min_size=k, max_size=k)))
        v = np.array(draw(st.lists(st.sampled_from([0, 2]), min_size=k, max_size=k)), dtype=float)
        if not v.any():
            v[0] = 2
        out.append(Pose(np.column_stack([xy, v])))
    return out


@given(scenes(), st.sampled_from(["keypoints", "bbox"]))
def test_encode_decode_round_trip(gt, mode):
    for t in assign_coarse_targets(gt, CFG, GRIDS, mode):
        stride = CFG.strides[t.level]
        cx, cy = cell_center(t.cell, stride)
        decoded = np.column_stack([cx + stride * t.target_offsets[0::2], cy + stride * t.target_offsets[1::2]])
        vis = gt[t.gt_index].visible
        assert np.max(np.abs(decoded[vis] - gt[t.gt_index].xy[vis])) <= 1e-9


@given(scenes())
def test_one_target_per_gt_minus_collisions(gt):
    targets = assign_coarse_targets(gt, CFG, GRIDS)
    cells = {(t.level, t.cell) for t in targets}
    assert len(cells) == len(targets) <= len(gt)
    for t in targets:
        h, w = GRIDS[t.level]
        assert 0 <= t.cell[0] < h and 0 <= t.cell[1] < w


# ---------------------------------------------------------------- labels

PRM = OksParams.for_k(4)


def test_exact_candidate_positive_and_active():
    gt = square(30, 30, 20)
    (lab,) = label_candidates([gt], [gt], PRM)
    assert lab == CandidateLabel("positive", 0, True, 1.0)


def test_far_candidate_negative():
    gt = square(30, 30, 20)
    (lab,) = label_candidates([gt.translated(300, 0)], [gt], PRM)
    assert lab.kind == "negative" and not lab.regression_active


def test_ignore_band_via_bisection():
    gt = square(30, 30, 20)
    lo, hi = 0.0, 50.0
    for _ in range(100):
        mid = (lo + hi) / 2
        if oks(gt.translated(mid, 0), gt, PRM) > 0.55:
            lo = mid
        else:
            hi = mid
    cand = gt.translated(lo, 0)
    assert oks(cand, gt, PRM) == pytest.approx(0.55, abs=1e-9)
    (lab,) = label_candidates([cand], [gt], PRM)
    assert lab.kind == "ignore" and not lab.regression_active


def test_thresholds_strict():
    cls, reg = label_matrix(np.array([0.6, 0.5, 0.7, 0.71, 0.49, 0.61]))
    np.testing.assert_array_equal(cls, [-1, -1, 1, 1, 0, 1])
    np.testing.assert_array_equal(reg, [False, False, False, True, False, False])


def test_no_gt_all_negative():
    labs = label_candidates([square(1, 1, 2), square(9, 9, 3)], [], PRM)
    assert [lab.kind for lab in labs] == ["negative", "negative"]


def test_argmax_tie_prefers_lower_index():
    gt = square(30, 30, 20)
    (lab,) = label_candidates([gt], [gt, gt], PRM)
    assert lab.gt_index == 0


def test_candidate_label_invariant():
    with pytest.raises(ValueError):
        CandidateLabel("ignore", -1, True)


@given(st.integers(0, 10 ** 6))
def test_labels_partition_and_reorder_invariance(seed):
    r = np.random.default_rng(seed)
    gts = [square(*r.uniform(10, 50, size=2), r.uniform(8, 30)) for _ in range(3)]
    cands = [g.translated(*r.normal(scale=3, size=2)) for g in gts for _ in range(3)]
    labs = label_candidates(cands, gts, PRM)
    perm = list(r.permutation(3))
    labs_p = label_candidates(cands, [gts[i] for i in perm], PRM)
    for a, b in zip(labs, labs_p):
        assert a.kind in {"positive", "negative", "ignore"}
        assert not a.regression_active or a.kind == "positive"
        assert a.kind == b.kind and a.regression_active == b.regression_active
        assert a.best_oks == pytest.approx(b.best_oks, abs=1e-15)
        if a.kind == "positive":
            assert perm[b.gt_index] == a.gt_index
