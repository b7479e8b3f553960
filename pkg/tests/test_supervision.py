import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from posekit import autodiff as ad
from posekit.domain import Pose
from posekit.supervision import focal_loss, gaussian_target_maps, l2_loss, total_loss

from oracles import binary_cross_entropy


def test_gaussian_peak_and_two_sigma():
    # stride 4, sigma 2 cells = 8 px; joint at the centre of cell (2, 3) = (14, 10)
    pose = Pose.from_xy([[14.0, 10.0]])
    (m,) = gaussian_target_maps([pose], [(16, 16)], [4], K=1)
    assert m[0, 2, 3] == 1.0
    # 2 sigma = 16 px = 4 cells along x
    assert abs(m[0, 2, 7] - math.exp(-2.0)) <= 1e-9
    assert abs(m[0, 6, 3] - math.exp(-2.0)) <= 1e-9


def test_gaussian_pixel_sigma():
    (m,) = gaussian_target_maps([Pose.from_xy([[2.0, 2.0]])], [(8, 8)], [4], K=1, sigma=4.0, sigma_in_cells=False)
    assert abs(m[0, 0, 2] - math.exp(-2.0)) <= 1e-9


def test_gaussian_max_combination():
    a = Pose.from_xy([[14.0, 10.0], [30.0, 30.0]])
    b = Pose.from_xy([[22.0, 10.0], [50.0, 50.0]], visibility=[2, 0])
    (ma,) = gaussian_target_maps([a], [(16, 16)], [4], K=2)
    (mb,) = gaussian_target_maps([b], [(16, 16)], [4], K=2)
    (mab,) = gaussian_target_maps([a, b], [(16, 16)], [4], K=2)
    np.testing.assert_array_equal(mab, np.maximum(ma, mb))
    assert not mb[1].any()  # invisible joint contributes nothing


@given(st.floats(0, 63.9), st.floats(0, 63.9))
def test_gaussian_range_and_monotone_decay(x, y):
    maps = gaussian_target_maps([Pose.from_xy([[x, y]])], [(16, 16), (8, 8)], [4, 8], K=1)
    for m, stride in zip(maps, (4, 8)):
        assert np.all(m > 0) and np.all(m <= 1)
        cy = (np.arange(m.shape[1]) + 0.5) * stride
        cx = (np.arange(m.shape[2]) + 0.5) * stride
        d2 = (cy[:, None] - y) ** 2 + (cx[None, :] - x) ** 2
        order = np.argsort(d2.ravel(), kind="stable")
        assert np.all(np.diff(m.ravel()[order]) <= 1e-15)


def test_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_target_maps([], [(4, 4)], [4], K=1, sigma=0.0)


def test_l2_examples():
    pred = ad.leaf(np.array([1.0, 2.0, 3.0]))
    assert float(l2_loss(pred, [1.0, 2.0, 3.0]).values) == 0.0
    assert float(l2_loss(pred, [0.0, 0.0, 0.0]).values) == pytest.approx(14 / 3)
    assert float(l2_loss(pred, [0.0, 0.0, 0.0], [1, 0, 1]).values) == pytest.approx(5.0)
    assert float(l2_loss(pred, [0.0, 0.0, 0.0], [0, 0, 0]).values) == 0.0
    with pytest.raises(ValueError):
        l2_loss(pred, [0.0, 0.0])


def test_focal_confident_positive_is_zero():
    assert float(focal_loss(ad.leaf(np.array([800.0])), [1]).values) == 0.0


def test_focal_hand_value():
    # logit 0, positive: 0.25 * 0.5^2 * ln 2
    val = float(focal_loss(ad.leaf(np.array([0.0])), [1]).values)
    assert val == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)
    assert val == pytest.approx(0.043322, abs=5e-7)


@given(st.lists(st.tuples(st.floats(-20, 20), st.sampled_from([0, 1])), min_size=1, max_size=8))
def test_focal_gamma0_is_half_bce(pairs):
    logits = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    val = float(focal_loss(ad.leaf(logits), labels, alpha=0.5, gamma=0.0).values)
    ref = 0.5 * sum(binary_cross_entropy(x, y) for x, y in pairs) / max(1, int(labels.sum()))
    assert val == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_focal_ignore_labels_contribute_nothing():
    logits = ad.leaf(np.array([0.3, -2.0, 5.0]))
    a = float(focal_loss(logits, [1, 0, -1]).values)
    b = float(focal_loss(ad.leaf(np.array([0.3, -2.0])), [1, 0]).values)
    assert a == b
    ad.backward(focal_loss(logits, [1, 0, -1]))
    assert logits.grad[2] == 0.0


def _triples(rng, shape=(4, 3)):
    pred = ad.leaf(rng.normal(size=shape))
    tgt = rng.normal(size=shape)
    mask = rng.integers(0, 2, size=shape).astype(float)
    return pred, tgt, mask


def test_total_loss_weights_and_recomposition(rng):
    coarse, refine = _triples(rng), _triples(rng)
    logits = ad.leaf(rng.normal(size=(2, 5)))
    labels = rng.integers(-1, 2, size=(2, 5))
    hm = (ad.leaf(rng.normal(size=(3, 4))), rng.uniform(size=(3, 4)))
    _, only_coarse = total_loss(coarse, refine, (logits, labels), hm, weights=(1, 0, 0, 0))
    assert only_coarse.total == only_coarse.coarse_l2
    w = (0.7, 1.3, 2.0, 0.4)
    t, rep = total_loss(coarse, refine, (logits, labels), hm, weights=w)
    recomposed = w[0] * rep.coarse_l2 + w[1] * rep.refine_l2 + w[2] * rep.focal + w[3] * rep.heatmap_l2
    assert abs(rep.total - recomposed) <= 1e-12
    assert float(t.values) == rep.total
    _, no_hm = total_loss(coarse, refine, (logits, labels), None)
    assert no_hm.heatmap_l2 == 0.0
    with pytest.raises(ValueError):
        total_loss(coarse, refine, (logits, labels), None, weights=(1, 1, 1))


def test_perfect_predictions_near_zero(rng):
    tgt = rng.normal(size=(6,))
    coarse_pred = ad.leaf(tgt.copy())
    residual = tgt - coarse_pred.values
    assert not residual.any()  # exact coarse leaves nothing for the refine branch
    refine_pred = ad.leaf(np.zeros(6))
    labels = np.array([1, 0, 0, -1])
    logits = ad.leaf(np.where(labels == 1, 40.0, -40.0))
    hm_t = rng.uniform(size=(2, 2))
    _, rep = total_loss((coarse_pred, tgt, None), (refine_pred, residual, None), (logits, labels),
                        (ad.leaf(hm_t.copy()), hm_t))
    assert rep.total < 1e-6
