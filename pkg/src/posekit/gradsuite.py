"""Finite-difference checks for every differentiable operation.

Each check draws a random configuration, reduces the op output to a scalar
with a random projection, and compares analytic and central-difference
gradients.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import HeadConfig, build_model, forward, layer_shapes
from .supervision import focal_loss, l2_loss, total_loss
from .training import SceneTargets, TrainConfig, loss_from_prediction

EPS = 1e-4
TOL = 1e-4


@dataclass
class SuiteResult:
    op: str
    configs: int = 0
    failures: int = 0
    max_rel_err: float = 0.0
    coords: int = 0
    kinks: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.configs > 0 and self.failures == 0


def case_conv2d(rng):
    n = int(rng.integers(1, 3))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    inputs = {
        "x": rng.normal(size=(n, c_in, h, w)),
        "w": rng.normal(size=(c_out, c_in, k, k)),
        "b": rng.normal(size=c_out),
    }
    h_out = (h + 2 * (k // 2) - k) // stride + 1
    w_out = (w + 2 * (k // 2) - k) // stride + 1
    weights = rng.normal(size=(n, c_out, h_out, w_out))
    return (lambda t: ad.weighted_sum(ad.conv2d(t["x"], t["w"], t["b"], stride=stride), weights)), inputs


def case_relu(rng):
    x = rng.normal(size=int(rng.integers(4, 40)))
    weights = rng.normal(size=x.shape)
    return (lambda t: ad.weighted_sum(ad.relu(t["x"]), weights)), {"x": x}


def case_bilinear(rng):
    c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    feat = rng.normal(size=(c, h, w))
    point = np.array([rng.uniform(-1.0, w), rng.uniform(-1.0, h)])
    weights = rng.normal(size=c)
    return (lambda t: ad.weighted_sum(ad.bilinear_sample(t["feature"], t["point"]), weights),
            {"feature": feat, "point": point})


def case_deformable(rng):
    n = int(rng.integers(1, 3))
    K = int(rng.integers(1, 4))
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    inputs = {
        "feature": rng.normal(size=(n, c_in, h, w)),
        "offsets": rng.normal(scale=1.5, size=(n, 2 * K, h, w)),
        "weight": rng.normal(size=(c_out, c_in, K)),
        "bias": rng.normal(size=c_out),
    }
    weights = rng.normal(size=(n, c_out, h, w))
    return (lambda t: ad.weighted_sum(
        ad.deformable_pose_conv(t["feature"], t["offsets"], t["weight"], t["bias"]), weights)), inputs


def case_l2(rng):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 6)))
    target = rng.normal(size=shape)
    mask = (rng.random(shape) < 0.6).astype(float)
    return (lambda t: l2_loss(t["pred"], target, mask)), {"pred": rng.normal(size=shape)}


def case_focal(rng):
    m = int(rng.integers(2, 30))
    labels = rng.choice([1.0, 0.0, -1.0], size=m)
    alpha, gamma = rng.uniform(0.1, 0.9), float(rng.choice([0.0, 1.0, 2.0, rng.uniform(0.5, 3.0)]))
    return (lambda t: focal_loss(t["logits"], labels, alpha, gamma)), {"logits": rng.normal(scale=2.0, size=m)}


def case_total(rng):
    m = int(rng.integers(3, 12))
    tc, mc = rng.normal(size=m), (rng.random(m) < 0.5).astype(float)
    tr, mr = rng.normal(size=m), (rng.random(m) < 0.5).astype(float)
    labels = rng.choice([1.0, 0.0, -1.0], size=m)
    th = rng.random(m)
    weights = tuple(rng.uniform(0.2, 2.0, size=4))
    inputs = {k: rng.normal(size=m) for k in ("coarse", "refine", "logits", "heat")}

    def build(t):
        loss, _ = total_loss((t["coarse"], tc, mc), (t["refine"], tr, mr), (t["logits"], labels),
                             (t["heat"], th), weights=weights)
        return loss
    return build, inputs


def random_end_to_end(rng, image_size=32):
    """A small randomly-weighted model with frozen random targets, plus its loss closure."""
    K = int(rng.integers(1, 4))
    cfg = HeadConfig(K=K, channels=int(rng.integers(2, 5)), embed_channels=int(rng.integers(2, 5)),
                     strides=(4, 8, 16))
    model = build_model(cfg, int(rng.integers(1 << 30)))
    for t in model.params.values():
        t.values = rng.normal(scale=0.5, size=t.shape)
    n = int(rng.integers(1, 3))
    image = rng.random((n, cfg.in_channels, image_size, image_size))
    tcfg = TrainConfig(offset_grad=cfg.offset_grad, loss_weights=tuple(rng.uniform(0.5, 1.5, size=4)))
    grids = [(image_size // s, image_size // s) for s in cfg.strides]
    targets, frozen = [], []
    for _ in range(n):
        targets.append(SceneTargets(
            [rng.normal(size=(2 * K, h, w)) for h, w in grids],
            [(rng.random((2 * K, h, w)) < 0.3).astype(float) for h, w in grids],
            [rng.random((K, h, w)) for h, w in grids],
        ))
        frozen.append((
            [rng.choice([1.0, 0.0, -1.0], size=(1, h, w)) for h, w in grids],
            [rng.normal(size=(2 * K, h, w)) for h, w in grids],
            [(rng.random((2 * K, h, w)) < 0.3).astype(float) for h, w in grids],
        ))
    scenes = [None] * n

    def build(t):
        weights = {k: t[k] for k in model.params}
        pred = forward(model, t["image"], heatmaps=True, weights=weights)
        loss, _, _ = loss_from_prediction(pred, scenes, targets, tcfg, None, frozen_labels=frozen)
        return loss

    inputs = {"image": image, **{k: v.values for k, v in model.params.items()}}
    return build, inputs, cfg


def case_end_to_end(rng):
    build, inputs, cfg = random_end_to_end(rng)
    names = sorted(layer_shapes(cfg))
    wrt = ["image"] + list(rng.choice(names, size=2, replace=False))
    return build, inputs, wrt


CASES: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "relu": case_relu,
    "bilinear_sample": case_bilinear,
    "deformable_pose_conv": case_deformable,
    "l2_loss": case_l2,
    "focal_loss": case_focal,
    "total_loss": case_total,
    "end_to_end": case_end_to_end,
}


def run_suite(configs: int = 50, seed: int = 0, ops=None, eps: float = EPS, tol: float = TOL,
              n_coords: int = 32) -> list[SuiteResult]:
    results = []
    for name in (ops or CASES):
        case = CASES[name]
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        res = SuiteResult(name)
        start = time.perf_counter()
        for _ in range(configs):
            made = case(rng)
            build, inputs = made[0], made[1]
            wrt = made[2] if len(made) > 2 else None
            report = ad.gradcheck(build, inputs, eps=eps, tol=tol, n_coords=n_coords, rng=rng, wrt=wrt)
            res.configs += 1
            res.failures += int(not report.passed)
            res.max_rel_err = max(res.max_rel_err, max(report.max_rel_err.values(), default=0.0))
            res.coords += sum(report.checked.values())
            res.kinks += sum(report.skipped_kinks.values())
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results
