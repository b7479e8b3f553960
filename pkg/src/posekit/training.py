"""Synthetic crowd scenes, Adam, and the toy training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .assignment import CentroidMode, LevelConfig, assign_coarse_targets, best_match, label_matrix
from .domain import Pose, Scene, SkeletonSpec, coco_skeleton, keypoint_bbox, stick_figure_skeleton
from .model import DensePrediction, Model, cell_centers, forward
from .nms import box_iou
from .oks import OksParams
from .supervision import LossReport, gaussian_target_maps, total_loss

log = logging.getLogger(__name__)

PALETTE = (
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 1.0, 0.0),
    (0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 0.5, 0.0), (0.5, 0.0, 1.0),
)
LIMB_INTENSITY = 0.25
OVERLAP_TOLERANCE = 0.05
MAX_RESAMPLES = 1000


class DatasetError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, report: LossReport):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {report}")
        self.epoch = epoch
        self.batch = batch
        self.report = report


def skeleton_for(K: int) -> SkeletonSpec:
    if K == 5:
        return stick_figure_skeleton()
    if K == 17:
        return coco_skeleton()
    return SkeletonSpec.create(K)


@dataclass(frozen=True)
class SynthConfig:
    K: int = 5
    image_size: tuple[int, int] = (64, 64)
    persons: tuple[int, int] = (1, 3)
    scale: tuple[float, float] = (20.0, 36.0)
    rotation: tuple[float, float] = (-0.4, 0.4)
    overlap_target: float = 0.0
    count: int = 16
    seed: int = 0
    channels: int = 3
    blob_sigma: float = 1.5
    margin: float = 1.0

    def __post_init__(self):
        for name in ("image_size", "persons", "scale", "rotation"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.persons[0] < 1 or self.persons[1] < self.persons[0]:
            raise ValueError(f"invalid persons range {self.persons}")
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0]:
            raise ValueError(f"invalid scale range {self.scale}")
        if self.rotation[1] < self.rotation[0]:
            raise ValueError(f"invalid rotation range {self.rotation}")
        if not 0.0 <= self.overlap_target < 1.0:
            raise ValueError("overlap_target must lie in [0, 1)")
        if self.count < 0 or self.channels < 1 or self.blob_sigma <= 0:
            raise ValueError("count, channels and blob_sigma must be positive")
        h, w = self.image_size
        if self.scale[1] + 2 * self.margin >= min(h, w):
            raise ValueError("largest person does not fit in the image")


def crowd_index(poses: Sequence[Pose]) -> float:
    """Mean pairwise IoU of keypoint boxes; 0 for fewer than two poses."""
    boxes = [keypoint_bbox(p) for p in poses]
    pairs = list(combinations(boxes, 2))
    if not pairs:
        return 0.0
    return float(np.mean([box_iou(a, b) for a, b in pairs]))


def _shape(template: np.ndarray, size: float, angle: float) -> np.ndarray:
    """Template scaled to ``size`` pixels and rotated, centred on its box centre."""
    pts = (template - 0.5) * size
    c, s = math.cos(angle), math.sin(angle)
    rotated = pts @ np.array([[c, s], [-s, c]])
    lo, hi = rotated.min(axis=0), rotated.max(axis=0)
    return rotated - (lo + hi) / 2.0


def _random_center(rng, shape, w, h, margin):
    lo = margin - shape.min(axis=0)
    hi = np.array([w, h]) - margin - shape.max(axis=0)
    return rng.uniform(lo, hi)


def _place_crowd(rng, shapes, cfg: SynthConfig) -> Optional[list[np.ndarray]]:
    """Spread shapes around a common centre until mean pairwise box IoU matches the target."""
    h, w = cfg.image_size
    n = len(shapes)
    dirs = rng.normal(size=(n, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs *= rng.uniform(0.5, 1.0, size=(n, 1))

    def iou_at(spread):
        poses = [Pose.from_xy(sh + spread * d) for sh, d in zip(shapes, dirs)]
        return crowd_index(poses)

    lo, hi = 0.0, float(max(w, h))
    if iou_at(lo) < cfg.overlap_target:
        return None
    for _ in range(40):
        mid = (lo + hi) / 2.0
        if iou_at(mid) >= cfg.overlap_target:
            lo = mid
        else:
            hi = mid
    spread = lo
    if abs(iou_at(spread) - cfg.overlap_target) > OVERLAP_TOLERANCE:
        return None
    placed = [sh + spread * d for sh, d in zip(shapes, dirs)]
    allpts = np.concatenate(placed)
    lo_c = cfg.margin - allpts.min(axis=0)
    hi_c = np.array([w, h]) - cfg.margin - allpts.max(axis=0)
    if np.any(hi_c < lo_c):
        return None
    shift = rng.uniform(lo_c, hi_c)
    return [p + shift for p in placed]


def render(poses: Sequence[Pose], skeleton: SkeletonSpec, cfg: SynthConfig) -> np.ndarray:
    """Joint blobs with per-joint colours plus faint limbs; pixel j has centre j + 0.5."""
    h, w = cfg.image_size
    img = np.zeros((cfg.channels, h, w))
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    s2 = 2.0 * cfg.blob_sigma ** 2
    for pose in poses:
        xy = pose.xy
        for a, b in skeleton.edges:
            pa, pb = xy[a], xy[b]
            seg = pb - pa
            length2 = float(seg @ seg) or 1.0
            t = np.clip(((xs - pa[0]) * seg[0] + (ys - pa[1]) * seg[1]) / length2, 0.0, 1.0)
            d2 = (xs - pa[0] - t * seg[0]) ** 2 + (ys - pa[1] - t * seg[1]) ** 2
            line = LIMB_INTENSITY * np.exp(-d2 / (0.5 * s2))
            np.maximum(img, line[None], out=img)
        for i in np.flatnonzero(pose.visible):
            color = np.asarray(PALETTE[i % len(PALETTE)][: cfg.channels], dtype=np.float64)
            if len(color) < cfg.channels:
                color = np.resize(color, cfg.channels)
            color = color * (1.0 - 0.5 * (i // len(PALETTE)) / max(1, skeleton.K // len(PALETTE) + 1))
            blob = np.exp(-((xs - xy[i, 0]) ** 2 + (ys - xy[i, 1]) ** 2) / s2)
            np.maximum(img, color[:, None, None] * blob[None], out=img)
    # Round through float32 so the raw-array scene format is lossless.
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def synth_dataset(cfg: SynthConfig, skeleton: Optional[SkeletonSpec] = None) -> list[Scene]:
    skeleton = skeleton_for(cfg.K) if skeleton is None else skeleton
    if skeleton.K != cfg.K:
        raise ValueError(f"skeleton has K={skeleton.K}, config says K={cfg.K}")
    template = np.asarray(skeleton.template, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    scenes = []
    for idx in range(cfg.count):
        n = int(rng.integers(cfg.persons[0], cfg.persons[1] + 1))
        for _attempt in range(MAX_RESAMPLES):
            shapes = [
                _shape(template, rng.uniform(*cfg.scale), rng.uniform(*cfg.rotation))
                for _ in range(n)
            ]
            if cfg.overlap_target > 0 and n > 1:
                placed = _place_crowd(rng, shapes, cfg)
                if placed is None:
                    continue
            else:
                placed = [sh + _random_center(rng, sh, w, h, cfg.margin) for sh in shapes]
            poses = [Pose.from_xy(p) for p in placed]
            ci = crowd_index(poses)
            if cfg.overlap_target > 0 and n > 1 and abs(ci - cfg.overlap_target) > OVERLAP_TOLERANCE:
                continue
            break
        else:
            raise DatasetError(f"scene {idx}: overlap target {cfg.overlap_target} unsatisfiable "
                               f"after {MAX_RESAMPLES} resamples")
        image = render(poses, skeleton, cfg)
        scenes.append(Scene(image, tuple(poses), min(1.0, ci), meta={"index": idx}))
    return scenes


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new weight arrays and the advanced state."""
    t = state.t + 1
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads.get(name)
        g = np.zeros_like(w) if g is None else g
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, weight has {w.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_w[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_w, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- training loop

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    offset_grad: bool = True
    centroid_mode: str = "keypoints"
    intermediate_supervision: bool = True
    heatmap_sigma: float = 2.0
    sigma_in_cells: bool = True
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    base_scale: float = 32.0
    flip: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "loss_weights", tuple(self.loss_weights))
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        CentroidMode(self.centroid_mode)


@dataclass
class SceneTargets:
    coarse: list[np.ndarray]
    coarse_mask: list[np.ndarray]
    heatmaps: list[np.ndarray]


@dataclass
class TrainResult:
    model: Model
    history: list[LossReport]
    steps: list[LossReport]

    @property
    def initial_total(self) -> float:
        return self.steps[0].total

    @property
    def final_total(self) -> float:
        return self.history[-1].total


def flip_pairs(skeleton: SkeletonSpec) -> list[int]:
    """Joint permutation for a horizontal flip, pairing left_* with right_* names."""
    perm = list(range(skeleton.K))
    names = list(skeleton.joint_names)
    for i, name in enumerate(names):
        if name.startswith("left_") and "right_" + name[5:] in names:
            j = names.index("right_" + name[5:])
            perm[i], perm[j] = j, i
    return perm


def flip_scene(scene: Scene, perm: Sequence[int]) -> Scene:
    W = scene.image.shape[2]
    poses = []
    for p in scene.gt_poses:
        arr = p.array[list(perm)].copy()
        arr[:, 0] = W - arr[:, 0]
        arr[:, 0] = np.minimum(arr[:, 0], np.nextafter(W, 0))
        poses.append(Pose(arr, p.score))
    return Scene(scene.image[:, :, ::-1].copy(), tuple(poses), scene.crowd_index, dict(scene.meta))


def scene_targets(scene: Scene, model: Model, tcfg: TrainConfig) -> SceneTargets:
    cfg = model.cfg
    _, h, w = scene.image.shape
    levels = LevelConfig(cfg.strides, tcfg.base_scale)
    grids = levels.grids(h, w)
    coarse = [np.zeros((2 * cfg.K, gh, gw)) for gh, gw in grids]
    masks = [np.zeros((2 * cfg.K, gh, gw)) for gh, gw in grids]
    for t in assign_coarse_targets(scene.gt_poses, levels, grids, tcfg.centroid_mode):
        r, c = t.cell
        coarse[t.level][:, r, c] = t.target_offsets
        masks[t.level][:, r, c] = t.mask
    maps = gaussian_target_maps(scene.gt_poses, grids, cfg.strides, cfg.K,
                                tcfg.heatmap_sigma, tcfg.sigma_in_cells)
    return SceneTargets(coarse, masks, maps)


def candidate_targets(pred: DensePrediction, index: int, gt: Sequence[Pose], params: OksParams):
    """Classification labels and residual refinement targets for one image, per level."""
    labels, refine_t, refine_m = [], [], []
    coarse_all, centers_all, spans = [], [], []
    for level in pred.levels:
        gh, gw = level.grid
        centers = cell_centers((gh, gw), level.stride)
        offsets = level.coarse.values[index]
        k = offsets.shape[0] // 2
        disp = offsets.reshape(k, 2, gh * gw).transpose(2, 0, 1)
        coarse_all.append(centers[:, None, :] + level.stride * disp)
        centers_all.append(centers)
        spans.append((gh, gw, level.stride, disp))
    joints = np.concatenate(coarse_all)
    best, argbest = best_match(joints, gt, params)
    cls, reg = label_matrix(best)
    start = 0
    for lvl, (gh, gw, stride, disp) in enumerate(spans):
        m = gh * gw
        sl = slice(start, start + m)
        start += m
        labels.append(cls[sl].reshape(1, gh, gw))
        k = disp.shape[1]
        tgt = np.zeros((m, k, 2))
        msk = np.zeros((m, k, 2))
        active = np.flatnonzero(reg[sl])
        if len(active):
            centers = centers_all[lvl]
            gt_xy = np.stack([gt[j].xy for j in argbest[sl][active]])
            vis = np.stack([gt[j].visible for j in argbest[sl][active]]).astype(np.float64)
            residual = (gt_xy - centers[active][:, None, :]) / stride - disp[active]
            tgt[active] = residual * vis[:, :, None]
            msk[active] = vis[:, :, None]
        refine_t.append(tgt.transpose(1, 2, 0).reshape(2 * k, gh, gw))
        refine_m.append(msk.transpose(1, 2, 0).reshape(2 * k, gh, gw))
    return labels, refine_t, refine_m


def batch_loss(model: Model, scenes: Sequence[Scene], targets: Sequence[SceneTargets], tcfg: TrainConfig,
               params: OksParams, weights=None):
    """Forward a batch and build the weighted loss; returns (loss tensor, report)."""
    images = np.stack([s.image for s in scenes])
    pred = forward(model, images, heatmaps=tcfg.intermediate_supervision, weights=weights,
                   offset_grad=tcfg.offset_grad)
    return loss_from_prediction(pred, scenes, targets, tcfg, params)


def loss_from_prediction(pred: DensePrediction, scenes, targets, tcfg: TrainConfig, params: OksParams,
                         frozen_labels=None):
    n_levels = len(pred.levels)
    per_image = frozen_labels
    if per_image is None:
        per_image = [candidate_targets(pred, i, s.gt_poses, params) for i, s in enumerate(scenes)]

    coarse_p, coarse_t, coarse_m = [], [], []
    refine_p, refine_t, refine_m = [], [], []
    logit_p, label_t = [], []
    hm_p, hm_t = [], []
    for lvl in range(n_levels):
        level = pred.levels[lvl]
        coarse_p.append(level.coarse)
        coarse_t.append(np.stack([t.coarse[lvl] for t in targets]))
        coarse_m.append(np.stack([t.coarse_mask[lvl] for t in targets]))
        refine_p.append(level.refine)
        refine_t.append(np.stack([pi[1][lvl] for pi in per_image]))
        refine_m.append(np.stack([pi[2][lvl] for pi in per_image]))
        logit_p.append(level.logits)
        label_t.append(np.stack([pi[0][lvl] for pi in per_image]))
        if level.heatmaps is not None:
            hm_p.append(level.heatmaps)
            hm_t.append(np.stack([t.heatmaps[lvl] for t in targets]))

    def flat(arrays):
        return np.concatenate([a.ravel() for a in arrays])

    heat = (ad.concat(hm_p), flat(hm_t)) if hm_p else None
    loss, report = total_loss(
        (ad.concat(coarse_p), flat(coarse_t), flat(coarse_m)),
        (ad.concat(refine_p), flat(refine_t), flat(refine_m)),
        (ad.concat(logit_p), flat(label_t)),
        heat,
        weights=tcfg.loss_weights,
        alpha=tcfg.focal_alpha,
        gamma=tcfg.focal_gamma,
    )
    return loss, report, per_image


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    rows = np.array([r.as_row() for r in reports])
    return LossReport(*(float(x) for x in rows.mean(axis=0)), weights=reports[0].weights)


def train(model: Model, data: Sequence[Scene], tcfg: TrainConfig, params: Optional[OksParams] = None,
          progress: bool = False) -> TrainResult:
    if not data:
        raise ValueError("training data is empty")
    params = OksParams.for_k(model.cfg.K) if params is None else params
    model = model.copy()
    rng = np.random.default_rng(tcfg.seed)
    scenes = list(data)
    perm = flip_pairs(skeleton_for(model.cfg.K)) if tcfg.flip else None
    cache = [scene_targets(s, model, tcfg) for s in scenes]
    flipped_cache: dict[int, tuple[Scene, SceneTargets]] = {}
    state = AdamState()
    history: list[LossReport] = []
    steps: list[LossReport] = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(scenes))
        epoch_reports = []
        for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            batch, targets = [], []
            for i in idx:
                if perm is not None and rng.random() < 0.5:
                    if i not in flipped_cache:
                        fs = flip_scene(scenes[i], perm)
                        flipped_cache[i] = (fs, scene_targets(fs, model, tcfg))
                    batch.append(flipped_cache[i][0])
                    targets.append(flipped_cache[i][1])
                else:
                    batch.append(scenes[i])
                    targets.append(cache[i])
            for t in model.params.values():
                t.zero_grad()
            loss, report, _ = batch_loss(model, batch, targets, tcfg, params)
            if not np.isfinite(report.total):
                raise TrainingDiverged(epoch, b, report)
            ad.backward(loss)
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            new_w, state = adam_step(model.arrays(), grads, state, tcfg.lr, *tcfg.betas, tcfg.eps)
            for k, t in model.params.items():
                t.values = new_w[k]
            steps.append(report)
            epoch_reports.append(report)
        history.append(_mean_report(epoch_reports))
        if progress:
            log.info("epoch %d: %s", epoch, history[-1])
    return TrainResult(model, history, steps)
