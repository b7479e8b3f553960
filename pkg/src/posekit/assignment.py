"""Training-target assignment for the bypass, regression and classification heads."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .domain import Pose, PoseError, keypoint_bbox
from .oks import OksParams, oks_matrix

log = logging.getLogger(__name__)

POSITIVE_OKS = 0.6
NEGATIVE_OKS = 0.5
REGRESSION_OKS = 0.7


class CentroidMode(str, Enum):
    KEYPOINTS = "keypoints"
    BBOX = "bbox"


@dataclass(frozen=True)
class LevelConfig:
    strides: tuple[int, ...] = (4, 8, 16)
    base_scale: float = 32.0

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.strides:
            raise ValueError("at least one level is required")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if self.base_scale <= 0:
            raise ValueError("base_scale must be positive")

    @property
    def level_count(self) -> int:
        return len(self.strides)

    def grids(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(height // s, width // s) for s in self.strides]


@dataclass(frozen=True)
class CoarseTarget:
    level: int
    cell: tuple[int, int]
    gt_index: int
    target_offsets: np.ndarray
    mask: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class CandidateLabel:
    kind: str  # "positive" | "negative" | "ignore"
    gt_index: int = -1
    regression_active: bool = False
    best_oks: float = 0.0

    def __post_init__(self):
        if self.regression_active and self.kind != "positive":
            raise ValueError("regression_active requires a positive label")


def pose_centroid(pose: Pose, mode: CentroidMode | str = CentroidMode.KEYPOINTS) -> tuple[float, float]:
    vis = pose.visible
    if not vis.any():
        raise PoseError("no visible keypoints")
    if CentroidMode(mode) is CentroidMode.KEYPOINTS:
        cx, cy = pose.xy[vis].mean(axis=0)
        return float(cx), float(cy)
    box = keypoint_bbox(pose)
    return (box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0


def assign_fpn_level(pose: Pose, cfg: LevelConfig) -> int:
    side = math.sqrt(keypoint_bbox(pose).area)
    level = math.floor(math.log2(max(1.0, side) / cfg.base_scale))
    return min(max(level, 0), cfg.level_count - 1)


def nearest_cell(x: float, y: float, stride: int, grid: tuple[int, int]) -> tuple[int, int]:
    """Cell whose centre ((c + 0.5) * stride, (r + 0.5) * stride) is nearest (x, y).

    Ties resolve to the smaller row, then the smaller column.
    """
    h, w = grid
    rows = (np.arange(h) + 0.5) * stride
    cols = (np.arange(w) + 0.5) * stride
    d2 = (rows[:, None] - y) ** 2 + (cols[None, :] - x) ** 2
    flat = int(np.argmin(d2))  # first minimum in row-major order
    return flat // w, flat % w


def cell_center(cell: tuple[int, int], stride: int) -> tuple[float, float]:
    r, c = cell
    return (c + 0.5) * stride, (r + 0.5) * stride


def assign_coarse_targets(gt: Sequence[Pose], cfg: LevelConfig, grids: Sequence[tuple[int, int]],
                          mode: CentroidMode | str = CentroidMode.KEYPOINTS) -> list[CoarseTarget]:
    if len(grids) != cfg.level_count:
        raise ValueError(f"expected {cfg.level_count} grids, got {len(grids)}")
    taken: dict[tuple[int, tuple[int, int]], int] = {}
    targets: list[CoarseTarget] = []
    for j, pose in enumerate(gt):
        if not pose.visible.any():
            continue
        level = assign_fpn_level(pose, cfg)
        stride = cfg.strides[level]
        cx, cy = pose_centroid(pose, mode)
        cell = nearest_cell(cx, cy, stride, grids[level])
        ccx, ccy = cell_center(cell, stride)
        offsets = np.empty(2 * len(pose))
        offsets[0::2] = (pose.xy[:, 0] - ccx) / stride
        offsets[1::2] = (pose.xy[:, 1] - ccy) / stride
        mask = np.repeat(pose.visible.astype(np.float64), 2)
        offsets = np.where(mask > 0, offsets, 0.0)
        key = (level, cell)
        if key in taken:
            log.warning("gt %d collides with gt %d on level %d cell %s; keeping gt %d",
                        j, taken[key], level, cell, j)
            targets = [t for t in targets if (t.level, t.cell) != key]
        taken[key] = j
        targets.append(CoarseTarget(level, cell, j, offsets, mask))
    return targets


def label_matrix(best: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classification targets (1 / 0 / -1 = ignore) and regression flags from best OKS."""
    cls = np.where(best > POSITIVE_OKS, 1.0, np.where(best < NEGATIVE_OKS, 0.0, -1.0))
    return cls, best > REGRESSION_OKS


def best_match(candidates: np.ndarray, gt: Sequence[Pose], params: OksParams) -> tuple[np.ndarray, np.ndarray]:
    """Best OKS and argmax GT index (ties: lower index) per candidate."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if not len(gt):
        return np.zeros(len(candidates)), np.full(len(candidates), -1)
    mat = oks_matrix(candidates, gt, params)
    idx = np.argmax(mat, axis=1)
    return mat[np.arange(len(mat)), idx], idx


def label_candidates(coarse_decoded: Sequence[Pose] | np.ndarray, gt: Sequence[Pose],
                     params: OksParams) -> list[CandidateLabel]:
    if isinstance(coarse_decoded, np.ndarray):
        xy = coarse_decoded[..., :2]
    else:
        xy = np.array([p.xy for p in coarse_decoded]).reshape(len(coarse_decoded), params.K, 2)
    best, idx = best_match(xy, gt, params)
    cls, reg = label_matrix(best)
    labels = []
    for b, j, c, r in zip(best, idx, cls, reg):
        if c == 1.0:
            labels.append(CandidateLabel("positive", int(j), bool(r), float(b)))
        elif c == 0.0:
            labels.append(CandidateLabel("negative", -1, False, float(b)))
        else:
            labels.append(CandidateLabel("ignore", -1, False, float(b)))
    return labels
