"""Greedy non-maximum suppression over pose detections."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .domain import BBox, Pose, keypoint_bbox
from .oks import OksParams, oks_symmetric

DEFAULT_THRESHOLDS = {"oks": 0.3, "iou": 0.5}
DEFAULT_MAX_KEEP = 100


class Similarity(str, Enum):
    OKS = "oks"
    IOU = "iou"


@dataclass(frozen=True)
class Detection:
    pose: Pose
    score: float
    level: int = 0

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.pose.score != self.score:
            object.__setattr__(self, "pose", self.pose.with_score(self.score))


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def pairwise_similarity(a: Detection, b: Detection, similarity: Similarity, params: OksParams | None) -> float:
    if Similarity(similarity) is Similarity.IOU:
        return box_iou(keypoint_bbox(a.pose), keypoint_bbox(b.pose))
    if params is None:
        params = OksParams.for_k(len(a.pose))
    return oks_symmetric(a.pose, b.pose, params)


def greedy_nms(dets: Sequence[Detection], similarity: Similarity | str = Similarity.OKS,
               threshold: float | None = None, max_keep: int = DEFAULT_MAX_KEEP,
               params: OksParams | None = None) -> list[Detection]:
    return [dets[i] for i in greedy_nms_indices(dets, similarity, threshold, max_keep, params)]


def greedy_nms_indices(dets: Sequence[Detection], similarity: Similarity | str = Similarity.OKS,
                       threshold: float | None = None, max_keep: int = DEFAULT_MAX_KEEP,
                       params: OksParams | None = None) -> list[int]:
    similarity = Similarity(similarity)
    if threshold is None:
        threshold = DEFAULT_THRESHOLDS[similarity.value]
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = list(np.argsort(-scores, kind="stable"))
    if similarity is Similarity.IOU:
        boxes = np.array([keypoint_bbox(d.pose).as_tuple() for d in dets])
    keep: list[int] = []
    while order and len(keep) < max_keep:
        top = order.pop(0)
        keep.append(int(top))
        if not order:
            break
        rest = np.array(order)
        if similarity is Similarity.IOU:
            sims = _iou_one_to_many(boxes[top], boxes[rest])
        else:
            p = params if params is not None else OksParams.for_k(len(dets[top].pose))
            sims = np.array([oks_symmetric(dets[top].pose, dets[j].pose, p) for j in rest])
        order = [int(j) for j, s in zip(rest, sims) if s <= threshold]
    return keep


def _iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_naive_oracle(dets: Sequence[Detection], similarity: Similarity | str, threshold: float,
                     max_keep: int = DEFAULT_MAX_KEEP, params: OksParams | None = None) -> list[int]:
    """Reference O(n^2) suppression used by tests; returns kept indices.

    A detection survives iff no earlier-ranked survivor is more similar to
    it than ``threshold``. Ranking is by descending score, then input index.
    """
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    alive = [True] * len(dets)
    kept = []
    for pos, i in enumerate(ranked):
        if not alive[i]:
            continue
        if len(kept) == max_keep:
            break
        kept.append(i)
        for j in ranked[pos + 1:]:
            if alive[j] and pairwise_similarity(dets[i], dets[j], similarity, params) > threshold:
                alive[j] = False
    return kept
