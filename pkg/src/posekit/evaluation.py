"""OKS average precision, crowd buckets, refinement gain and the NMS upper-bound sweep."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import Pose, Scene
from .model import Model, decode, forward
from .nms import Detection, Similarity, greedy_nms_indices
from .oks import OksParams, oks

log = logging.getLogger(__name__)

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# k / 100 is correctly rounded, so an exact rational recall like 7/10 compares equal to its sample
RECALL_SAMPLES = np.arange(101) / 100.0
DEFAULT_CUTS = (0.1, 0.3)
BUCKETS = ("easy", "medium", "hard")


def thread_count() -> int:
    try:
        return max(0, int(os.environ.get("POSEKIT_THREADS", "0")))
    except ValueError:
        return 0


def ordered_map(fn: Callable, items: Sequence) -> list:
    """Map in input order, on a thread pool when POSEKIT_THREADS > 0."""
    n = thread_count()
    if n <= 0 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def match_scene(dets: Sequence[Detection], gts: Sequence[Pose], threshold: float,
                params: OksParams) -> list[tuple[float, bool]]:
    """Greedy COCO matching in descending score order; returns (score, is_tp) per detection."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched = [False] * len(gts)
    out = []
    for i in order:
        best, best_j = threshold, -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            s = oks(dets[i].pose, gt, params)
            if s >= best and (best_j < 0 or s > best):
                best, best_j = s, j
        if best_j >= 0:
            matched[best_j] = True
        out.append((dets[i].score, best_j >= 0))
    return out


def ap_from_matches(matches: Sequence[tuple[float, bool]], n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if not matches:
        return 0.0
    scores = np.array([m[0] for m in matches])
    tps = np.array([m[1] for m in matches], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(1.0 - tps[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_SAMPLES, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(q))


def oks_ap(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Pose]], threshold: float,
           params: OksParams) -> float:
    """COCO-style AP at one OKS threshold over scenes, 101-point interpolated."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth cover different scene counts")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        log.warning("no ground-truth poses; AP defined as 0")
        return 0.0
    matches = []
    for scene_dets, scene_gts in zip(dets, gts):
        matches.extend(match_scene(scene_dets, scene_gts, threshold, params))
    return ap_from_matches(matches, n_gt)


@dataclass
class EvalResult:
    ap_per_threshold: dict[float, float]
    buckets: dict[str, Optional[float]] = field(default_factory=dict)
    bucket_sizes: dict[str, int] = field(default_factory=dict)

    @property
    def mAP(self) -> float:
        return float(sum(self.ap_per_threshold.values()) / len(self.ap_per_threshold))

    @property
    def ap50(self) -> float:
        return self.ap_per_threshold[0.5]

    @property
    def ap75(self) -> float:
        return self.ap_per_threshold[0.75]

    def rows(self) -> list[tuple[str, str]]:
        rows = [("mAP", self.mAP), ("AP50", self.ap50), ("AP75", self.ap75)]
        rows += [(f"AP@{t:.2f}", v) for t, v in self.ap_per_threshold.items()]
        for b in BUCKETS:
            rows.append((f"AP_{b}", self.buckets.get(b)))
            rows.append((f"scenes_{b}", self.bucket_sizes.get(b, 0)))
        return [(k, "" if v is None else repr(v)) for k, v in rows]

    def to_json(self) -> dict:
        return {
            "mAP": self.mAP,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
            "buckets": self.buckets,
            "bucket_sizes": self.bucket_sizes,
        }


def bucket_of(crowd: float, cuts: Sequence[float] = DEFAULT_CUTS) -> str:
    if crowd < cuts[0]:
        return "easy"
    if crowd < cuts[1]:
        return "medium"
    return "hard"


def mean_ap(dets, gts, params: OksParams) -> dict[float, float]:
    return {t: oks_ap(dets, gts, t, params) for t in OKS_THRESHOLDS}


def summarize(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Pose]], params: OksParams,
              crowd: Optional[Sequence[float]] = None, cuts: Sequence[float] = DEFAULT_CUTS) -> EvalResult:
    cuts = tuple(cuts)
    if len(cuts) != 2 or not 0.0 <= cuts[0] <= cuts[1] <= 1.0:
        raise ValueError(f"bucket cut points must be ascending in [0, 1], got {cuts}")
    result = EvalResult(mean_ap(dets, gts, params))
    if crowd is None:
        return result
    groups: dict[str, list[int]] = {b: [] for b in BUCKETS}
    for i, c in enumerate(crowd):
        groups[bucket_of(c, cuts)].append(i)
    for b, idx in groups.items():
        result.bucket_sizes[b] = len(idx)
        if not idx:
            result.buckets[b] = None
            continue
        aps = mean_ap([dets[i] for i in idx], [gts[i] for i in idx], params)
        result.buckets[b] = float(sum(aps.values()) / len(aps))
    return result


def write_eval(result: EvalResult, out_dir) -> tuple[Path, Path]:
    """Write ``eval.csv`` (columns: metric, value) and ``eval.json``."""
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / "eval.csv", out_dir / "eval.json"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(result.rows())
    json_path.write_text(json.dumps(result.to_json(), indent=2, sort_keys=True))
    return csv_path, json_path


# ---------------------------------------------------------------- refinement gain

def best_oks_per_gt(dets: Sequence[Detection], gts: Sequence[Pose], params: OksParams) -> list[float]:
    return [max((oks(d.pose, g, params) for d in dets), default=0.0) for g in gts]


def predict(model: Model, scenes: Sequence[Scene], use_refine: bool = True,
            params: Optional[OksParams] = None) -> list[list[Detection]]:
    def run(scene):
        return decode(forward(model, scene.image), model.cfg, use_refine=use_refine, params=params)
    return ordered_map(run, scenes)


def mean_best_oks(model: Model, scenes: Sequence[Scene], params: OksParams, use_refine: bool = True) -> float:
    dets = predict(model, scenes, use_refine, params)
    vals = [v for d, s in zip(dets, scenes) for v in best_oks_per_gt(d, s.gt_poses, params)]
    return float(np.mean(vals)) if vals else 0.0


def refinement_gain(model: Model, scenes: Sequence[Scene], params: OksParams) -> tuple[float, float]:
    """Mean best-OKS per GT with refinement zeroed and with the full decode."""
    def run(scene):
        pred = forward(model, scene.image)
        coarse = decode(pred, model.cfg, use_refine=False, params=params)
        refined = decode(pred, model.cfg, use_refine=True, params=params)
        return best_oks_per_gt(coarse, scene.gt_poses, params), best_oks_per_gt(refined, scene.gt_poses, params)

    per_scene = ordered_map(run, scenes)
    coarse = [v for c, _ in per_scene for v in c]
    refined = [v for _, r in per_scene for v in r]
    if not coarse:
        return 0.0, 0.0
    return float(np.mean(coarse)), float(np.mean(refined))


# ---------------------------------------------------------------- NMS upper bound

@dataclass(frozen=True)
class BoundRow:
    nms_kind: str
    threshold: float
    recall: float
    ap_hard: Optional[float]


@dataclass
class NmsBoundTable:
    rows: list[BoundRow]

    COLUMNS = ("nms_kind", "threshold", "recall", "ap_hard")

    def for_kind(self, kind: str) -> list[BoundRow]:
        return [r for r in self.rows if r.nms_kind == kind]

    def max_recall(self, kind: str) -> float:
        return max(r.recall for r in self.for_kind(kind))

    def at(self, kind: str, threshold: float) -> BoundRow:
        for r in self.for_kind(kind):
            if abs(r.threshold - threshold) < 1e-12:
                return r
        raise KeyError((kind, threshold))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.nms_kind, repr(r.threshold), repr(r.recall), "" if r.ap_hard is None else repr(r.ap_hard)])

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def gt_detections(scene: Scene, policy: str = "uniform", rng: Optional[np.random.Generator] = None) -> list[Detection]:
    if policy == "uniform":
        scores = [1.0] * len(scene.gt_poses)
    elif policy == "random":
        rng = np.random.default_rng(0) if rng is None else rng
        scores = rng.uniform(0.0, 1.0, size=len(scene.gt_poses)).tolist()
    else:
        raise ValueError(f"unknown score policy {policy!r}")
    return [Detection(p.with_score(s), s) for p, s in zip(scene.gt_poses, scores)]


def nms_upper_bound(scenes: Sequence[Scene], thresholds: Sequence[float], score_policy: str = "uniform",
                    params: Optional[OksParams] = None, cuts: Sequence[float] = DEFAULT_CUTS,
                    seed: int = 0, max_keep: int = 100) -> NmsBoundTable:
    """Feed ground-truth poses through both NMS kinds at each threshold."""
    thresholds = sorted(float(t) for t in thresholds)
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    if params is None:
        K = len(scenes[0].gt_poses[0]) if scenes and scenes[0].gt_poses else 1
        params = OksParams.for_k(K)
    rng = np.random.default_rng(seed)
    dets = [gt_detections(s, score_policy, rng) for s in scenes]
    total = sum(len(d) for d in dets)
    hard = [i for i, s in enumerate(scenes) if bucket_of(s.crowd_index, cuts) == "hard"]
    rows = []
    for kind in (Similarity.OKS, Similarity.IOU):
        for t in thresholds:
            kept_idx = ordered_map(lambda d: greedy_nms_indices(d, kind, t, max_keep, params), dets)
            kept = [[d[i] for i in idx] for d, idx in zip(dets, kept_idx)]
            recall = sum(len(k) for k in kept) / total if total else 0.0
            ap_hard = None
            if hard:
                ap_hard = oks_ap([kept[i] for i in hard], [scenes[i].gt_poses for i in hard], 0.5, params)
            rows.append(BoundRow(kind.value, t, recall, ap_hard))
    return NmsBoundTable(rows)
