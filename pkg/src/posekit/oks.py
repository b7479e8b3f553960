"""Object Keypoint Similarity."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import Pose, PoseError, default_sigmas


@dataclass(frozen=True)
class OksParams:
    sigmas: tuple[float, ...]
    scale_floor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("OKS sigmas must be positive")
        if self.scale_floor <= 0:
            raise ValueError("scale_floor must be positive")

    @classmethod
    def for_k(cls, K: int, scale_floor: float = 1.0) -> "OksParams":
        return cls(default_sigmas(K), scale_floor)

    @property
    def K(self) -> int:
        return len(self.sigmas)


def object_scale(ref: np.ndarray, visible: np.ndarray, scale_floor: float) -> float:
    pts = ref[visible]
    span = pts.max(axis=0) - pts.min(axis=0)
    return max(scale_floor, float(np.sqrt(span[0] * span[1])))


def oks(pred: Pose, ref: Pose, params: OksParams) -> float:
    """COCO OKS of ``pred`` against ``ref``; ``ref`` supplies visibility and scale."""
    vis = ref.visible
    if not vis.any():
        raise PoseError("reference pose has no visible keypoints")
    if len(pred) != len(ref) or len(ref) != params.K:
        raise PoseError(f"pose sizes {len(pred)}/{len(ref)} do not match K={params.K}")
    s = object_scale(ref.xy, vis, params.scale_floor)
    k = np.asarray(params.sigmas)[vis]
    d2 = np.sum((pred.xy[vis] - ref.xy[vis]) ** 2, axis=1)
    return float(np.mean(np.exp(-d2 / (2.0 * s * s * k * k))))


def oks_symmetric(a: Pose, b: Pose, params: OksParams) -> float:
    """OKS between two predictions, using the higher-scored one as reference."""
    sa = -np.inf if a.score is None else a.score
    sb = -np.inf if b.score is None else b.score
    if sb > sa:
        return oks(a, b, params)
    return oks(b, a, params)


def oks_matrix(preds: np.ndarray, refs: Sequence[Pose], params: OksParams) -> np.ndarray:
    """OKS of every predicted (M, K, 2) keypoint set against every reference pose.

    Returns an (M, G) array; same formula as :func:`oks`, vectorized over
    candidates for target labeling.
    """
    preds = np.asarray(preds, dtype=np.float64)
    out = np.zeros((len(preds), len(refs)))
    sig2 = np.asarray(params.sigmas) ** 2
    for j, ref in enumerate(refs):
        vis = ref.visible
        if not vis.any():
            raise PoseError(f"reference pose {j} has no visible keypoints")
        s = object_scale(ref.xy, vis, params.scale_floor)
        d2 = np.sum((preds[:, vis, :] - ref.xy[vis][None]) ** 2, axis=2)
        out[:, j] = np.mean(np.exp(-d2 / (2.0 * s * s * sig2[vis][None])), axis=1)
    return out
