"""Loss terms and Gaussian heatmap targets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .domain import Pose

DEFAULT_SIGMA = 2.0
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


def gaussian_target_maps(gt: Sequence[Pose], grids: Sequence[tuple[int, int]], strides: Sequence[int],
                         K: int, sigma: float = DEFAULT_SIGMA, sigma_in_cells: bool = True) -> list[np.ndarray]:
    """One K x H_l x W_l target per level; instances combine by max.

    With ``sigma_in_cells`` the standard deviation is ``sigma`` feature cells
    at every level, otherwise ``sigma`` pixels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    maps = []
    for (h, w), stride in zip(grids, strides):
        out = np.zeros((K, h, w))
        cy = (np.arange(h) + 0.5) * stride
        cx = (np.arange(w) + 0.5) * stride
        unit = stride if sigma_in_cells else 1.0
        for pose in gt:
            for i in np.flatnonzero(pose.visible):
                gx, gy = pose.xy[i]
                d2 = ((cy[:, None] - gy) ** 2 + (cx[None, :] - gx) ** 2) / (unit * unit)
                np.maximum(out[i], np.exp(-d2 / (2.0 * sigma * sigma)), out=out[i])
        maps.append(out)
    return maps


def l2_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Masked mean squared error: sum(mask * (pred - target)^2) / max(1, sum(mask))."""
    target = np.asarray(target.values if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"l2_loss shape mismatch {pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones_like(target)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != pred.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {pred.shape}")
    norm = max(1.0, float(mask.sum()))
    diff = pred.values - target
    value = float(np.sum(mask * diff * diff)) / norm
    return ad._op(np.float64(value), (pred,), lambda g: (g * 2.0 * mask * diff / norm,))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_loss(logits: Tensor, labels, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss normalized by the positive count.

    ``labels`` holds 1 (positive), 0 (negative) or -1 (ignored).
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    x = logits.values
    pos = labels == 1
    neg = labels == 0
    p = 1.0 / (1.0 + np.exp(-x))
    q = 1.0 - p
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    norm = max(1.0, float(pos.sum()))
    pos_terms = -alpha * q ** gamma * log_p
    neg_terms = -(1.0 - alpha) * p ** gamma * log_q
    value = (np.sum(pos_terms[pos]) + np.sum(neg_terms[neg])) / norm

    def bw(g):
        d_pos = alpha * (gamma * p * q ** gamma * log_p - q ** (gamma + 1))
        d_neg = (1.0 - alpha) * (p ** (gamma + 1) - gamma * p ** gamma * q * log_q)
        return (g * (np.where(pos, d_pos, 0.0) + np.where(neg, d_neg, 0.0)) / norm,)

    return ad._op(np.float64(value), (logits,), bw)


@dataclass(frozen=True)
class LossReport:
    coarse_l2: float
    refine_l2: float
    focal: float
    heatmap_l2: float
    total: float
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS

    FIELDS = ("coarse_l2", "refine_l2", "focal", "heatmap_l2", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def total_loss(coarse: tuple, refine: tuple, classification: tuple, heatmaps: Optional[tuple] = None,
               weights: Sequence[float] = DEFAULT_WEIGHTS, alpha: float = 0.25,
               gamma: float = 2.0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the four training terms.

    ``coarse`` and ``refine`` are (pred, target, mask) triples; the refine
    target must already be the residual between the ground truth and the
    coarse prediction. ``classification`` is (logits, labels) and
    ``heatmaps`` is (pred, target) or None when intermediate supervision is
    off.
    """
    if len(weights) != 4:
        raise ValueError("exactly four loss weights are required")
    weights = tuple(float(w) for w in weights)
    terms = [
        l2_loss(*coarse),
        l2_loss(*refine),
        focal_loss(*classification, alpha=alpha, gamma=gamma),
        l2_loss(*heatmaps) if heatmaps is not None else Tensor(np.float64(0.0)),
    ]
    total = None
    for w, t in zip(weights, terms):
        if w == 0.0:
            continue
        part = ad.scale(t, w)
        total = part if total is None else ad.add(total, part)
    if total is None:
        total = Tensor(np.float64(0.0))
    values = [float(t.values) for t in terms]
    report = LossReport(*values, total=float(total.values), weights=weights)
    return total, report
