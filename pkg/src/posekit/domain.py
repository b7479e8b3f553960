"""Shared vocabulary: skeletons, keypoints, poses, boxes and scenes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

COCO_JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_SIGMAS = tuple(
    s / 10.0
    for s in (.26, .25, .25, .35, .35, .79, .79, .72, .72, .62,
              .62, 1.07, 1.07, .87, .87, .89, .89)
)
UNIFORM_SIGMA = 0.079


class PoseError(ValueError):
    """Raised when a pose violates a skeleton or scene invariant."""


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    v: int = 2


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


class Pose:
    """K keypoints stored as a read-only (K, 3) float array of (x, y, v)."""

    __slots__ = ("_kpts", "score")

    def __init__(self, keypoints, score: Optional[float] = None):
        if isinstance(keypoints, np.ndarray):
            arr = np.array(keypoints, dtype=np.float64)
        else:
            rows = [
                (k.x, k.y, k.v) if isinstance(k, Keypoint) else tuple(k)
                for k in keypoints
            ]
            arr = np.array(rows, dtype=np.float64).reshape(len(rows), 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise PoseError(f"keypoints must have shape (K, 3), got {arr.shape}")
        arr.setflags(write=False)
        self._kpts = arr
        self.score = None if score is None else float(score)

    @classmethod
    def from_xy(cls, xy, visibility=None, score=None) -> "Pose":
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        v = np.full(len(xy), 2.0) if visibility is None else np.asarray(visibility, dtype=np.float64)
        return cls(np.column_stack([xy, v]), score=score)

    @property
    def array(self) -> np.ndarray:
        return self._kpts

    @property
    def xy(self) -> np.ndarray:
        return self._kpts[:, :2]

    @property
    def v(self) -> np.ndarray:
        return self._kpts[:, 2]

    @property
    def visible(self) -> np.ndarray:
        return self._kpts[:, 2] > 0

    @property
    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(float(x), float(y), int(v)) for x, y, v in self._kpts]

    def __len__(self) -> int:
        return len(self._kpts)

    def with_score(self, score: Optional[float]) -> "Pose":
        return Pose(self._kpts, score=score)

    def translated(self, dx: float, dy: float) -> "Pose":
        arr = self._kpts.copy()
        arr[:, 0] += dx
        arr[:, 1] += dy
        return Pose(arr, score=self.score)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return self.score == other.score and np.array_equal(self._kpts, other._kpts)

    def __hash__(self):
        return hash((self._kpts.tobytes(), self.score))

    def __repr__(self):
        return f"Pose(K={len(self)}, score={self.score})"


@dataclass(frozen=True)
class SkeletonSpec:
    K: int
    joint_names: tuple[str, ...]
    sigmas: tuple[float, ...]
    template: tuple[tuple[float, float], ...]
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if len(self.joint_names) != self.K or len(self.sigmas) != self.K or len(self.template) != self.K:
            raise ValueError("joint_names, sigmas and template must all have K entries")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("sigmas must be positive")
        if any(not (0.0 <= c <= 1.0) for pt in self.template for c in pt):
            raise ValueError("template coordinates must lie in [0, 1]")
        for a, b in self.edges:
            if not (0 <= a < self.K and 0 <= b < self.K):
                raise ValueError(f"edge ({a}, {b}) out of range")

    @classmethod
    def create(cls, K: int, joint_names=None, sigmas=None, template=None, edges=()) -> "SkeletonSpec":
        names = tuple(joint_names) if joint_names is not None else tuple(f"joint_{i}" for i in range(K))
        if sigmas is None:
            sigmas = default_sigmas(K)
        if template is None:
            angles = np.linspace(0.0, 2 * np.pi, K, endpoint=False)
            template = [(0.5 + 0.4 * np.cos(a), 0.5 + 0.4 * np.sin(a)) for a in angles]
        return cls(
            K=K,
            joint_names=names,
            sigmas=tuple(float(s) for s in sigmas),
            template=tuple((float(x), float(y)) for x, y in template),
            edges=tuple((int(a), int(b)) for a, b in edges),
        )


def default_sigmas(K: int) -> tuple[float, ...]:
    if K == 17:
        return COCO_SIGMAS
    return (UNIFORM_SIGMA,) * K


def stick_figure_skeleton() -> SkeletonSpec:
    """Five-joint figure used by the synthetic crowd generator."""
    return SkeletonSpec.create(
        5,
        joint_names=("head", "left_hand", "right_hand", "left_foot", "right_foot"),
        template=((0.5, 0.05), (0.05, 0.4), (0.95, 0.45), (0.3, 0.95), (0.72, 0.92)),
        edges=((0, 1), (0, 2), (0, 3), (0, 4)),
    )


def coco_skeleton() -> SkeletonSpec:
    template = (
        (0.5, 0.05), (0.46, 0.03), (0.54, 0.03), (0.42, 0.05), (0.58, 0.05),
        (0.35, 0.2), (0.65, 0.2), (0.25, 0.38), (0.75, 0.38), (0.2, 0.55),
        (0.8, 0.55), (0.4, 0.55), (0.6, 0.55), (0.38, 0.77), (0.62, 0.77),
        (0.37, 0.97), (0.63, 0.97),
    )
    edges = (
        (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
        (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
        (1, 3), (2, 4), (3, 5), (4, 6),
    )
    return SkeletonSpec.create(17, COCO_JOINT_NAMES, COCO_SIGMAS, template, edges)


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    gt_poses: tuple[Pose, ...]
    crowd_index: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"scene image must be C x H x W, got shape {image.shape}")
        if not 0.0 <= self.crowd_index <= 1.0:
            raise ValueError(f"crowd_index {self.crowd_index} outside [0, 1]")
        _, H, W = image.shape
        for n, pose in enumerate(self.gt_poses):
            vis = pose.xy[pose.visible]
            if np.any(vis[:, 0] < 0) or np.any(vis[:, 0] >= W) or np.any(vis[:, 1] < 0) or np.any(vis[:, 1] >= H):
                raise PoseError(f"gt pose {n} has a visible keypoint outside the {W}x{H} image")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "gt_poses", tuple(self.gt_poses))

    @property
    def size(self) -> tuple[int, int]:
        """(W, H)."""
        return self.image.shape[2], self.image.shape[1]


def validate_pose(pose: Pose, spec: SkeletonSpec, bounds: Optional[tuple[float, float]] = None,
                  is_gt: bool = True) -> Pose:
    if len(pose) != spec.K:
        raise PoseError(f"keypoint count mismatch: got {len(pose)}, expected {spec.K}")
    vis = pose.visible
    if is_gt and not vis.any():
        raise PoseError("no visible keypoints")
    if bounds is not None:
        W, H = bounds
        for i in np.flatnonzero(vis):
            x, y = pose.xy[i]
            if not (0 <= x < W and 0 <= y < H):
                raise PoseError(f"visible keypoint {i} at ({x}, {y}) is outside [0, {W}) x [0, {H})")
    if pose.score is not None and not 0.0 <= pose.score <= 1.0:
        raise PoseError(f"score {pose.score} outside [0, 1]")
    return pose


def keypoint_bbox(pose: Pose) -> BBox:
    pts = pose.xy[pose.visible]
    if len(pts) == 0:
        raise PoseError("no visible keypoints")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return BBox(float(x0), float(y0), float(x1), float(y1))


def poses_array(poses: Iterable[Pose]) -> np.ndarray:
    """Stack poses into an (N, K, 3) array."""
    poses = list(poses)
    if not poses:
        return np.zeros((0, 0, 3))
    return np.stack([p.array for p in poses])
