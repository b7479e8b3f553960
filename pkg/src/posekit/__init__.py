"""Single-stage multi-person pose estimation at toy scale, on a numpy autodiff core."""

__version__ = "0.1.0"

from .domain import BBox, Keypoint, Pose, PoseError, Scene, SkeletonSpec
from .nms import Detection, Similarity, greedy_nms
from .oks import OksParams, oks

__all__ = [
    "BBox", "Keypoint", "Pose", "PoseError", "Scene", "SkeletonSpec",
    "Detection", "Similarity", "greedy_nms", "OksParams", "oks", "__version__",
]
