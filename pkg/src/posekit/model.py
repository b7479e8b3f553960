"""Toy-scale single-stage pose detector: backbone, pyramid, bypass and heads."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nms import DEFAULT_MAX_KEEP, DEFAULT_THRESHOLDS, Detection, greedy_nms
from .oks import OksParams
from .domain import Pose

CHECKPOINT_VERSION = 1
PRIOR_PROBABILITY = 0.01


@dataclass(frozen=True)
class HeadConfig:
    K: int = 5
    channels: int = 16
    strides: tuple[int, ...] = (4, 8, 16)
    embed_channels: int = 16
    in_channels: int = 3
    score_threshold: float = 0.05
    topk_per_level: int = 50
    nms_mode: str = "oks"
    nms_threshold: Optional[float] = None
    max_keep: int = DEFAULT_MAX_KEEP
    offset_grad: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.K < 1 or self.channels < 1 or self.embed_channels < 1 or self.in_channels < 1:
            raise ValueError("K and channel counts must be positive")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        for s in self.strides:
            if s < 2 or s & (s - 1):
                raise ValueError(f"strides must be powers of two >= 2, got {s}")
        if self.nms_mode not in DEFAULT_THRESHOLDS:
            raise ValueError(f"nms_mode must be one of {sorted(DEFAULT_THRESHOLDS)}")

    @property
    def level_count(self) -> int:
        return len(self.strides)

    @property
    def stage_count(self) -> int:
        return int(math.log2(self.strides[-1]))

    @property
    def resolved_nms_threshold(self) -> float:
        return DEFAULT_THRESHOLDS[self.nms_mode] if self.nms_threshold is None else self.nms_threshold


@dataclass
class Model:
    cfg: HeadConfig
    params: dict[str, Tensor]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.params.items()}

    def copy(self) -> "Model":
        return Model(self.cfg, {k: ad.leaf(t.values.copy(), name=k) for k, t in self.params.items()})

    def parameter_count(self) -> int:
        return sum(t.values.size for t in self.params.values())


@dataclass
class LevelOutput:
    stride: int
    coarse: Tensor
    refine: Tensor
    logits: Tensor
    heatmaps: Optional[Tensor] = None

    @property
    def grid(self) -> tuple[int, int]:
        return self.coarse.shape[-2], self.coarse.shape[-1]


@dataclass
class DensePrediction:
    levels: list[LevelOutput] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.levels[0].coarse.shape[0]


def layer_shapes(cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every weight and bias."""
    C, E, K = cfg.channels, cfg.embed_channels, cfg.K
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, c_out, c_in, k):
        shapes[f"{name}.weight"] = (c_out, c_in, k, k)
        shapes[f"{name}.bias"] = (c_out,)

    def dcn(name):
        shapes[f"{name}.weight"] = (E, C, K)
        shapes[f"{name}.bias"] = (E,)

    c_prev = cfg.in_channels
    for s in range(1, cfg.stage_count + 1):
        conv(f"backbone.stage{s}", C, c_prev, 3)
        c_prev = C
    for lvl in range(cfg.level_count):
        conv(f"fpn.lateral{lvl}", C, C, 1)
    conv("bypass.conv", C, C, 3)
    conv("bypass.out", 2 * K, C, 1)
    conv("reg.conv1", C, C, 3)
    conv("reg.conv2", C, C, 3)
    dcn("reg.dcn")
    conv("reg.out", 2 * K, E, 1)
    conv("cls.conv1", C, C, 3)
    conv("cls.conv2", C, C, 3)
    dcn("cls.dcn")
    conv("cls.out", 1, E, 1)
    conv("hm.conv", C, C, 3)
    conv("hm.out", K, C, 1)
    return shapes


ZERO_INIT = ("bypass.out", "reg.out")


def build_model(cfg: HeadConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg).items():
        layer, kind = name.rsplit(".", 1)
        if kind == "bias":
            value = np.zeros(shape)
            if layer == "cls.out":
                value[:] = -math.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
        elif layer in ZERO_INIT:
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.leaf(value, name=name)
    return Model(cfg, params)


def forward(model: Model, image, heatmaps: bool = False, weights: Optional[Mapping[str, Tensor]] = None,
            offset_grad: Optional[bool] = None) -> DensePrediction:
    """Dense predictions for a C x H x W image or an N x C x H x W batch."""
    cfg = model.cfg
    p = model.params if weights is None else weights
    offset_grad = cfg.offset_grad if offset_grad is None else offset_grad
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if x.values.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    _, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ValueError(f"image has {c} channels, model expects {cfg.in_channels}")
    top = cfg.strides[-1]
    if h % top or w % top:
        raise ValueError(f"image size {h}x{w} is not divisible by the largest stride {top}")

    def conv(name, t, stride=1):
        return ad.conv2d(t, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride)

    stage_out = {}
    feat = x
    for s in range(1, cfg.stage_count + 1):
        feat = ad.relu(conv(f"backbone.stage{s}", feat, stride=2))
        stage_out[2 ** s] = feat

    pyramid: list[Tensor] = [None] * cfg.level_count  # type: ignore[list-item]
    for lvl in reversed(range(cfg.level_count)):
        lateral = conv(f"fpn.lateral{lvl}", stage_out[cfg.strides[lvl]])
        if lvl + 1 < cfg.level_count:
            factor = cfg.strides[lvl + 1] // cfg.strides[lvl]
            lateral = ad.add(lateral, ad.upsample_nearest(pyramid[lvl + 1], factor))
        pyramid[lvl] = lateral

    out = DensePrediction()
    for lvl, feat in enumerate(pyramid):
        coarse = conv("bypass.out", ad.relu(conv("bypass.conv", feat)))
        sample_at = coarse if offset_grad else ad.detach(coarse)

        reg = ad.relu(conv("reg.conv2", ad.relu(conv("reg.conv1", feat))))
        reg_embed = ad.relu(ad.deformable_pose_conv(reg, sample_at, p["reg.dcn.weight"], p["reg.dcn.bias"]))
        refine = conv("reg.out", reg_embed)

        cls = ad.relu(conv("cls.conv2", ad.relu(conv("cls.conv1", feat))))
        cls_embed = ad.relu(ad.deformable_pose_conv(cls, sample_at, p["cls.dcn.weight"], p["cls.dcn.bias"]))
        logits = conv("cls.out", cls_embed)

        hm = conv("hm.out", ad.relu(conv("hm.conv", feat))) if heatmaps else None
        out.levels.append(LevelOutput(cfg.strides[lvl], coarse, refine, logits, hm))
    return out


def cell_centers(grid: tuple[int, int], stride: int) -> np.ndarray:
    """(H*W, 2) pixel centres (x, y) of a level's cells in row-major order."""
    h, w = grid
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def decode_offsets(offsets: np.ndarray, stride: int) -> np.ndarray:
    """2K x H x W cell-unit offsets -> (H*W, K, 2) pixel joint positions."""
    two_k, h, w = offsets.shape
    k = two_k // 2
    centers = cell_centers((h, w), stride)
    disp = offsets.reshape(k, 2, h * w).transpose(2, 0, 1)
    return centers[:, None, :] + stride * disp


def level_poses(level: LevelOutput, index: int = 0, use_refine: bool = True) -> np.ndarray:
    offsets = level.coarse.values[index]
    if use_refine:
        offsets = offsets + level.refine.values[index]
    return decode_offsets(offsets, level.stride)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def decode(pred: DensePrediction, cfg: HeadConfig, index: int = 0, use_refine: bool = True,
           params: Optional[OksParams] = None) -> list[Detection]:
    """Score, top-k, decode joints as centre + stride * (coarse + refine), then NMS."""
    candidates: list[Detection] = []
    for lvl, level in enumerate(pred.levels):
        scores = sigmoid(level.logits.values[index, 0]).ravel()
        keep = np.flatnonzero(scores > cfg.score_threshold)
        if not len(keep):
            continue
        keep = keep[np.argsort(-scores[keep], kind="stable")][: cfg.topk_per_level]
        joints = level_poses(level, index, use_refine)
        for i in keep:
            pose = Pose.from_xy(joints[i], visibility=np.ones(cfg.K), score=float(scores[i]))
            candidates.append(Detection(pose, float(scores[i]), lvl))
    if params is None:
        params = OksParams.for_k(cfg.K)
    return greedy_nms(candidates, cfg.nms_mode, cfg.resolved_nms_threshold, cfg.max_keep, params)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "weights": {
            name: {"shape": list(t.shape), "data": t.values.ravel().tolist()}
            for name, t in model.params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    cfg_doc = dict(doc["config"])
    cfg_doc["strides"] = tuple(cfg_doc["strides"])
    cfg = HeadConfig(**cfg_doc)
    expected = layer_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        entry = doc["weights"].get(name)
        if entry is None:
            raise ValueError(f"checkpoint is missing weight {name!r}")
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"weight {name!r} has shape {entry['shape']}, expected {list(shape)}")
        params[name] = ad.leaf(np.array(entry["data"], dtype=np.float64).reshape(shape), name=name)
    return Model(cfg, params)
