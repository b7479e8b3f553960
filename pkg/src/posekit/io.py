"""COCO person-keypoint documents, COCO result files and the raw-array scene format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from numbers import Real
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .domain import Pose, Scene, SkeletonSpec, default_sigmas
from .nms import Detection

SCENE_FORMAT_VERSION = 1


class CocoFormatError(ValueError):
    """A document violates the COCO keypoint schema; ``location`` is a JSON path."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str = ""


@dataclass
class AnnotatedPose:
    pose: Pose
    annotation_id: int
    area: float
    bbox: tuple[float, float, float, float]
    iscrowd: bool = False


@dataclass
class CocoImage:
    info: ImageInfo
    annotations: list[AnnotatedPose] = field(default_factory=list)

    @property
    def poses(self) -> list[Pose]:
        """Ground-truth poses; crowd regions and poses with no visible joint are excluded."""
        return [a.pose for a in self.annotations if not a.iscrowd and a.pose.visible.any()]


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, Real) and not isinstance(x, bool) and np.isfinite(x)


def _require(obj: dict, key: str, where: str, check, what: str):
    if key not in obj:
        raise CocoFormatError(f"{where}.{key}", "missing field")
    value = obj[key]
    if not check(value):
        raise CocoFormatError(f"{where}.{key}", f"expected {what}, got {value!r}")
    return value


def _list_of_dicts(doc: dict, key: str) -> list:
    items = _require(doc, key, "$", lambda v: isinstance(v, list), "a list")
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise CocoFormatError(f"$.{key}[{i}]", "expected an object")
    return items


def parse_coco_keypoints(doc: Any) -> tuple[SkeletonSpec, list[CocoImage]]:
    if not isinstance(doc, dict):
        raise CocoFormatError("$", "top level must be an object")
    images = _list_of_dicts(doc, "images")
    annotations = _list_of_dicts(doc, "annotations")
    categories = _list_of_dicts(doc, "categories")
    if not categories:
        raise CocoFormatError("$.categories", "at least one category is required")

    cat_ids = {}
    skeleton = None
    for i, cat in enumerate(categories):
        where = f"$.categories[{i}]"
        cid = _require(cat, "id", where, _is_int, "an integer")
        names = _require(cat, "keypoints", where,
                         lambda v: isinstance(v, list) and v and all(isinstance(n, str) for n in v),
                         "a non-empty list of joint names")
        edges = cat.get("skeleton", [])
        if not (isinstance(edges, list) and all(
                isinstance(e, list) and len(e) == 2 and all(_is_int(x) and 1 <= x <= len(names) for x in e)
                for e in edges)):
            raise CocoFormatError(f"{where}.skeleton", "expected a list of 1-based joint index pairs")
        cat_ids[cid] = len(names)
        if skeleton is None:
            K = len(names)
            skeleton = SkeletonSpec.create(
                K, joint_names=names, sigmas=default_sigmas(K),
                template=[(0.5, 0.5)] * K, edges=[(a - 1, b - 1) for a, b in edges],
            )

    by_id: dict[int, CocoImage] = {}
    for i, img in enumerate(images):
        where = f"$.images[{i}]"
        iid = _require(img, "id", where, _is_int, "an integer")
        if iid in by_id:
            raise CocoFormatError(f"{where}.id", f"duplicate image id {iid}")
        width = _require(img, "width", where, lambda v: _is_int(v) and v > 0, "a positive integer")
        height = _require(img, "height", where, lambda v: _is_int(v) and v > 0, "a positive integer")
        name = img.get("file_name", "")
        if not isinstance(name, str):
            raise CocoFormatError(f"{where}.file_name", "expected a string")
        by_id[iid] = CocoImage(ImageInfo(iid, width, height, name))

    seen_ann = set()
    for i, ann in enumerate(annotations):
        where = f"$.annotations[{i}]"
        aid = _require(ann, "id", where, _is_int, "an integer")
        if aid in seen_ann:
            raise CocoFormatError(f"{where}.id", f"duplicate annotation id {aid}")
        seen_ann.add(aid)
        iid = _require(ann, "image_id", where, _is_int, "an integer")
        if iid not in by_id:
            raise CocoFormatError(f"{where}.image_id", f"dangling image_id {iid}")
        cid = _require(ann, "category_id", where, _is_int, "an integer")
        if cid not in cat_ids:
            raise CocoFormatError(f"{where}.category_id", f"unknown category_id {cid}")
        K = cat_ids[cid]
        kps = _require(ann, "keypoints", where, lambda v: isinstance(v, list), "a list")
        if len(kps) != 3 * K:
            note = " (not divisible by 3)" if len(kps) % 3 else ""
            raise CocoFormatError(f"{where}.keypoints", f"keypoints length {len(kps)} ≠ {3 * K}{note}")
        for j, x in enumerate(kps):
            if not _is_num(x):
                raise CocoFormatError(f"{where}.keypoints[{j}]", f"expected a finite number, got {x!r}")
        arr = np.array(kps, dtype=np.float64).reshape(K, 3)
        for j, v in enumerate(arr[:, 2]):
            if v not in (0.0, 1.0, 2.0):
                raise CocoFormatError(f"{where}.keypoints[{3 * j + 2}]", f"visibility {v!r} not in {{0, 1, 2}}")
        bbox = ann.get("bbox", [0.0, 0.0, 0.0, 0.0])
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_num(b) for b in bbox)
                and bbox[2] >= 0 and bbox[3] >= 0):
            raise CocoFormatError(f"{where}.bbox", f"expected [x, y, w, h] with w, h >= 0, got {bbox!r}")
        area = ann.get("area", float(bbox[2] * bbox[3]))
        if not (_is_num(area) and area >= 0):
            raise CocoFormatError(f"{where}.area", f"expected a non-negative number, got {area!r}")
        num = ann.get("num_keypoints", int(np.sum(arr[:, 2] > 0)))
        if not (_is_int(num) and 0 <= num <= K):
            raise CocoFormatError(f"{where}.num_keypoints", f"expected an integer in [0, {K}], got {num!r}")
        iscrowd = ann.get("iscrowd", 0)
        if iscrowd not in (0, 1) or isinstance(iscrowd, bool):
            raise CocoFormatError(f"{where}.iscrowd", f"expected 0 or 1, got {iscrowd!r}")
        by_id[iid].annotations.append(
            AnnotatedPose(Pose(arr), aid, float(area), tuple(float(b) for b in bbox), bool(iscrowd))
        )
    return skeleton, list(by_id.values())


def read_coco_keypoints(path) -> tuple[SkeletonSpec, list[CocoImage]]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}:{exc.lineno}:{exc.colno}", f"malformed JSON: {exc.msg}") from exc
    return parse_coco_keypoints(doc)


def write_coco_keypoints(skeleton: SkeletonSpec, images: Sequence[CocoImage], path, category_id: int = 1) -> None:
    doc = {
        "images": [
            {"id": im.info.id, "width": im.info.width, "height": im.info.height, "file_name": im.info.file_name}
            for im in images
        ],
        "annotations": [
            {
                "id": a.annotation_id,
                "image_id": im.info.id,
                "category_id": category_id,
                "keypoints": a.pose.array.ravel().tolist(),
                "bbox": list(a.bbox),
                "area": a.area,
                "num_keypoints": int(a.pose.visible.sum()),
                "iscrowd": int(a.iscrowd),
            }
            for im in images for a in im.annotations
        ],
        "categories": [{
            "id": category_id,
            "name": "person",
            "supercategory": "person",
            "keypoints": list(skeleton.joint_names),
            "skeleton": [[a + 1, b + 1] for a, b in skeleton.edges],
        }],
    }
    Path(path).write_text(json.dumps(doc))


def write_results(dets: dict[int, Sequence[Detection]], path, category_id: int = 1) -> None:
    """COCO results list of {image_id, category_id, keypoints, score}; decoded joints get v = 1."""
    out = []
    for image_id, image_dets in dets.items():
        for d in image_dets:
            arr = d.pose.array.copy()
            arr[:, 2] = 1.0
            out.append({
                "image_id": int(image_id),
                "category_id": category_id,
                "keypoints": [float(x) for x in arr.ravel()],
                "score": float(d.score),
            })
    try:
        Path(path).write_text(json.dumps(out))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_results(path) -> dict[int, list[Detection]]:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}:{exc.lineno}:{exc.colno}", f"malformed JSON: {exc.msg}") from exc
    if not isinstance(doc, list):
        raise CocoFormatError("$", "results must be a list")
    out: dict[int, list[Detection]] = {}
    for i, entry in enumerate(doc):
        where = f"$[{i}]"
        if not isinstance(entry, dict):
            raise CocoFormatError(where, "expected an object")
        iid = _require(entry, "image_id", where, _is_int, "an integer")
        kps = _require(entry, "keypoints", where,
                       lambda v: isinstance(v, list) and len(v) % 3 == 0 and len(v) > 0 and all(_is_num(x) for x in v),
                       "a list of 3K numbers")
        score = _require(entry, "score", where, lambda v: _is_num(v) and 0 <= v <= 1, "a score in [0, 1]")
        pose = Pose(np.array(kps, dtype=np.float64).reshape(-1, 3), score=score)
        out.setdefault(iid, []).append(Detection(pose, float(score)))
    return out


# ---------------------------------------------------------------- raw-array scenes

def write_scenes(scenes: Sequence[Scene], out_dir, skeleton: SkeletonSpec) -> Path:
    """Manifest ``scenes.json`` plus one little-endian float32 ``scene_XXXXX.f32`` per image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.f32"
        scene.image.astype("<f4").tofile(out_dir / name)
        entries.append({
            "file": name,
            "shape": list(scene.image.shape),
            "crowd_index": scene.crowd_index,
            "gt_poses": [p.array.ravel().tolist() for p in scene.gt_poses],
        })
    manifest = {
        "version": SCENE_FORMAT_VERSION,
        "skeleton": {
            "K": skeleton.K,
            "joint_names": list(skeleton.joint_names),
            "sigmas": list(skeleton.sigmas),
            "template": [list(t) for t in skeleton.template],
            "edges": [list(e) for e in skeleton.edges],
        },
        "scenes": entries,
    }
    path = out_dir / "scenes.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_scenes(manifest_path) -> tuple[SkeletonSpec, list[Scene]]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "scenes.json"
    doc = json.loads(manifest_path.read_text())
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene manifest version {doc.get('version')!r}")
    sk = doc["skeleton"]
    skeleton = SkeletonSpec.create(sk["K"], sk["joint_names"], sk["sigmas"], sk["template"], sk["edges"])
    scenes = []
    for i, entry in enumerate(doc["scenes"]):
        shape = tuple(entry["shape"])
        data = np.fromfile(manifest_path.parent / entry["file"], dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise ValueError(f"scene {i}: {entry['file']} holds {data.size} values, expected shape {shape}")
        poses = tuple(Pose(np.array(p, dtype=np.float64).reshape(-1, 3)) for p in entry["gt_poses"])
        scenes.append(Scene(data.reshape(shape).astype(np.float64), poses, float(entry["crowd_index"]),
                            meta={"index": i}))
    return skeleton, scenes
