"""Random valid COCO keypoint documents and the malformed-document mutation classes."""
import numpy as np

K = 17
NAMES = [f"j{i}" for i in range(K)]


def make_doc(rng, n_images=3, K=K):
    images = [{"id": 10 + i, "width": 640, "height": 480, "file_name": f"{i}.jpg"} for i in range(n_images)]
    anns = []
    aid = 1
    for im in images:
        for _ in range(int(rng.integers(0, 3))):
            xy = rng.uniform(0, 400, size=(K, 2)).round(2)
            v = rng.choice([0, 1, 2], size=K)
            v[0] = 2
            kps = np.column_stack([xy, v]).ravel().tolist()
            anns.append({"id": aid, "image_id": im["id"], "category_id": 1, "keypoints": kps,
                         "bbox": [1.0, 2.0, 30.0, 40.0], "area": 1200.0, "num_keypoints": int((v > 0).sum()),
                         "iscrowd": 0})
            aid += 1
    cats = [{"id": 1, "name": "person", "keypoints": NAMES[:K], "skeleton": [[1, 2], [2, 3]]}]
    return {"images": images, "annotations": anns, "categories": cats}


def with_ann(rng):
    doc = make_doc(rng)
    while not doc["annotations"]:
        doc = make_doc(rng)
    return doc


def _set(path, value):
    def mutate(doc):
        obj = doc
        for p in path[:-1]:
            obj = obj[p]
        obj[path[-1]] = value
    return mutate


def _delete(path):
    def mutate(doc):
        obj = doc
        for p in path[:-1]:
            obj = obj[p]
        del obj[path[-1]]
    return mutate


def _dup_image(doc):
    doc["images"].append(dict(doc["images"][0]))


def _dup_ann(doc):
    doc["annotations"].append(dict(doc["annotations"][0]))


MUTATIONS = {
    "empty_object": (lambda d: d.clear(), "$.images"),
    "images_not_list": (_set(["images"], {}), "$.images"),
    "missing_annotations": (_delete(["annotations"]), "$.annotations"),
    "image_not_object": (_set(["images", 0], 5), "$.images[0]"),
    "empty_categories": (_set(["categories"], []), "$.categories"),
    "category_names_not_strings": (_set(["categories", 0, "keypoints"], [1, 2]), "$.categories[0].keypoints"),
    "bad_skeleton_index": (_set(["categories", 0, "skeleton"], [[0, 1]]), "$.categories[0].skeleton"),
    "image_missing_id": (_delete(["images", 0, "id"]), "$.images[0].id"),
    "duplicate_image_id": (_dup_image, "$.images[3].id"),
    "zero_width": (_set(["images", 1, "width"], 0), "$.images[1].width"),
    "float_height": (_set(["images", 1, "height"], 480.0), "$.images[1].height"),
    "file_name_not_string": (_set(["images", 2, "file_name"], 7), "$.images[2].file_name"),
    "duplicate_annotation_id": (_dup_ann, "$.annotations[-1].id"),
    "dangling_image_id": (_set(["annotations", 0, "image_id"], 999), "$.annotations[0].image_id"),
    "unknown_category": (_set(["annotations", 0, "category_id"], 2), "$.annotations[0].category_id"),
    "keypoints_not_list": (_set(["annotations", 0, "keypoints"], "x"), "$.annotations[0].keypoints"),
    "keypoints_short": (lambda d: d["annotations"][0]["keypoints"].pop(), "$.annotations[0].keypoints"),
    "keypoint_string": (_set(["annotations", 0, "keypoints", 4], "4"), "$.annotations[0].keypoints[4]"),
    "keypoint_bool": (_set(["annotations", 0, "keypoints", 3], True), "$.annotations[0].keypoints[3]"),
    "bad_visibility": (_set(["annotations", 0, "keypoints", 5], 3), "$.annotations[0].keypoints[5]"),
    "negative_bbox": (_set(["annotations", 0, "bbox"], [0, 0, -1, 2]), "$.annotations[0].bbox"),
    "negative_area": (_set(["annotations", 0, "area"], -1.0), "$.annotations[0].area"),
    "num_keypoints_range": (_set(["annotations", 0, "num_keypoints"], K + 1), "$.annotations[0].num_keypoints"),
    "iscrowd_two": (_set(["annotations", 0, "iscrowd"], 2), "$.annotations[0].iscrowd"),
}
