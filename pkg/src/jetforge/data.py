"""Joint-dataset construction: COCO JSON and Visdrone annotation ingestion
with the class remap / ignore rules, negative retention, manifest merging,
IoU k-means anchor clustering and the 16:9 multi-scale resolution sampler.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensorio

# unified class set; list order fixes the id assignment
CLASS_NAMES = ["person", "car", "bicycle", "motorbike", "bus", "truck"]
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
IGNORE = "ignore"

# COCO category names -> unified names (everything else is dropped)
COCO_REMAP = {
    "person": "person",
    "car": "car",
    "bicycle": "bicycle",
    "motorcycle": "motorbike",
    "bus": "bus",
    "truck": "truck",
}

# Visdrone2018 numeric ids per the dataset's published convention; also
# shipped as data/visdrone_categories.json so dataset-version drift is a
# config edit, not a code change.
VISDRONE_DEFAULT_CATEGORIES = {
    "0": {"name": "ignored-regions", "unified": IGNORE},
    "1": {"name": "pedestrian", "unified": "person"},
    "2": {"name": "people", "unified": "person"},
    "3": {"name": "bicycle", "unified": "bicycle"},
    "4": {"name": "car", "unified": "car"},
    "5": {"name": "van", "unified": "car"},
    "6": {"name": "truck", "unified": "truck"},
    "7": {"name": "tricycle", "unified": IGNORE},
    "8": {"name": "awning-tricycle", "unified": IGNORE},
    "9": {"name": "bus", "unified": "bus"},
    "10": {"name": "motor", "unified": "motorbike"},
    "11": {"name": "others", "unified": IGNORE},
}


class DataError(Exception):
    pass


class MalformedJson(DataError):
    pass


class UnknownCategoryId(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")


class UnknownCategory(DataError):
    pass


class DuplicateImagePath(DataError):
    pass


class TooFewBoxes(DataError):
    pass


@dataclass
class AnnotationRecord:
    image: str
    width: int
    height: int
    boxes: list[dict] = field(default_factory=list)  # {"bbox": [x,y,w,h], "label": name|"ignore"}
    source: str = ""

    def is_negative(self) -> bool:
        # negatives are truly unannotated images; ignore regions still count
        # as annotations
        return not self.boxes


def _clip_box(x, y, w, h, img_w, img_h):
    x2, y2 = x + w, y + h
    x, y = max(0.0, x), max(0.0, y)
    x2, y2 = min(float(img_w), x2), min(float(img_h), y2)
    if x2 <= x or y2 <= y:
        return None
    return [x, y, x2 - x, y2 - y]


def ingest_coco(path, source_tag: str = "coco") -> list[AnnotationRecord]:
    """COCO instances JSON -> records under the unified class set.

    Supported-class crowds (iscrowd=1) become ignore regions; annotations of
    unsupported classes are dropped; images left with no boxes stay in as
    negatives.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedJson(f"{path}: {e}")
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise MalformedJson(f"{path}: missing top-level '{key}'")

    cat_names = {c["id"]: c["name"] for c in doc["categories"]}
    records: dict = {}
    for im in doc["images"]:
        records[im["id"]] = AnnotationRecord(
            image=im["file_name"], width=im["width"], height=im["height"],
            source=source_tag)

    for ann in doc["annotations"]:
        cid = ann["category_id"]
        if cid not in cat_names:
            raise UnknownCategoryId(f"{path}: annotation {ann.get('id')} references category {cid}")
        name = cat_names[cid]
        if name not in COCO_REMAP:
            continue  # unsupported class: dropped, image stays as negative
        rec = records.get(ann["image_id"])
        if rec is None:
            raise MalformedJson(f"{path}: annotation {ann.get('id')} references unknown image")
        label = IGNORE if ann.get("iscrowd", 0) == 1 else COCO_REMAP[name]
        bbox = _clip_box(*ann["bbox"], rec.width, rec.height)
        if bbox is None:
            warnings.warn(f"{path}: dropping zero-area box on image {rec.image}")
            continue
        rec.boxes.append({"bbox": bbox, "label": label})
    return [records[i] for i in sorted(records)]


def load_visdrone_categories(path=None) -> dict[str, str]:
    if path is None:
        path = os.path.join(os.path.dirname(__file__), "data", "visdrone_categories.json")
        if not os.path.exists(path):
            return {k: v["unified"] for k, v in VISDRONE_DEFAULT_CATEGORIES.items()}
    with open(path, "r", encoding="utf-8") as f:
        table = json.load(f)
    return {k: v["unified"] for k, v in table.items()}


def ingest_visdrone(annotation_dir, images_dir=None, image_sizes=None,
                    default_size=None, categories_path=None,
                    source_tag: str = "visdrone") -> list[AnnotationRecord]:
    """Visdrone per-image CSV files -> records.

    Line format: left,top,width,height,score,category,truncation,occlusion.
    Image dimensions come from a sibling .ppm/.pgm in images_dir, the
    image_sizes map, or default_size, in that order.
    """
    remap = load_visdrone_categories(categories_path)
    records = []
    for fname in sorted(os.listdir(annotation_dir)):
        if not fname.endswith(".txt"):
            continue
        stem = fname[:-4]
        image_name, width, height = _resolve_visdrone_image(
            stem, images_dir, image_sizes, default_size)
        rec = AnnotationRecord(image=image_name, width=width, height=height,
                               source=source_tag)
        path = os.path.join(annotation_dir, fname)
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.strip().rstrip(",")  # visdrone files end lines with a comma
                if not line:
                    continue
                fields = line.split(",")
                if len(fields) != 8:
                    raise MalformedLine(path, line_no, f"expected 8 fields, got {len(fields)}")
                try:
                    x, y, w, h = (float(v) for v in fields[:4])
                    category = fields[5].strip()
                except ValueError as e:
                    raise MalformedLine(path, line_no, str(e))
                if category not in remap:
                    raise UnknownCategory(f"{path}:{line_no}: category '{category}'")
                bbox = _clip_box(x, y, w, h, width, height)
                if bbox is None:
                    warnings.warn(f"{path}:{line_no}: dropping zero-area box")
                    continue
                rec.boxes.append({"bbox": bbox, "label": remap[category]})
        records.append(rec)
    return records


def _resolve_visdrone_image(stem, images_dir, image_sizes, default_size):
    if images_dir is not None:
        for ext in (".ppm", ".pgm"):
            candidate = os.path.join(images_dir, stem + ext)
            if os.path.exists(candidate):
                img = tensorio.load_image(candidate)
                return stem + ext, img.shape[1], img.shape[0]
    if image_sizes is not None and stem in image_sizes:
        w, h = image_sizes[stem]
        return stem + ".jpg", w, h
    if default_size is not None:
        return stem + ".jpg", default_size[0], default_size[1]
    raise DataError(f"cannot determine image size for '{stem}' "
                    "(no readable image, no size map, no default)")


@dataclass
class Manifest:
    records: list[AnnotationRecord]
    summary: dict


def merge(record_lists: list[list[AnnotationRecord]]) -> Manifest:
    """Merge per-source record lists into one manifest, lexicographic by
    image path. Identical paths across sources are an error."""
    seen: dict[str, str] = {}
    merged: list[AnnotationRecord] = []
    for records in record_lists:
        for rec in records:
            if rec.image in seen:
                raise DuplicateImagePath(
                    f"image '{rec.image}' appears in both {seen[rec.image]} and {rec.source}")
            seen[rec.image] = rec.source
            merged.append(rec)
    merged.sort(key=lambda r: r.image)

    source_counts: dict[str, int] = {}
    class_hist = {name: 0 for name in CLASS_NAMES}
    ignore_count = 0
    negatives = 0
    for rec in merged:
        source_counts[rec.source] = source_counts.get(rec.source, 0) + 1
        if rec.is_negative():
            negatives += 1
        for b in rec.boxes:
            if b["label"] == IGNORE:
                ignore_count += 1
            else:
                class_hist[b["label"]] += 1
    summary = {
        "images": len(merged),
        "source_counts": source_counts,
        "class_histogram": class_hist,
        "ignore_boxes": ignore_count,
        "negative_images": negatives,
    }
    return Manifest(records=merged, summary=summary)


def save_manifest(path, manifest: Manifest, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        head = {"_meta": {**(meta or {}), "summary": manifest.summary}}
        f.write(json.dumps(head, sort_keys=True) + "\n")
        for rec in manifest.records:
            f.write(json.dumps({
                "image": rec.image, "width": rec.width, "height": rec.height,
                "source": rec.source, "boxes": rec.boxes,
            }, sort_keys=True) + "\n")


def load_manifest(path) -> Manifest:
    records = []
    summary = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if "_meta" in doc:
                summary = doc["_meta"].get("summary", {})
                continue
            records.append(AnnotationRecord(
                image=doc["image"], width=doc["width"], height=doc["height"],
                boxes=doc["boxes"], source=doc.get("source", "")))
    return Manifest(records=records, summary=summary)


# --------------------------------------------------------------------------
# anchor k-means (1 - IoU distance, centered boxes)
# --------------------------------------------------------------------------

def wh_iou(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU matrix of (w,h) boxes vs anchors, both centered at the origin."""
    inter = np.minimum(boxes[:, None, :], anchors[None, :, :]).prod(axis=2)
    areas = boxes.prod(axis=1)[:, None] + anchors.prod(axis=1)[None, :] - inter
    return inter / areas


@dataclass
class AnchorResult:
    anchors: np.ndarray       # k x 2, sorted by area
    mean_iou: float
    iou_history: list[float]  # mean IoU after each Lloyd update
    iterations: int


def _kmeanspp_init(boxes: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [boxes[rng.integers(len(boxes))]]
    while len(centroids) < k:
        d = 1.0 - wh_iou(boxes, np.array(centroids)).max(axis=1)
        weights = d * d
        total = weights.sum()
        if total <= 0:
            centroids.append(boxes[rng.integers(len(boxes))])
            continue
        centroids.append(boxes[rng.choice(len(boxes), p=weights / total)])
    return np.array(centroids, dtype=np.float64)


def kmeans_anchors(boxes, k: int, seed: int = 0, max_iterations: int = 300) -> AnchorResult:
    """IoU k-means over (w,h) boxes: k-means++ seeding, Lloyd iterations with
    per-cluster coordinate means, empty clusters re-seeded to the farthest box.

    The coordinate mean is not the exact optimizer of the 1-IoU objective, so
    the loop keeps iterating only while an update improves mean IoU (the
    previous codebook is kept otherwise); the recorded per-update history is
    therefore non-decreasing. Stops on stable assignments, a non-improving
    update, or max_iterations.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if boxes.size == 0:
        raise TooFewBoxes("no boxes to cluster")
    if np.unique(boxes, axis=0).shape[0] < k:
        raise TooFewBoxes(f"need at least {k} distinct boxes, have "
                          f"{np.unique(boxes, axis=0).shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(boxes, k, rng)

    def assignment(cents):
        ious = wh_iou(boxes, cents)
        return ious.argmax(axis=1), float(ious.max(axis=1).mean())

    assign, best_iou = assignment(centroids)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iterations):
        iterations += 1
        new_centroids = centroids.copy()
        for c in range(k):
            members = boxes[assign == c]
            if len(members) == 0:
                d = 1.0 - wh_iou(boxes, new_centroids).max(axis=1)
                new_centroids[c] = boxes[int(d.argmax())]
            else:
                new_centroids[c] = members.mean(axis=0)
        new_assign, new_iou = assignment(new_centroids)
        if history and new_iou < best_iou:
            break  # update stopped improving; keep the previous codebook
        centroids, best_iou = new_centroids, new_iou
        history.append(best_iou)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign

    order = np.argsort(centroids.prod(axis=1))
    return AnchorResult(anchors=centroids[order], mean_iou=best_iou,
                        iou_history=history, iterations=iterations)


def anchor_boxes_from_manifest(manifest: Manifest, net_w: int = 608, net_h: int = 352
                               ) -> np.ndarray:
    """Non-ignore box sizes rescaled into network-input (letterbox) pixels."""
    out = []
    for rec in manifest.records:
        scale = min(net_w / rec.width, net_h / rec.height)
        for b in rec.boxes:
            if b["label"] == IGNORE:
                continue
            w, h = b["bbox"][2] * scale, b["bbox"][3] * scale
            if w > 0 and h > 0:
                out.append((w, h))
    return np.array(out, dtype=np.float64)


# --------------------------------------------------------------------------
# multi-scale resolution schedule
# --------------------------------------------------------------------------

@dataclass
class ResolutionSchedule:
    w_min: int = 416
    w_max: int = 960
    h_min: int = 256
    h_max: int = 544
    period: int = 10
    seed: int = 0

    def widths(self) -> list[int]:
        return list(range(self.w_min, self.w_max + 1, 32))


def fit_height(w: int, h_min: int = 256, h_max: int = 544) -> int:
    """Multiple of 32 in [h_min, h_max] closest to w*9/16; ties take the
    larger height."""
    target = w * 9.0 / 16.0
    best = None
    for h in range(h_min, h_max + 1, 32):
        if best is None or abs(h - target) < abs(best - target) or (
                abs(h - target) == abs(best - target) and h > best):
            best = h
    return best


def sample_resolution(iteration: int, schedule: ResolutionSchedule) -> tuple[int, int]:
    """(w, h) for this iteration; constant within each `period` block,
    reseeded per block so lookups are random access."""
    block = iteration // schedule.period
    rng = np.random.default_rng([schedule.seed, block])
    widths = schedule.widths()
    w = widths[int(rng.integers(len(widths)))]
    return w, fit_height(w, schedule.h_min, schedule.h_max)
