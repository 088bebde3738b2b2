"""mAP@0.5 with ignore-region semantics: detections overlapping an ignore
region are neither true nor false positives, mirroring crowd/ignored-region
annotations in the training data.

AP uses all-points interpolation (area under the non-increasing precision
envelope). mAP averages classes that have at least one ground-truth box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, IGNORE, Manifest

TP = "tp"
FP = "fp"
IGNORED = "ignored"

DEFAULT_IOU_THRESH = 0.5
DEFAULT_IGNORE_OVERLAP = 0.5


class EvalError(Exception):
    pass


class UnknownImage(EvalError):
    pass


class UnknownClassId(EvalError):
    pass


def _corners(bbox):
    x, y, w, h = bbox
    return x, y, x + w, y + h


def _iou_xywh(a, b) -> float:
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _ignore_overlap(det_bbox, region_bbox) -> float:
    """intersection(det, region) / area(det)."""
    ax1, ay1, ax2, ay2 = _corners(det_bbox)
    bx1, by1, bx2, by2 = _corners(region_bbox)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    area = det_bbox[2] * det_bbox[3]
    return (iw * ih) / area if area > 0 else 0.0


@dataclass
class MatchResult:
    det_labels: list[str]          # tp | fp | ignored, in detection order
    det_matched_gt: list[int]      # gt index or -1
    gt_matched_by: list[int]       # det index or -1


def match_detections(dets: list[dict], gts: list[list[float]],
                     ignore_regions: list[list[float]],
                     iou_thresh: float = DEFAULT_IOU_THRESH,
                     ignore_overlap: float = DEFAULT_IGNORE_OVERLAP) -> MatchResult:
    """Greedy matching for one image and one class.

    `dets` must already be sorted by confidence descending. Each detection
    takes the highest-IoU unmatched ground truth at IoU >= iou_thresh; failing
    that it is IGNORED if intersection with any ignore region covers at least
    `ignore_overlap` of the detection, else FP.
    """
    labels: list[str] = []
    matched_gt: list[int] = []
    gt_matched_by = [-1] * len(gts)
    for di, det in enumerate(dets):
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gts):
            if gt_matched_by[gi] != -1:
                continue
            v = _iou_xywh(det["bbox"], gt)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt != -1 and best_iou >= iou_thresh:
            labels.append(TP)
            matched_gt.append(best_gt)
            gt_matched_by[best_gt] = di
            continue
        if any(_ignore_overlap(det["bbox"], r) >= ignore_overlap for r in ignore_regions):
            labels.append(IGNORED)
            matched_gt.append(-1)
            continue
        labels.append(FP)
        matched_gt.append(-1)
    return MatchResult(labels, matched_gt, gt_matched_by)


def average_precision(tp_flags: np.ndarray, total_gt: int) -> float:
    """All-points AP from detection outcomes sorted by confidence descending.

    tp_flags holds 1 for TP and 0 for FP (ignored detections never enter).
    """
    if total_gt <= 0:
        raise EvalError("average_precision needs at least one ground truth")
    tp_flags = np.asarray(tp_flags, dtype=np.float64)
    if tp_flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(1.0 - tp_flags)
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    per_class_ap: dict[str, float]
    map50: float
    gt_counts: dict[str, int]
    tp_counts: dict[str, int]
    fp_counts: dict[str, int]
    ignored_counts: dict[str, int]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": self.per_class_ap, "map50": self.map50,
            "gt_counts": self.gt_counts, "tp_counts": self.tp_counts,
            "fp_counts": self.fp_counts, "ignored_counts": self.ignored_counts,
            "config": self.config,
        }

    def table(self) -> str:
        rows = [("class", "AP", "GT", "TP", "FP", "ignored")]
        for name in CLASS_NAMES:
            ap = self.per_class_ap.get(name)
            rows.append((name, "-" if ap is None else f"{ap:.4f}",
                         str(self.gt_counts.get(name, 0)),
                         str(self.tp_counts.get(name, 0)),
                         str(self.fp_counts.get(name, 0)),
                         str(self.ignored_counts.get(name, 0))))
        rows.append(("mAP@0.5", f"{self.map50:.4f}", "", "", "", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                 for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def evaluate(detections: list[dict], manifest: Manifest,
             iou_thresh: float = DEFAULT_IOU_THRESH,
             apply_ignore: bool = True,
             ignore_overlap: float = DEFAULT_IGNORE_OVERLAP) -> EvalReport:
    """Score a detection list (dicts with image/class/confidence/bbox)
    against a dataset manifest."""
    by_image = {rec.image: rec for rec in manifest.records}
    for det in detections:
        if det["image"] not in by_image:
            raise UnknownImage(f"detection references unknown image '{det['image']}'")
        if not 0 <= int(det["class"]) < len(CLASS_NAMES):
            raise UnknownClassId(f"class id {det['class']} out of range")

    per_class_ap: dict[str, float] = {}
    gt_counts: dict[str, int] = {}
    tp_counts: dict[str, int] = {}
    fp_counts: dict[str, int] = {}
    ignored_counts: dict[str, int] = {}

    for cid, cname in enumerate(CLASS_NAMES):
        outcomes: list[tuple[float, int, int]] = []  # (confidence, order, is_tp)
        total_gt = 0
        tp_total = fp_total = ign_total = 0
        order = 0
        for image in sorted(by_image):
            rec = by_image[image]
            gts = [b["bbox"] for b in rec.boxes if b["label"] == cname]
            regions = ([b["bbox"] for b in rec.boxes if b["label"] == IGNORE]
                       if apply_ignore else [])
            total_gt += len(gts)
            dets = [d for d in detections if d["image"] == image and int(d["class"]) == cid]
            dets.sort(key=lambda d: -d["confidence"])  # stable on ties
            result = match_detections(dets, gts, regions, iou_thresh, ignore_overlap)
            for det, label in zip(dets, result.det_labels):
                if label == IGNORED:
                    ign_total += 1
                    continue
                is_tp = 1 if label == TP else 0
                tp_total += is_tp
                fp_total += 1 - is_tp
                outcomes.append((det["confidence"], order, is_tp))
                order += 1

        gt_counts[cname] = total_gt
        tp_counts[cname] = tp_total
        fp_counts[cname] = fp_total
        ignored_counts[cname] = ign_total
        if total_gt == 0:
            continue  # class absent from this dataset: skipped from mAP
        outcomes.sort(key=lambda t: (-t[0], t[1]))
        flags = np.array([t[2] for t in outcomes], dtype=np.float64)
        per_class_ap[cname] = average_precision(flags, total_gt)

    map50 = (sum(per_class_ap.values()) / len(per_class_ap)) if per_class_ap else 0.0
    return EvalReport(
        per_class_ap=per_class_ap, map50=map50, gt_counts=gt_counts,
        tp_counts=tp_counts, fp_counts=fp_counts, ignored_counts=ignored_counts,
        config={"iou_thresh": iou_thresh, "apply_ignore": apply_ignore,
                "ignore_overlap": ignore_overlap},
    )


def save_report(path, report: EvalReport, meta: dict | None = None) -> None:
    doc = {"meta": meta or {}, **report.to_dict()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
