"""Detection-stage geometry and losses.

Boxes are axis-aligned ``(x1, y1, x2, y2)`` in pixels with ``x1 < x2`` and
``y1 < y2``. Regression targets are corner offsets normalised by the anchor
width (x coordinates) or height (y coordinates).

Average precision uses all-points interpolation: the area under the monotone
precision envelope of the precision-recall curve. Detections are matched to
ground truth greedily in descending confidence, each ground-truth box at most
once, and detections sharing a confidence value are scored as one tier so the
result does not depend on their input order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EvaluationError, ValidationError

P_CLAMP = 1e-7


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {vals}: need x1 < x2 and y1 < y2")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


Anchor = Box


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25
    lam: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha must lie in (0, 1]")


def _box(b) -> Box:
    return b if isinstance(b, Box) else Box(*map(float, b))


def iou(a, b) -> float:
    a, b = _box(a), _box(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets, threshold: float = 0.28):
    """Greedy non-maximum suppression; returns kept detections by confidence."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("NMS threshold must lie in [0, 1]")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept = []
    for i in order:
        if all(iou(dets[i].box, k.box) <= threshold for k in kept):
            kept.append(dets[i])
    return kept


def encode_offsets(gt, anchor):
    gt, a = _box(gt), _box(anchor)
    w, h = a.width, a.height
    if w <= 0 or h <= 0:
        raise ValidationError("anchor has zero extent")
    return ((gt.x1 - a.x1) / w, (gt.y1 - a.y1) / h,
            (gt.x2 - a.x2) / w, (gt.y2 - a.y2) / h)


def decode_offsets(offsets, anchor) -> Box:
    a = _box(anchor)
    tx1, ty1, tx2, ty2 = map(float, offsets)
    w, h = a.width, a.height
    return Box(a.x1 + tx1 * w, a.y1 + ty1 * h, a.x2 + tx2 * w, a.y2 + ty2 * h)


def _p_t(p, y, alpha):
    if y not in (1, -1):
        raise ValidationError("y must be +1 or -1")
    p = min(max(float(p), P_CLAMP), 1.0 - P_CLAMP)
    return (p, alpha) if y == 1 else (1.0 - p, 1.0 - alpha)


def focal_loss(p: float, y: int, params: FocalParams = FocalParams()) -> float:
    """Focal loss for a single binary prediction; ``p`` is clamped to [1e-7, 1-1e-7]."""
    pt, at = _p_t(p, y, params.alpha)
    return -at * (1.0 - pt) ** params.gamma * math.log(pt)


def focal_loss_grad(p: float, y: int, params: FocalParams = FocalParams()) -> float:
    """d(focal_loss)/dp, evaluated at the clamped probability."""
    pt, at = _p_t(p, y, params.alpha)
    g = params.gamma
    d_pt = at * (g * (1.0 - pt) ** (g - 1) * math.log(pt) if g else 0.0) \
        - at * (1.0 - pt) ** g / pt
    return d_pt if y == 1 else -d_pt


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_grad(x: float) -> float:
    return x if abs(x) < 1.0 else math.copysign(1.0, x)


def regression_loss(pred_offsets, target_offsets) -> float:
    if len(pred_offsets) != 4 or len(target_offsets) != 4:
        raise ValidationError("offsets are 4-tuples (x1, y1, x2, y2)")
    return sum(smooth_l1(p - t) for p, t in zip(pred_offsets, target_offsets))


def detection_loss(reg: float, fl: float, params: FocalParams = FocalParams()) -> float:
    return reg + params.lam * fl


# -- precision / recall -------------------------------------------------------

def pr_curve(dets_per_image: dict, gts_per_image: dict, iou_thresh: float = 0.5,
             conf_thresh: float = 0.5):
    """Precision and recall after each confidence tier, plus the GT count."""
    n_gt = sum(len(v) for v in gts_per_image.values())
    if n_gt == 0:
        raise EvaluationError("no ground-truth boxes: average precision is undefined")
    flat = []
    for image_id, dets in dets_per_image.items():
        for d in dets:
            if d.confidence >= conf_thresh:
                flat.append((-d.confidence, str(image_id), d.box.as_tuple(), image_id, d))
    flat.sort(key=lambda t: t[:3])
    gts_per_image = {img: [getattr(g, "box", g) for g in gs] for img, gs in gts_per_image.items()}
    used = {img: [False] * len(g) for img, g in gts_per_image.items()}
    tp = fp = 0
    precision, recall = [], []
    for i, (_, _, _, image_id, det) in enumerate(flat):
        gts = gts_per_image.get(image_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if not used[image_id][j]:
                o = iou(det.box, g)
                if o > best:
                    best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            used[image_id][best_j] = True
            tp += 1
        else:
            fp += 1
        if i + 1 == len(flat) or flat[i + 1][0] != flat[i][0]:
            precision.append(tp / (tp + fp))
            recall.append(tp / n_gt)
    return np.array(precision), np.array(recall), n_gt


def area_under_envelope(precision, recall) -> float:
    if len(precision) == 0:
        return 0.0
    r = np.concatenate([[0.0], recall])
    p = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
    return float(np.sum(np.diff(r) * p))


def average_precision(dets_per_image: dict, gts_per_image: dict, iou_thresh: float = 0.5,
                      conf_thresh: float = 0.5) -> float:
    precision, recall, _ = pr_curve(dets_per_image, gts_per_image, iou_thresh, conf_thresh)
    return area_under_envelope(precision, recall)


def mean_average_precision(aps) -> float:
    aps = list(aps)
    if not aps:
        raise EvaluationError("no AP values to average")
    return float(np.mean(aps))


# -- annotation files ---------------------------------------------------------

def load_boxes_file(path):
    """Read a detection/annotation JSON file.

    The file holds one object ``{"image_id": ..., "boxes": [...]}`` or a list
    of them. Each box is ``{"x1", "y1", "x2", "y2"}`` with an optional
    ``"confidence"`` (default 1.0). Returns ``{image_id: [Detection, ...]}``.
    """
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if isinstance(data, dict):
        data = [data]
    out = {}
    try:
        for entry in data:
            dets = [Detection(Box(float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"])),
                              float(b.get("confidence", 1.0))) for b in entry["boxes"]]
            out.setdefault(entry["image_id"], []).extend(dets)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed entry ({exc})") from None
    return out


def dump_boxes_file(path, boxes_per_image: dict, with_confidence: bool = True):
    data = []
    for image_id, dets in boxes_per_image.items():
        rows = []
        for d in dets:
            row = {"x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2}
            if with_confidence:
                row["confidence"] = d.confidence
            rows.append(row)
        data.append({"image_id": image_id, "boxes": rows})
    Path(path).write_text(json.dumps(data, indent=1) + "\n")
