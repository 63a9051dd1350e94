"""From raw head tensors to final labeled detections.

Pipeline: extract per-cell anchor-slot predictions from each scale's head
tensor, score them (sigmoid objectness, sigmoid per-class scores, argmax
class), suppress duplicates with greedy NMS, then gate on a confidence
floor. `detect_frame` composes all four steps over the three scales with
vectorized internals; it produces results identical to running the
list-based operations in sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .boxes import (BoxCorner, RawPrediction, iou_one_to_many,
                    responsible_cell, sigmoid)
from .tensor import ShapeError, Tensor


@dataclass(frozen=True, slots=True)
class Detection:
    """A scored, class-labeled box. confidence = objectness * class_score."""

    box: BoxCorner
    class_id: int
    class_name: str
    objectness: float
    class_score: float
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.objectness <= 1.0 and 0.0 <= self.class_score <= 1.0
                and 0.0 <= self.confidence <= 1.0):
            raise ValueError("scores must lie in [0, 1]")


@dataclass(frozen=True, slots=True)
class NmsConfig:
    """Suppression thresholds.

    Detections scoring under `objectness_threshold` are dropped before
    suppression. By default the drop key is the combined confidence; set
    `use_raw_objectness` to threshold the sigmoid objectness instead.
    `per_class` restricts suppression to pairs sharing a class_id.
    """

    objectness_threshold: float = 0.25
    iou_threshold: float = 0.45
    per_class: bool = False
    use_raw_objectness: bool = False

    def __post_init__(self):
        if not (0.0 <= self.objectness_threshold <= 1.0):
            raise ValueError(f"objectness_threshold {self.objectness_threshold} outside [0, 1]")
        if not (0.0 <= self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold {self.iou_threshold} outside [0, 1]")


@dataclass(frozen=True, slots=True)
class DetectConfig:
    """Full post-processing configuration for one frame."""

    nms: NmsConfig = NmsConfig()
    confidence_floor: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.confidence_floor <= 1.0):
            raise ValueError(f"confidence_floor {self.confidence_floor} outside [0, 1]")


def _head_fields(head: Tensor, num_classes: int):
    """View a head tensor as per-slot field arrays.

    Returns (grid_n, fields) where fields has shape
    (grid_n*grid_n, 3, 5 + C): channel layout per anchor slot is
    [t_x, t_y, t_w, t_h, objectness, class_0 .. class_{C-1}].
    """
    if head.height != head.width:
        raise ShapeError(f"head must be square, got {head.height}x{head.width}")
    per_slot = 5 + num_classes
    expect = 3 * per_slot
    if head.channels != expect:
        raise ShapeError(
            f"head has {head.channels} channels; {num_classes} classes "
            f"requires 3*(4+1+{num_classes}) = {expect}")
    grid_n = head.height
    return grid_n, head.data.reshape(grid_n * grid_n, 3, per_slot)


def extract_predictions(head: Tensor, anchors, num_classes: int,
                        input_n: int, scale_index: int = 0) -> list[RawPrediction]:
    """One RawPrediction per (cell, anchor slot), cell-major slot-minor.

    `anchors` is this scale's three priors. A head whose channel count
    disagrees with 3*(4+1+num_classes) is rejected.
    """
    anchors = tuple(anchors)
    if len(anchors) != 3:
        raise ShapeError(f"need exactly 3 anchors per scale, got {len(anchors)}")
    grid_n, fields = _head_fields(head, num_classes)
    out: list[RawPrediction] = []
    for idx in range(grid_n * grid_n):
        cell = (idx // grid_n, idx % grid_n)
        for slot in range(3):
            vec = fields[idx, slot]
            out.append(RawPrediction(
                t_x=float(vec[0]), t_y=float(vec[1]),
                t_w=float(vec[2]), t_h=float(vec[3]),
                objectness_logit=float(vec[4]),
                class_logits=tuple(float(v) for v in vec[5:]),
                cell=cell, scale_index=scale_index,
                anchor=anchors[slot], grid_n=grid_n, input_n=input_n,
            ))
    return out


def _score_arrays(tx, ty, tw, th, obj_logit, class_logits, rows, cols,
                  strides, p_w, p_h, input_n):
    """Vectorized scoring and decoding over parallel prediction arrays.

    Returns (objectness, class_id, class_score, confidence, corners[n,4]).
    Ties in the class argmax break toward the lowest class index.
    """
    objectness = sigmoid(obj_logit)
    class_scores = sigmoid(class_logits)
    class_id = np.argmax(class_scores, axis=1)
    class_score = class_scores[np.arange(class_scores.shape[0]), class_id]
    confidence = objectness * class_score

    b_x = (sigmoid(tx) + cols) * strides
    b_y = (sigmoid(ty) + rows) * strides
    b_w = p_w * np.exp(tw)
    b_h = p_h * np.exp(th)
    n = float(input_n)
    corners = np.stack([
        np.minimum(np.maximum(b_x - b_w / 2.0, 0.0), n),
        np.minimum(np.maximum(b_y - b_h / 2.0, 0.0), n),
        np.minimum(np.maximum(b_x + b_w / 2.0, 0.0), n),
        np.minimum(np.maximum(b_y + b_h / 2.0, 0.0), n),
    ], axis=1)
    return objectness, class_id, class_score, confidence, corners


def score_predictions(raws: list[RawPrediction],
                      class_names=None) -> list[Detection]:
    """Score and decode raw predictions into Detections.

    Class names come from `class_names` when given (indexed by class_id),
    else the decimal class_id string is used.
    """
    if not raws:
        return []
    tx = np.array([r.t_x for r in raws])
    ty = np.array([r.t_y for r in raws])
    tw = np.array([r.t_w for r in raws])
    th = np.array([r.t_h for r in raws])
    obj = np.array([r.objectness_logit for r in raws])
    logits = np.array([r.class_logits for r in raws])
    rows = np.array([r.cell[0] for r in raws], dtype=np.float64)
    cols = np.array([r.cell[1] for r in raws], dtype=np.float64)
    strides = np.array([r.input_n / r.grid_n for r in raws])
    p_w = np.array([r.anchor.p_w for r in raws])
    p_h = np.array([r.anchor.p_h for r in raws])
    input_n = raws[0].input_n
    for r in raws:
        if r.input_n != input_n:
            raise ShapeError("predictions mix different input sizes")

    objectness, class_id, class_score, confidence, corners = _score_arrays(
        tx, ty, tw, th, obj, logits, rows, cols, strides, p_w, p_h, input_n)

    out = []
    for i in range(len(raws)):
        cid = int(class_id[i])
        name = class_names[cid] if class_names is not None else str(cid)
        out.append(Detection(
            box=BoxCorner(float(corners[i, 0]), float(corners[i, 1]),
                          float(corners[i, 2]), float(corners[i, 3])),
            class_id=cid, class_name=name,
            objectness=float(objectness[i]),
            class_score=float(class_score[i]),
            confidence=float(confidence[i]),
        ))
    return out


def _nms_engine(confidence: np.ndarray, corners: np.ndarray,
                class_id: np.ndarray, objectness: np.ndarray,
                config: NmsConfig) -> list[int]:
    """Greedy suppression over parallel arrays; returns kept indices in
    pop order (descending confidence, ties to the lower original index)."""
    drop_key = objectness if config.use_raw_objectness else confidence
    kept_mask = drop_key >= config.objectness_threshold
    candidates = np.nonzero(kept_mask)[0]
    if candidates.size == 0:
        return []
    # stable sort on negated confidence = pop-max with lowest-index ties
    order = candidates[np.argsort(-confidence[candidates], kind="stable")]
    x_min, y_min, x_max, y_max = (corners[order, k] for k in range(4))
    cls = class_id[order]
    result: list[int] = []
    remaining = np.arange(order.size)
    while remaining.size:
        i = remaining[0]  # highest-confidence survivor
        result.append(int(order[i]))
        rest = remaining[1:]
        popped = BoxCorner(float(x_min[i]), float(y_min[i]),
                           float(x_max[i]), float(y_max[i]))
        ious = iou_one_to_many(popped, x_min[rest], y_min[rest],
                               x_max[rest], y_max[rest])
        keep = ious < config.iou_threshold
        if config.per_class:
            keep |= cls[rest] != cls[i]
        remaining = rest[keep]
    return result


def nms(detections: list[Detection], config: NmsConfig) -> list[Detection]:
    """Greedy non-max suppression.

    Detections under the drop threshold are removed; then the highest
    confidence survivor is repeatedly emitted while every remaining
    detection overlapping it with IoU >= iou_threshold is discarded.
    Output order is emission (pop) order.
    """
    if not detections:
        return []
    confidence = np.array([d.confidence for d in detections])
    objectness = np.array([d.objectness for d in detections])
    corners = np.array([(d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)
                        for d in detections])
    class_id = np.array([d.class_id for d in detections])
    keep = _nms_engine(confidence, corners, class_id, objectness, config)
    return [detections[i] for i in keep]


def two_stage_filter(detections: list[Detection],
                     confidence_floor: float) -> list[Detection]:
    """Keep detections with confidence >= confidence_floor, order preserved."""
    if not (0.0 <= confidence_floor <= 1.0):
        raise ValueError(f"confidence_floor {confidence_floor} outside [0, 1]")
    return [d for d in detections if d.confidence >= confidence_floor]


def detect_frame(heads, anchors, config: DetectConfig,
                 class_names) -> list[Detection]:
    """Full post-processing for one frame.

    `heads` are the three scale tensors ordered fine to coarse (strides
    8, 16, 32 of one input size); `anchors` are nine priors grouped three
    per scale in the same order. Equivalent to extract -> score -> nms ->
    two_stage_filter, with array internals so a full frame stays cheap.
    """
    heads = tuple(heads)
    anchors = tuple(anchors)
    if len(heads) != 3:
        raise ShapeError(f"need 3 head tensors, got {len(heads)}")
    if len(anchors) != 9:
        raise ShapeError(f"need 9 anchors, got {len(anchors)}")
    num_classes = len(class_names)
    input_n = heads[0].height * 8
    per_scale = []
    for scale, (head, stride) in enumerate(zip(heads, (8, 16, 32))):
        if head.height * stride != input_n:
            raise ShapeError(
                f"scale {scale} grid {head.height} inconsistent with input "
                f"{input_n} (expected {input_n // stride})")
        grid_n, fields = _head_fields(head, num_classes)
        n_cells = grid_n * grid_n
        idx = np.arange(n_cells)
        rows = np.repeat(idx // grid_n, 3).astype(np.float64)
        cols = np.repeat(idx % grid_n, 3).astype(np.float64)
        flat = fields.reshape(n_cells * 3, 5 + num_classes)
        scale_anchors = anchors[scale * 3:scale * 3 + 3]
        p_w = np.tile(np.array([a.p_w for a in scale_anchors]), n_cells)
        p_h = np.tile(np.array([a.p_h for a in scale_anchors]), n_cells)
        strides = np.full(n_cells * 3, input_n / grid_n)
        per_scale.append((flat, rows, cols, strides, p_w, p_h))

    flat = np.concatenate([s[0] for s in per_scale])
    rows = np.concatenate([s[1] for s in per_scale])
    cols = np.concatenate([s[2] for s in per_scale])
    strides = np.concatenate([s[3] for s in per_scale])
    p_w = np.concatenate([s[4] for s in per_scale])
    p_h = np.concatenate([s[5] for s in per_scale])

    objectness, class_id, class_score, confidence, corners = _score_arrays(
        flat[:, 0], flat[:, 1], flat[:, 2], flat[:, 3], flat[:, 4],
        flat[:, 5:], rows, cols, strides, p_w, p_h, input_n)

    keep = _nms_engine(confidence, corners, class_id, objectness, config.nms)
    out = []
    for i in keep:
        if confidence[i] < config.confidence_floor:
            continue
        cid = int(class_id[i])
        out.append(Detection(
            box=BoxCorner(float(corners[i, 0]), float(corners[i, 1]),
                          float(corners[i, 2]), float(corners[i, 3])),
            class_id=cid, class_name=class_names[cid],
            objectness=float(objectness[i]),
            class_score=float(class_score[i]),
            confidence=float(confidence[i]),
        ))
    return out


# logit magnitude for hard 0/1 targets: sigmoid(12) differs from 1 by 6e-6,
# so an encoded object scores ~0.99999 and background ~4e-11
_HOT_LOGIT = 12.0


def ground_truth_heads(labels, num_classes: int, input_n: int,
                       anchors) -> tuple[Tensor, Tensor, Tensor]:
    """Encode ground-truth labels as the three head tensors that decode
    back to those boxes (an identity stub standing in for inference).

    Each label goes to its best-fitting anchor slot (smallest
    |ln(w/p_w)| + |ln(h/p_h)|) at the responsible cell of that slot's
    scale; on a collision the next-best free slot is used. Background
    cells carry objectness and class logits of -12.
    """
    anchors = tuple(anchors)
    if len(anchors) != 9:
        raise ShapeError(f"need 9 anchors, got {len(anchors)}")
    if input_n % 32 != 0 or input_n <= 0:
        raise ValueError(f"input {input_n} is not a positive multiple of 32")
    grids = (input_n // 8, input_n // 16, input_n // 32)
    per_slot = 5 + num_classes
    arrays = [np.zeros((g, g, 3 * per_slot)) for g in grids]
    for arr, g in zip(arrays, grids):
        view = arr.reshape(g * g, 3, per_slot)
        view[:, :, 4:] = -_HOT_LOGIT

    def logit(p: float) -> float:
        p = min(max(p, 1e-6), 1.0 - 1e-6)
        return math.log(p / (1.0 - p))

    occupied: set[tuple[int, int, int, int]] = set()
    for class_id, box in labels:
        if not (0 <= class_id < num_classes):
            raise ValueError(f"class_id {class_id} outside 0..{num_classes - 1}")
        w_px = box.w * input_n
        h_px = box.h * input_n
        ranked = sorted(range(9), key=lambda k: (
            abs(math.log(w_px / anchors[k].p_w))
            + abs(math.log(h_px / anchors[k].p_h))))
        placed = False
        for k in ranked:
            scale, slot = divmod(k, 3)
            g = grids[scale]
            row, col = responsible_cell(box, g)
            if (scale, row, col, slot) in occupied:
                continue
            base = slot * per_slot
            cellvec = arrays[scale][row, col]
            cellvec[base + 0] = logit(box.cx * g - col)
            cellvec[base + 1] = logit(box.cy * g - row)
            cellvec[base + 2] = math.log(w_px / anchors[k].p_w)
            cellvec[base + 3] = math.log(h_px / anchors[k].p_h)
            cellvec[base + 4] = _HOT_LOGIT
            cellvec[base + 5 + class_id] = _HOT_LOGIT
            occupied.add((scale, row, col, slot))
            placed = True
            break
        if not placed:
            raise ValueError(
                f"no free anchor slot for a box at cell "
                f"{responsible_cell(box, grids[0])}; too many coincident boxes")
    return tuple(Tensor(arr, copy=False) for arr in arrays)


def format_detection_line(det: Detection) -> str:
    """`class_name confidence x_min y_min x_max y_max`, 6 decimals."""
    b = det.box
    return (f"{det.class_name} {det.confidence:.6f} "
            f"{b.x_min:.6f} {b.y_min:.6f} {b.x_max:.6f} {b.y_max:.6f}")


def format_detections(dets: list[Detection]) -> str:
    """All detection lines, LF-terminated."""
    return "".join(format_detection_line(d) + "\n" for d in dets)


def parse_detection_lines(text: str, class_names) -> list[Detection]:
    """Parse the line format back into Detections.

    Only the combined confidence survives serialization, so objectness is
    set to the confidence and class_score to 1. Unknown class names and
    malformed lines raise ValueError with the line number.
    """
    name_to_id = {name: i for i, name in enumerate(class_names)}
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        name = parts[0]
        if name not in name_to_id:
            raise ValueError(f"line {lineno}: unknown class {name!r}")
        try:
            conf, x_min, y_min, x_max, y_max = (float(p) for p in parts[1:])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field") from None
        out.append(Detection(
            box=BoxCorner(x_min, y_min, x_max, y_max),
            class_id=name_to_id[name], class_name=name,
            objectness=conf, class_score=1.0, confidence=conf,
        ))
    return out


def detections_to_json(dets: list[Detection]) -> str:
    """Structured JSON array of detections."""
    payload = [{
        "class_id": d.class_id,
        "class_name": d.class_name,
        "objectness": d.objectness,
        "class_score": d.class_score,
        "confidence": d.confidence,
        "box": {"x_min": d.box.x_min, "y_min": d.box.y_min,
                "x_max": d.box.x_max, "y_max": d.box.y_max},
    } for d in dets]
    return json.dumps(payload, indent=2)
