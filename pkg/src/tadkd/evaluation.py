"""Inference and PASCAL/COCO-style average precision."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import detector as det
from . import geometry as geo
from . import tensor as T

COCO_THRESHOLDS = tuple(np.round(0.5 + 0.05 * np.arange(10), 2))


@dataclass(frozen=True)
class Detection:
    box: tuple
    class_id: int
    score: float


def infer_batch(model: det.DetectorModel, images: np.ndarray, score_threshold: float = 0.05,
                nms_iou: float = 0.5, max_dets: int = 20) -> List[List[Detection]]:
    """Detections for a (B, 3, H, W) stack of images."""
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    height, width = images.shape[2:]
    with T.no_grad():
        features = det.backbone_forward(model, images)
        proposals = det.propose(model, features, (height, width), train_mode=False)
        boxes = np.concatenate([p.boxes for p in proposals])
        batch_index = np.concatenate([np.full(len(p), i) for i, p in enumerate(proposals)])
        pooled = det.roi_pool_batch(features, boxes, batch_index, cfg.stride, cfg.roi_size)
        logits, deltas = det.heads_forward(model, pooled)
        probs = T.softmax(logits).data
    results = []
    for b in range(images.shape[0]):
        rows = np.nonzero(batch_index == b)[0]
        dets: List[Detection] = []
        cand_boxes, cand_scores, cand_cls = [], [], []
        for c in range(1, cfg.num_classes + 1):
            scores = probs[rows, c]
            keep = scores >= score_threshold
            if not keep.any():
                continue
            cls_boxes = det.decode_head_deltas(cfg, deltas.data[rows][keep][:, 4 * (c - 1) : 4 * c], boxes[rows][keep])
            cls_boxes = geo.clip_boxes(cls_boxes, width, height, min_size=1e-3)
            cls_scores = scores[keep]
            kept = geo.nms(cls_boxes, cls_scores, nms_iou)
            cand_boxes.append(cls_boxes[kept])
            cand_scores.append(cls_scores[kept])
            cand_cls.append(np.full(len(kept), c))
        if cand_boxes:
            all_boxes = np.concatenate(cand_boxes)
            all_scores = np.concatenate(cand_scores)
            all_cls = np.concatenate(cand_cls)
            for i in geo.score_order(all_scores)[:max_dets]:
                dets.append(Detection(tuple(float(v) for v in all_boxes[i]), int(all_cls[i]), float(all_scores[i])))
        results.append(dets)
    return results


def infer(model: det.DetectorModel, image: np.ndarray, score_threshold: float = 0.05, nms_iou: float = 0.5,
          max_dets: int = 20) -> List[Detection]:
    return infer_batch(model, np.asarray(image)[None], score_threshold, nms_iou, max_dets)[0]


# ------------------------------------------------------------------------ AP
def _interpolated_ap(recall: np.ndarray, precision: np.ndarray, voc11: bool = False) -> float:
    if voc11:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            total += above.max() if above.size else 0.0
        return total / 11.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence[Sequence[Detection]], gts: Sequence, iou_threshold: float = 0.5,
                      num_classes: Optional[int] = None, voc11: bool = False) -> Dict[int, float]:
    """Per-class AP; ``gts[i]`` is ``(boxes, labels)`` for image ``i``.

    Classes with no ground truth are left out of the result.
    """
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} images")
    gt_boxes = [geo.as_boxes(g[0]) for g in gts]
    gt_labels = [np.asarray(g[1], dtype=np.int64).reshape(-1) for g in gts]
    classes = sorted({int(c) for labels in gt_labels for c in labels})
    if num_classes is not None:
        classes = [c for c in classes if 1 <= c <= num_classes]
    result: Dict[int, float] = {}
    for c in classes:
        n_gt = int(sum((labels == c).sum() for labels in gt_labels))
        cands = [
            (d.score, img, order, d.box)
            for img, dets in enumerate(detections)
            for order, d in enumerate(dets)
            if d.class_id == c
        ]
        cands.sort(key=lambda x: (-x[0], x[1], x[2]))
        matched = [np.zeros(len(l), dtype=bool) for l in gt_labels]
        tp = np.zeros(len(cands))
        for k, (_, img, _, box) in enumerate(cands):
            sel = np.nonzero((gt_labels[img] == c) & ~matched[img])[0]
            if sel.size == 0:
                continue
            ious = geo.iou_matrix(box, gt_boxes[img][sel])[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                matched[img][sel[best]] = True
                tp[k] = 1.0
        if len(cands) == 0:
            result[c] = 0.0
            continue
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1.0 - tp)
        result[c] = _interpolated_ap(ctp / n_gt, ctp / (ctp + cfp), voc11)
    return result


def mean_ap(per_class: Dict[int, float]) -> float:
    return float(np.mean(list(per_class.values()))) if per_class else 0.0


@dataclass
class EvalReport:
    ap_per_class: Dict[int, float]
    map50: float
    map50_95: float
    parameter_count: int
    images_per_second: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap_per_class"] = {str(k): v for k, v in self.ap_per_class.items()}
        return d


def detect_all(model: det.DetectorModel, scenes, batch_size: int = 16, **kwargs) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i : i + batch_size]
        out.extend(infer_batch(model, np.stack([s.image for s in chunk]), **kwargs))
    return out


def map_at(model: det.DetectorModel, scenes, iou_threshold: float = 0.5) -> float:
    dets = detect_all(model, scenes)
    gts = [(s.gt_boxes, s.gt_labels) for s in scenes]
    return mean_ap(average_precision(dets, gts, iou_threshold, model.config.num_classes))


def measure_speed(model: det.DetectorModel, scenes, count: int = 100) -> float:
    """Single-image inference throughput, wall clock."""
    if not scenes:
        return 0.0
    n = min(count, len(scenes))
    start = time.perf_counter()
    for s in scenes[:n]:
        infer(model, s.image)
    elapsed = time.perf_counter() - start
    return n / elapsed if elapsed > 0 else float("inf")


def evaluate(model: det.DetectorModel, scenes, voc11: bool = False, speed_images: int = 100) -> EvalReport:
    dets = detect_all(model, scenes)
    gts = [(s.gt_boxes, s.gt_labels) for s in scenes]
    k = model.config.num_classes
    ap50 = average_precision(dets, gts, 0.5, k, voc11)
    coco = [mean_ap(average_precision(dets, gts, t, k, voc11)) for t in COCO_THRESHOLDS]
    return EvalReport(
        ap_per_class=ap50,
        map50=mean_ap(ap50),
        map50_95=float(np.mean(coco)),
        parameter_count=model.parameter_count(),
        images_per_second=measure_speed(model, scenes, speed_images) if speed_images else 0.0,
    )
