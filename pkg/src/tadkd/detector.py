"""A miniature two-stage detector built on :mod:`tadkd.tensor`.

Pipeline: strided conv backbone -> single feature map -> anchor-based proposal
stage (objectness + deltas, NMS) -> area-weighted RoI pooling -> two hidden
fully connected layers -> class logits and class-specific box deltas.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from . import tensor as T
from .tensor import Tensor


class ConfigMismatchError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    backbone_channels: Tuple[int, ...] = (16, 32, 64)
    backbone_out_channels: int = 64
    stride: int = 8
    anchor_scales: Tuple[float, ...] = (12.0, 20.0, 28.0)
    anchor_aspects: Tuple[float, ...] = (1.0, 0.5, 2.0)
    proposal_count: int = 64
    positive_iou: float = 0.5
    roi_size: int = 3
    num_classes: int = 3
    head_hidden: int = 128
    stage_depth: int = 1
    rpn_nms_iou: float = 0.7
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch: int = 32
    head_delta_weights: Tuple[float, ...] = (10.0, 10.0, 5.0, 5.0)
    name: str = "student"

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        object.__setattr__(self, "anchor_scales", tuple(float(s) for s in self.anchor_scales))
        object.__setattr__(self, "anchor_aspects", tuple(float(a) for a in self.anchor_aspects))
        object.__setattr__(self, "head_delta_weights", tuple(float(a) for a in self.head_delta_weights))
        if len(self.head_delta_weights) != 4 or min(self.head_delta_weights) <= 0:
            raise ConfigMismatchError("head_delta_weights must be four positive numbers")
        if 2 ** len(self.backbone_channels) != self.stride:
            raise ConfigMismatchError(
                f"stride {self.stride} does not match {len(self.backbone_channels)} stride-2 stages"
            )
        if not 0 < self.positive_iou < 1:
            raise ConfigMismatchError(f"positive_iou must lie in (0, 1), got {self.positive_iou}")
        if self.proposal_count < 1:
            raise ConfigMismatchError("proposal_count must be >= 1")
        if self.roi_size < 1 or self.stage_depth < 1 or self.num_classes < 1:
            raise ConfigMismatchError("roi_size, stage_depth and num_classes must be >= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_aspects)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("backbone_channels", "anchor_scales", "anchor_aspects", "head_delta_weights"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)

    @classmethod
    def teacher(cls, **overrides) -> "DetectorConfig":
        base = dict(backbone_channels=(32, 64, 128), head_hidden=256, stage_depth=2, name="teacher")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def medium(cls, **overrides) -> "DetectorConfig":
        base = dict(backbone_channels=(24, 48, 96), head_hidden=192, stage_depth=1, name="medium")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def student(cls, **overrides) -> "DetectorConfig":
        return cls(**overrides)


def check_distill_pair(student: DetectorConfig, teacher: DetectorConfig) -> None:
    """Raise unless the two configs can be used as a student/teacher pair."""
    for key in ("backbone_out_channels", "stride", "num_classes", "roi_size"):
        a, b = getattr(student, key), getattr(teacher, key)
        if a != b:
            raise ConfigMismatchError(f"student {key}={a} but teacher {key}={b}")


# ---------------------------------------------------------------------- model
class DetectorModel:
    def __init__(self, config: DetectorConfig, params: "OrderedDict[str, Tensor]", frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = False
        if frozen:
            self.freeze()

    @classmethod
    def init(cls, config: DetectorConfig, seed: int = 0) -> "DetectorModel":
        rng = np.random.default_rng(seed)
        params: "OrderedDict[str, Tensor]" = OrderedDict()

        def conv(name, cout, cin, k, std=None):
            std = math.sqrt(2.0 / (cin * k * k)) if std is None else std
            params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

        def fc(name, cout, cin, std=None):
            std = math.sqrt(2.0 / cin) if std is None else std
            params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, size=(cout, cin)), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

        cin = 3
        for s, cout in enumerate(config.backbone_channels):
            for d in range(config.stage_depth):
                conv(f"backbone.stage{s}.conv{d}", cout, cin, 3)
                cin = cout
        c = config.backbone_out_channels
        conv("backbone.proj", c, cin, 1)
        a = config.num_anchors
        conv("rpn.objectness", a, c, 3, std=0.01)
        conv("rpn.deltas", 4 * a, c, 3, std=0.01)
        r = config.roi_size
        fc("head.fc1", config.head_hidden, r * r * c)
        fc("head.fc2", config.head_hidden, config.head_hidden)
        fc("head.cls", config.num_classes + 1, config.head_hidden, std=0.01)
        fc("head.reg", 4 * config.num_classes, config.head_hidden, std=0.001)
        return cls(config, params)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def freeze(self) -> "DetectorModel":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "DetectorModel":
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    def state_bytes(self) -> bytes:
        return b"".join(p.data.astype("<f8").tobytes() for p in self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


# ------------------------------------------------------------------- backbone
def backbone_forward(model: DetectorModel, images) -> Tensor:
    """(B, 3, H, W) images -> (B, C, H/stride, W/stride) features."""
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    h, w = x.shape[2:]
    if h % cfg.stride or w % cfg.stride:
        raise T.ShapeError(f"backbone: image {h}x{w} not divisible by stride {cfg.stride}")
    p = model.params
    for s in range(len(cfg.backbone_channels)):
        for d in range(cfg.stage_depth):
            name = f"backbone.stage{s}.conv{d}"
            x = T.relu(T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=2 if d == 0 else 1, padding=1))
    return T.conv2d(x, p["backbone.proj.weight"], p["backbone.proj.bias"])


# -------------------------------------------------------------------- anchors
def make_anchors(config: DetectorConfig, feat_h: int, feat_w: int) -> np.ndarray:
    """Anchors ordered (row, col, anchor), matching the flattened RPN outputs."""
    base = []
    for scale in config.anchor_scales:
        for aspect in config.anchor_aspects:
            w = scale / math.sqrt(aspect)
            h = scale * math.sqrt(aspect)
            base.append((-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h))
    base = np.array(base)
    s = config.stride
    cy, cx = np.meshgrid((np.arange(feat_h) + 0.5) * s, (np.arange(feat_w) + 0.5) * s, indexing="ij")
    shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def rpn_forward(model: DetectorModel, features: Tensor) -> Tuple[Tensor, Tensor]:
    """Objectness logits (B, K) and deltas (B, K, 4) with K = h * w * anchors."""
    p = model.params
    b, _, h, w = features.shape
    a = model.config.num_anchors
    obj = T.conv2d(features, p["rpn.objectness.weight"], p["rpn.objectness.bias"], padding=1)
    obj = T.reshape(T.transpose(obj, (0, 2, 3, 1)), (b, h * w * a))
    deltas = T.conv2d(features, p["rpn.deltas.weight"], p["rpn.deltas.bias"], padding=1)
    deltas = T.reshape(deltas, (b, a, 4, h, w))
    deltas = T.reshape(T.transpose(deltas, (0, 3, 4, 1, 2)), (b, h * w * a, 4))
    return obj, deltas


# ------------------------------------------------------------------ proposals
@dataclass
class ProposalBatch:
    boxes: np.ndarray  # (N, 4) image coordinates
    objectness: np.ndarray  # (N,)
    labels: Optional[np.ndarray] = None  # (N,) 0 = background
    matched_gt: Optional[np.ndarray] = None  # (N,) argmax-IoU GT index, -1 without GT
    max_iou: Optional[np.ndarray] = None

    @property
    def positive_indices(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.nonzero(self.labels > 0)[0]

    def __len__(self) -> int:
        return len(self.boxes)


def select_proposals(boxes: np.ndarray, scores: np.ndarray, count: int, nms_iou: float,
                     gt_boxes: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """NMS then top-``count``; pad with the best suppressed boxes; GT boxes go first when given."""
    keep = geo.nms(boxes, scores, nms_iou, max_keep=count)
    kept = np.zeros(len(boxes), dtype=bool)
    kept[keep] = True
    order = geo.score_order(scores)
    ranked = np.concatenate([np.array(keep, dtype=np.int64), order[~kept[order]]])
    n_gt = 0 if gt_boxes is None else min(len(gt_boxes), count)
    idx = ranked[: count - n_gt]
    out_boxes = boxes[idx]
    out_scores = scores[idx]
    if n_gt:
        out_boxes = np.concatenate([gt_boxes[:n_gt], out_boxes])
        out_scores = np.concatenate([np.ones(n_gt), out_scores])
    if len(out_boxes) < count:
        # fewer anchors than slots: repeat the ranking cyclically
        reps = np.resize(np.arange(len(out_boxes)), count)
        out_boxes, out_scores = out_boxes[reps], out_scores[reps]
    return out_boxes, out_scores


def propose(model: DetectorModel, features: Tensor, image_size: Tuple[int, int], train_mode: bool = False,
            gt_boxes: Optional[Sequence[np.ndarray]] = None, rpn_out=None) -> List[ProposalBatch]:
    """One :class:`ProposalBatch` of exactly ``proposal_count`` boxes per image."""
    cfg = model.config
    if rpn_out is None:
        with T.no_grad():
            rpn_out = rpn_forward(model, features)
    obj, deltas = rpn_out
    _, _, fh, fw = features.shape
    anchors = make_anchors(cfg, fh, fw)
    height, width = image_size
    scores = T._stable_sigmoid(obj.data)
    batches = []
    for b in range(features.shape[0]):
        boxes = geo.clip_boxes(geo.decode_deltas(deltas.data[b], anchors), width, height)
        gts = None
        if train_mode and gt_boxes is not None and len(gt_boxes[b]):
            gts = geo.as_boxes(gt_boxes[b])
        sel_boxes, sel_scores = select_proposals(boxes, scores[b], cfg.proposal_count, cfg.rpn_nms_iou, gts)
        batches.append(ProposalBatch(boxes=sel_boxes, objectness=sel_scores))
    return batches


def assign_proposals(proposals: ProposalBatch, gt_boxes, gt_labels, positive_iou: float) -> ProposalBatch:
    """Label each proposal with its argmax-IoU GT class when IoU >= ``positive_iou``."""
    n = len(proposals.boxes)
    gt_boxes = geo.as_boxes(gt_boxes)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n)
    if len(gt_boxes):
        ious = geo.iou_matrix(proposals.boxes, gt_boxes)
        matched = ious.argmax(axis=1)
        max_iou = ious[np.arange(n), matched]
        pos = max_iou >= positive_iou
        labels[pos] = np.asarray(gt_labels, dtype=np.int64)[matched[pos]]
    return replace(proposals, labels=labels, matched_gt=matched, max_iou=max_iou)


# ------------------------------------------------------------------ RoI pool
def _bin_weights(lo: np.ndarray, hi: np.ndarray, cells: int, bins: int, stride: int) -> np.ndarray:
    """(n, bins, cells) overlap weights for 1-D extents ``[lo, hi)`` in image pixels."""
    c0 = np.clip(np.floor(lo / stride), 0, cells - 1)
    c1 = np.clip(np.ceil(hi / stride), c0 + 1, cells)
    edges = c0[:, None] + (c1 - c0)[:, None] * np.arange(bins + 1)[None, :] / bins
    starts = np.arange(cells)[None, None, :]
    overlap = np.maximum(
        np.minimum(edges[:, 1:, None], starts + 1) - np.maximum(edges[:, :-1, None], starts), 0.0
    )
    return overlap / overlap.sum(axis=2, keepdims=True)


def roi_pool_matrix(boxes: np.ndarray, batch_index: np.ndarray, feat_h: int, feat_w: int, roi_size: int,
                    stride: int, batch: int) -> sp.csr_matrix:
    """Sparse (n_roi * R * R, batch * h * w) averaging operator.

    Each box is snapped outward to whole feature cells and split into R x R
    equal bins; a bin averages the piecewise-constant feature map over its area.
    """
    boxes = geo.as_boxes(boxes)
    n = len(boxes)
    r2 = roi_size * roi_size
    if n == 0:
        return sp.csr_matrix((0, batch * feat_h * feat_w))
    wx = _bin_weights(boxes[:, 0], boxes[:, 2], feat_w, roi_size, stride)
    wy = _bin_weights(boxes[:, 1], boxes[:, 3], feat_h, roi_size, stride)
    dense = np.einsum("nai,nbj->nabij", wy, wx).reshape(n * r2, feat_h * feat_w)
    rr, cc = np.nonzero(dense)
    offset = np.repeat(np.asarray(batch_index, dtype=np.int64), r2) * (feat_h * feat_w)
    return sp.csr_matrix(
        (dense[rr, cc], (rr, cc + offset[rr])),
        shape=(n * r2, batch * feat_h * feat_w),
    )


def roi_pool_batch(features: Tensor, boxes: np.ndarray, batch_index: np.ndarray, stride: int,
                   roi_size: int) -> Tensor:
    """Pool many boxes at once -> (n_roi, R * R * C), flattened in (row, col, channel) order."""
    b, c, h, w = features.shape
    flat = T.reshape(T.transpose(features, (0, 2, 3, 1)), (b * h * w, c))
    m = roi_pool_matrix(boxes, batch_index, h, w, roi_size, stride, b)
    pooled = T.const_matmul(m, flat)
    return T.reshape(pooled, (len(boxes), roi_size * roi_size * c))


def roi_pool(features: Tensor, box, roi_size: int, stride: int = 8) -> Tensor:
    """Single box on a (C, h, w) or (1, C, h, w) feature map -> (R, R, C)."""
    if features.ndim == 3:
        features = T.reshape(features, (1,) + features.shape)
    c = features.shape[1]
    out = roi_pool_batch(features, geo.as_boxes(box), np.zeros(1, dtype=np.int64), stride, roi_size)
    return T.reshape(out, (roi_size, roi_size, c))


# ---------------------------------------------------------------------- heads
def heads_forward(model: DetectorModel, roi_features: Tensor) -> Tuple[Tensor, Tensor]:
    """(n, R*R*C) pooled features -> class logits (n, C'+1) and deltas (n, 4*C')."""
    p = model.params
    x = roi_features
    if x.ndim != 2:
        x = T.reshape(x, (x.shape[0] if x.ndim == 4 else 1, -1))
    h = T.relu(T.linear(x, p["head.fc1.weight"], p["head.fc1.bias"]))
    h = T.relu(T.linear(h, p["head.fc2.weight"], p["head.fc2.bias"]))
    logits = T.linear(h, p["head.cls.weight"], p["head.cls.bias"])
    deltas = T.linear(h, p["head.reg.weight"], p["head.reg.bias"])
    return logits, deltas


def encode_head_targets(config: DetectorConfig, proposals, targets) -> np.ndarray:
    """Head regression targets: plain deltas scaled by ``head_delta_weights``."""
    return geo.encode_deltas(proposals, targets) * np.asarray(config.head_delta_weights)


def decode_head_deltas(config: DetectorConfig, deltas, proposals) -> np.ndarray:
    return geo.decode_deltas(np.asarray(deltas) / np.asarray(config.head_delta_weights), proposals)


def class_deltas(deltas: Tensor, labels: np.ndarray) -> Tensor:
    """Pick the 4 deltas of class ``labels[i]`` (1-based) for each row."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(labels))[:, None]
    cols = (labels[:, None] - 1) * 4 + np.arange(4)[None, :]
    return T.index_select(deltas, (np.broadcast_to(rows, cols.shape), cols))


# ------------------------------------------------------------------- RPN loss
def rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray, config: DetectorConfig,
                rng: Optional[np.random.Generator]):
    """Sampled anchor labels (1 pos, 0 neg, -1 ignore) and per-anchor regression targets."""
    k = len(anchors)
    labels = np.full(k, -1, dtype=np.int64)
    targets = np.zeros((k, 4))
    gt_boxes = geo.as_boxes(gt_boxes)
    if len(gt_boxes) == 0:
        labels[:] = 0
    else:
        ious = geo.iou_matrix(anchors, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best = ious[np.arange(k), best_gt]
        labels[best <= config.rpn_negative_iou] = 0
        labels[best >= config.rpn_positive_iou] = 1
        # every GT keeps its best anchor(s)
        gt_best = ious.max(axis=0)
        for g in range(len(gt_boxes)):
            if gt_best[g] > 0:
                hit = np.nonzero(ious[:, g] == gt_best[g])[0]
                labels[hit] = 1
                best_gt[hit] = g
        pos = labels == 1
        targets[pos] = geo.encode_deltas(anchors[pos], gt_boxes[best_gt[pos]])
    pos_idx = np.nonzero(labels == 1)[0]
    neg_idx = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos_idx), config.rpn_batch // 2)
    n_neg = min(len(neg_idx), config.rpn_batch - n_pos)
    if rng is not None:
        pos_idx = np.sort(rng.permutation(pos_idx)[:n_pos]) if len(pos_idx) > n_pos else pos_idx
        neg_idx = np.sort(rng.permutation(neg_idx)[:n_neg]) if len(neg_idx) > n_neg else neg_idx
    else:
        pos_idx, neg_idx = pos_idx[:n_pos], neg_idx[:n_neg]
    sampled = np.full(k, -1, dtype=np.int64)
    sampled[pos_idx] = 1
    sampled[neg_idx] = 0
    return sampled, targets


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise BCE(sigmoid(logits), targets) = softplus(z) - y z."""
    return T.sub(T.softplus(logits), T.mul(logits, Tensor(targets)))


def rpn_loss(model: DetectorModel, features: Tensor, anchors: np.ndarray, gt_boxes: Sequence[np.ndarray],
             rng: Optional[np.random.Generator] = None, rpn_out=None) -> Tensor:
    """Objectness BCE over sampled anchors plus smooth-L1 on positive-anchor deltas.

    Each term is normalized by its own sample count across the batch.
    """
    cfg = model.config
    obj, deltas = rpn_out if rpn_out is not None else rpn_forward(model, features)
    b = obj.shape[0]
    labels, targets = [], []
    for i in range(b):
        lab, tgt = rpn_targets(anchors, gt_boxes[i], cfg, rng)
        labels.append(lab)
        targets.append(tgt)
    labels = np.stack(labels)
    targets = np.stack(targets)
    sampled = np.nonzero(labels >= 0)
    positive = np.nonzero(labels == 1)
    n_s, n_p = len(sampled[0]), len(positive[0])
    cls = T.reduce_sum(binary_cross_entropy_with_logits(T.index_select(obj, sampled), labels[sampled].astype(float)))
    loss = T.scale(cls, 1.0 / max(n_s, 1))
    if n_p:
        diff = T.sub(T.index_select(deltas, positive), Tensor(targets[positive]))
        loss = T.add(loss, T.scale(T.reduce_sum(T.smooth_l1(diff)), 1.0 / n_p))
    return loss


# ------------------------------------------------------------- training pass
def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = T.log_softmax(logits)
    picked = T.index_select(logp, (np.arange(len(labels)), labels))
    return T.scale(T.reduce_sum(picked), -1.0 / max(len(labels), 1))


def regression_loss(student_deltas: Tensor, targets: np.ndarray, count: int) -> Tensor:
    """Smooth-L1 summed over the 4 components, averaged over ``count`` samples."""
    diff = T.sub(student_deltas, Tensor(targets))
    return T.scale(T.reduce_sum(T.smooth_l1(diff)), 1.0 / max(count, 1))


@dataclass
class ForwardResult:
    """Everything a training step needs from one student pass over a batch."""

    features: Tensor
    proposals: List[ProposalBatch]
    batch_index: np.ndarray  # image index of every concatenated proposal
    boxes: np.ndarray  # (R, 4) all proposals
    labels: np.ndarray  # (R,)
    positive: np.ndarray  # indices into the concatenated proposals
    pos_gt_boxes: np.ndarray  # (Np, 4) matched GT of each positive
    logits: Tensor
    deltas: Tensor
    rpn_loss: Tensor
    config: DetectorConfig = field(default_factory=DetectorConfig)


def forward_train(model: DetectorModel, images: np.ndarray, gt_boxes: Sequence[np.ndarray],
                  gt_labels: Sequence[np.ndarray], rng: Optional[np.random.Generator] = None,
                  proposals: Optional[List[ProposalBatch]] = None) -> ForwardResult:
    """One student pass. Proposals are constants of the graph (no gradient flows
    through box selection); pass ``proposals`` to pin them, e.g. for gradient checks."""
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    features = backbone_forward(model, images)
    rpn_out = rpn_forward(model, features)
    _, _, fh, fw = features.shape
    anchors = make_anchors(cfg, fh, fw)
    l_rpn = rpn_loss(model, features, anchors, gt_boxes, rng, rpn_out=rpn_out)
    if proposals is None:
        proposals = propose(model, features, images.shape[2:], train_mode=True, gt_boxes=gt_boxes, rpn_out=rpn_out)
    proposals = [assign_proposals(p, g, l, cfg.positive_iou) for p, g, l in zip(proposals, gt_boxes, gt_labels)]
    batch_index = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(proposals)])
    boxes = np.concatenate([p.boxes for p in proposals])
    labels = np.concatenate([p.labels for p in proposals])
    pos_gt = []
    for i, p in enumerate(proposals):
        idx = p.positive_indices
        pos_gt.append(geo.as_boxes(gt_boxes[i])[p.matched_gt[idx]] if len(idx) else np.zeros((0, 4)))
    positive = np.nonzero(labels > 0)[0]
    pooled = roi_pool_batch(features, boxes, batch_index, cfg.stride, cfg.roi_size)
    logits, deltas = heads_forward(model, pooled)
    return ForwardResult(
        features=features,
        proposals=proposals,
        batch_index=batch_index,
        boxes=boxes,
        labels=labels,
        positive=positive,
        pos_gt_boxes=np.concatenate(pos_gt).reshape(-1, 4),
        logits=logits,
        deltas=deltas,
        rpn_loss=l_rpn,
        config=cfg,
    )


def hard_cls_loss(out: ForwardResult) -> Tensor:
    return cross_entropy(out.logits, out.labels)


def hard_reg_loss(out: ForwardResult) -> Tensor:
    pos = out.positive
    if len(pos) == 0:
        return Tensor(0.0)
    student = class_deltas(T.gather_rows(out.deltas, pos), out.labels[pos])
    targets = encode_head_targets(out.config, out.boxes[pos], out.pos_gt_boxes)
    return regression_loss(student, targets, len(pos))


def detection_loss(out: ForwardResult) -> Tensor:
    """Undistilled objective: hard-label CE + positive smooth-L1 + RPN."""
    return T.add(T.add(hard_cls_loss(out), hard_reg_loss(out)), out.rpn_loss)


# -------------------------------------------------------------- checkpoints
CHECKPOINT_MAGIC = b"TADKD001"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: DetectorModel, path) -> None:
    manifest = []
    offset = 0
    chunks = []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "tensors": manifest, "payload_bytes": offset},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, frozen: bool = True) -> DetectorModel:
    """Load a model; frozen (no grads) unless ``frozen=False``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    payload = raw[12 + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {header.get('payload_bytes')}")
    config = DetectorConfig.from_dict(header["config"])
    expected = DetectorModel.init(config, seed=0)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    end_prev = 0
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected.params:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if expected.params[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, config implies {expected.params[name].shape}")
        nbytes = 8 * int(np.prod(shape))
        if off < end_prev or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} offset {off} overlaps or exceeds payload")
        end_prev = off + nbytes
        data = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)), offset=off).astype(np.float64)
        params[name] = Tensor(data.reshape(shape), requires_grad=True)
    missing = set(expected.params) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    params = OrderedDict((k, params[k]) for k in expected.params)
    return DetectorModel(config, params, frozen=frozen)
