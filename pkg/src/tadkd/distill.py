"""Distillation losses for the two-stage detector and their assembly into one training objective.

Teacher quantities are always computed under :func:`tadkd.tensor.no_grad`, so
no teacher parameter ever receives a gradient. A distillation term whose
coefficient is exactly zero is not built at all, which keeps the decayed
objective bit-identical to the plain detection loss at the end of training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import detector as det
from . import geometry as geo
from . import tensor as T
from .geometry import MaskConfig
from .tensor import Tensor


@dataclass(frozen=True)
class DistillConfig:
    beta1: float = 10.0
    beta2: float = 3.0
    lam: float = 0.6
    mask: MaskConfig = field(default_factory=MaskConfig)
    decay_enabled: bool = True
    enable_backbone: bool = True
    enable_cls: bool = True
    enable_reg: bool = True
    temperature: float = 1.0
    bce_on: str = "sigmoid"

    def __post_init__(self):
        if isinstance(self.mask, dict):
            object.__setattr__(self, "mask", MaskConfig(**self.mask))
        if min(self.beta1, self.beta2, self.lam) < 0:
            raise ValueError("beta1, beta2 and lambda must be nonnegative")
        if self.bce_on not in ("sigmoid", "softmax"):
            raise ValueError(f"bce_on must be 'sigmoid' or 'softmax', got {self.bce_on!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def any_enabled(self) -> bool:
        return self.enable_backbone or self.enable_cls or self.enable_reg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)


class DecayDomainError(ValueError):
    pass


def decay_gamma(t: float, total: int, enabled: bool = True) -> float:
    """Linear distillation decay ``1 - t / T``; constant 1 when disabled."""
    if total < 1:
        raise DecayDomainError(f"total epochs must be >= 1, got {total}")
    if t < 0 or t > total:
        raise DecayDomainError(f"epoch {t} outside [0, {total}]")
    if not enabled:
        return 1.0
    return 1.0 - t / total


@dataclass(frozen=True)
class DecaySchedule:
    total_epochs: int
    enabled: bool = True

    def gamma(self, t: float) -> float:
        return decay_gamma(t, self.total_epochs, self.enabled)


@dataclass
class Coefficients:
    """Effective (decayed, toggled) weights for one training step."""

    beta1: float
    beta2: float
    lam: float

    @classmethod
    def from_config(cls, config: DistillConfig, gamma: float) -> "Coefficients":
        return cls(
            beta1=gamma * config.beta1 if config.enable_cls else 0.0,
            beta2=gamma * config.beta2 if config.enable_reg else 0.0,
            lam=gamma * config.lam if config.enable_backbone else 0.0,
        )

    @property
    def active(self) -> bool:
        return self.beta1 > 0 or self.beta2 > 0 or self.lam > 0


# ----------------------------------------------------------------- backbone
def batch_masks(gt_boxes, stride: int, feat_h: int, feat_w: int, config: MaskConfig) -> np.ndarray:
    """(B, h, w) foreground masks from image-coordinate GT boxes."""
    return np.stack([geo.build_mask(geo.as_boxes(g) / stride, feat_w, feat_h, config) for g in gt_boxes])


def backbone_distill_loss(f_s: Tensor, f_t, mask) -> Tensor:
    """Masked feature imitation ``sum M (F_s - F_t)^2 / (2 N_a)``, ``N_a = C * sum M``.

    ``f_s``/``f_t``: (B, C, h, w) or (C, h, w); ``mask``: matching (B, h, w) or (h, w).
    The teacher map is treated as a constant.
    """
    ft = f_t.data if isinstance(f_t, Tensor) else np.asarray(f_t, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if f_s.shape != ft.shape:
        raise T.ShapeError(f"backbone_distill_loss: student {f_s.shape} vs teacher {ft.shape}")
    if f_s.ndim == 3:
        f_s = T.reshape(f_s, (1,) + f_s.shape)
        ft = ft[None]
        m = m[None]
    if m.shape != (f_s.shape[0],) + f_s.shape[2:]:
        raise T.ShapeError(f"backbone_distill_loss: mask {m.shape} vs features {f_s.shape}")
    n_a = f_s.shape[1] * m.sum()
    if n_a <= 0:
        return Tensor(0.0)
    diff = T.sub(f_s, Tensor(ft))
    weighted = T.mul(T.mul(diff, diff), Tensor(m[:, None, :, :]))
    return T.scale(T.reduce_sum(weighted), 1.0 / (2.0 * n_a))


# ---------------------------------------------------------- proposal sharing
@dataclass
class SharedHeadOutputs:
    soft_labels: np.ndarray  # (Np, C'+1) teacher probabilities
    teacher_boxes: np.ndarray  # (Np, 4) decoded teacher regression
    proposal_boxes: np.ndarray  # (Np, 4)
    gt_boxes: np.ndarray  # (Np, 4)

    def __len__(self) -> int:
        return len(self.proposal_boxes)


def share_proposals(teacher: det.DetectorModel, teacher_features, proposal_boxes: np.ndarray,
                    batch_index: np.ndarray, labels: np.ndarray, gt_boxes: np.ndarray,
                    temperature: float = 1.0) -> SharedHeadOutputs:
    """Run the teacher's heads on the student's positive proposals.

    ``labels`` are the positives' GT classes; the teacher box is decoded from
    the teacher's deltas for that class.
    """
    n_cls = teacher.config.num_classes + 1
    proposal_boxes = geo.as_boxes(proposal_boxes)
    if len(proposal_boxes) == 0:
        return SharedHeadOutputs(np.zeros((0, n_cls)), np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)))
    feats = teacher_features if isinstance(teacher_features, Tensor) else Tensor(teacher_features)
    with T.no_grad():
        pooled = det.roi_pool_batch(feats, proposal_boxes, batch_index, teacher.config.stride, teacher.config.roi_size)
        logits, deltas = det.heads_forward(teacher, pooled)
        soft = T.softmax(T.scale(logits, 1.0 / temperature)).data
        tdeltas = det.class_deltas(deltas, labels).data
    return SharedHeadOutputs(
        soft_labels=soft,
        teacher_boxes=det.decode_head_deltas(teacher.config, tdeltas, proposal_boxes),
        proposal_boxes=proposal_boxes,
        gt_boxes=geo.as_boxes(gt_boxes),
    )


# ---------------------------------------------------------- classification
def soft_label_bce(student_logits: Tensor, soft_labels: np.ndarray, bce_on: str = "sigmoid") -> Tensor:
    """Per-sample BCE summed over classes, averaged over samples."""
    n = student_logits.shape[0]
    y = Tensor(soft_labels)
    if bce_on == "sigmoid":
        per = det.binary_cross_entropy_with_logits(student_logits, soft_labels)
    else:
        p = T.softmax(student_logits)
        eps = 1e-12
        pos = T.mul(y, T.log(p, eps))
        neg = T.mul(Tensor(1.0 - soft_labels), T.log(T.sub(Tensor(1.0), p), eps))
        per = T.scale(T.add(pos, neg), -1.0)
    return T.scale(T.reduce_sum(per), 1.0 / n)


def cls_distill_loss(student_logits: Tensor, hard_labels, soft_labels, positive_indices, beta1_eff: float,
                     bce_on: str = "sigmoid") -> Tensor:
    """Mean hard-label CE over all proposals + ``beta1_eff`` x mean soft-label BCE over positives."""
    hard_labels = np.asarray(hard_labels, dtype=np.int64)
    positive_indices = np.asarray(positive_indices, dtype=np.int64)
    n = student_logits.shape[0]
    if positive_indices.size and (positive_indices.min() < 0 or positive_indices.max() >= n):
        raise IndexError(f"positive index out of range for {n} proposals")
    loss = det.cross_entropy(student_logits, hard_labels)
    if beta1_eff > 0 and positive_indices.size:
        soft = soft_label_bce(T.gather_rows(student_logits, positive_indices), np.asarray(soft_labels), bce_on)
        loss = T.add(loss, T.scale(soft, beta1_eff))
    return loss


# ---------------------------------------------------------------- regression
def reg_distill_gate(r_p, r_t, r_gt) -> bool:
    """True iff the teacher box is strictly closer (IoU) to the GT than the proposal."""
    return geo.iou(r_t, r_gt) > geo.iou(r_p, r_gt)


def reg_gates(r_p: np.ndarray, r_t: np.ndarray, r_gt: np.ndarray) -> np.ndarray:
    return geo.paired_iou(r_t, r_gt) > geo.paired_iou(r_p, r_gt)


def reg_distill_loss(student_deltas: Tensor, r_p: np.ndarray, r_t: Optional[np.ndarray], r_gt: np.ndarray,
                     beta2_eff: float, delta_weights=(1.0, 1.0, 1.0, 1.0)) -> Tensor:
    """Smooth-L1 to the GT plus gated smooth-L1 to the teacher box, both in delta space.

    ``student_deltas`` are the (Np, 4) class-specific deltas of the positives,
    expressed in units scaled by ``delta_weights``; each term is averaged over Np.
    """
    w = np.asarray(delta_weights, dtype=np.float64)
    r_p = geo.as_boxes(r_p)
    n_p = len(r_p)
    if n_p == 0:
        return Tensor(0.0)
    loss = det.regression_loss(student_deltas, geo.encode_deltas(r_p, r_gt) * w, n_p)
    if beta2_eff > 0 and r_t is not None:
        r_t = geo.as_boxes(r_t)
        gate = reg_gates(r_p, r_t, r_gt)
        if gate.any():
            idx = np.nonzero(gate)[0]
            targets = geo.encode_deltas(r_p[idx], r_t[idx]) * w
            dist = det.regression_loss(T.gather_rows(student_deltas, idx), targets, n_p)
            loss = T.add(loss, T.scale(dist, beta2_eff))
    return loss


# --------------------------------------------------------------------- total
def total_loss(l_bk: Optional[Tensor], l_cls: Tensor, l_reg: Tensor, l_rpn: Tensor, lambda_eff: float) -> Tensor:
    """``lambda_eff * L_bk + L_cls + L_reg + L_rpn``; the backbone term is dropped when its weight is 0."""
    rest = T.add(T.add(l_cls, l_reg), l_rpn)
    if l_bk is None or lambda_eff == 0:
        return rest
    return T.add(T.scale(l_bk, lambda_eff), rest)


@dataclass
class LossParts:
    total: Tensor
    l_bk: float
    l_cls: float
    l_reg: float
    l_rpn: float
    detection: float  # hard CE + hard smooth-L1 + RPN, logged separately
    gate_rate: float = float("nan")


def distilled_step_loss(student_out: det.ForwardResult, teacher: Optional[det.DetectorModel], images: np.ndarray,
                        gt_boxes, config: Optional[DistillConfig], coeffs: Optional[Coefficients]) -> LossParts:
    """Assemble the training objective for one batch.

    With no teacher, or all effective coefficients zero, this is exactly the
    plain detection loss.
    """
    out = student_out
    hard_cls = det.hard_cls_loss(out)
    hard_reg = det.hard_reg_loss(out)
    detection = hard_cls.item() + hard_reg.item() + out.rpn_loss.item()
    if teacher is None or config is None or coeffs is None or not coeffs.active:
        total = total_loss(None, hard_cls, hard_reg, out.rpn_loss, 0.0)
        return LossParts(total, 0.0, hard_cls.item(), hard_reg.item(), out.rpn_loss.item(), detection)

    with T.no_grad():
        f_t = det.backbone_forward(teacher, images)

    l_bk = None
    if coeffs.lam > 0:
        _, _, fh, fw = out.features.shape
        masks = batch_masks(gt_boxes, teacher.config.stride, fh, fw, config.mask)
        l_bk = backbone_distill_loss(out.features, f_t, masks)

    pos = out.positive
    pos_labels = out.labels[pos]
    shared = None
    if (coeffs.beta1 > 0 or coeffs.beta2 > 0) and len(pos):
        shared = share_proposals(
            teacher, f_t, out.boxes[pos], out.batch_index[pos], pos_labels, out.pos_gt_boxes, config.temperature
        )

    l_cls = cls_distill_loss(
        out.logits, out.labels, None if shared is None else shared.soft_labels, pos, coeffs.beta1, config.bce_on
    )
    gate_rate = float("nan")
    if len(pos):
        student_pos = det.class_deltas(T.gather_rows(out.deltas, pos), pos_labels)
        r_t = None if shared is None else shared.teacher_boxes
        l_reg = reg_distill_loss(
            student_pos, out.boxes[pos], r_t, out.pos_gt_boxes, coeffs.beta2, out.config.head_delta_weights
        )
        if r_t is not None:
            gate_rate = float(reg_gates(out.boxes[pos], r_t, out.pos_gt_boxes).mean())
    else:
        l_reg = Tensor(0.0)
    total = total_loss(l_bk, l_cls, l_reg, out.rpn_loss, coeffs.lam)
    return LossParts(
        total=total,
        l_bk=0.0 if l_bk is None else l_bk.item(),
        l_cls=l_cls.item(),
        l_reg=l_reg.item(),
        l_rpn=out.rpn_loss.item(),
        detection=detection,
        gate_rate=gate_rate,
    )
