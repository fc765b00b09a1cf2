"""Shared fixtures: a micro detection problem small enough for exhaustive finite differences."""

from dataclasses import dataclass, replace
from typing import Callable, List

import numpy as np

from tadkd import detector as det
from tadkd import distill as kd
from tadkd import tensor as T
from tadkd.synth_data import SceneConfig, generate_scene

MICRO_SCENE = SceneConfig(image_size=16, objects_per_image=(1, 1), object_scale=(6.0, 10.0))
MICRO_STUDENT = det.DetectorConfig(
    backbone_channels=(2, 3, 3),
    backbone_out_channels=4,
    anchor_scales=(6.0, 10.0),
    anchor_aspects=(1.0,),
    proposal_count=4,
    roi_size=2,
    head_hidden=6,
    rpn_batch=8,
    name="micro",
)
MICRO_TEACHER = replace(MICRO_STUDENT, backbone_channels=(3, 4, 4), head_hidden=8, name="micro-teacher")

LOSS_KINDS = ("bk", "cls", "reg", "total", "rpn", "detection")


@dataclass
class MicroProblem:
    student: det.DetectorModel
    teacher: det.DetectorModel
    images: np.ndarray
    gt_boxes: List[np.ndarray]
    gt_labels: List[np.ndarray]
    proposals: List[det.ProposalBatch]


def _jitter_biases(model: det.DetectorModel, rng: np.random.Generator) -> det.DetectorModel:
    # zero biases put relu units exactly on their kink when the input is zero; move them off it
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(0.02, 0.2, p.shape) * rng.choice([-1.0, 1.0], p.shape)
    return model


def micro_problem(seed: int = 0) -> MicroProblem:
    """One 16x16 scene with one object; N = 4 fixed proposals: the GT, a shifted
    positive, and two background boxes."""
    rng = np.random.default_rng(seed + 100)
    scene = generate_scene(seed, MICRO_SCENE)
    student = _jitter_biases(det.DetectorModel.init(MICRO_STUDENT, seed=seed + 1), rng)
    teacher = _jitter_biases(det.DetectorModel.init(MICRO_TEACHER, seed=seed + 2), rng).freeze()
    images = scene.image[None]
    gt = scene.gt_boxes[0]
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    shifted = gt + np.array([0.1 * w, -0.05 * h, 0.1 * w, 0.0])
    far = np.array([0.0, 0.0, 16.0, 16.0]) if gt[0] > 4 else np.array([8.0, 8.0, 16.0, 16.0])
    boxes = np.stack([gt, shifted, far, np.array([0.0, 0.0, 16.0, 16.0])])
    proposals = [det.ProposalBatch(boxes=boxes, objectness=np.array([1.0, 0.9, 0.5, 0.4]))]
    return MicroProblem(student, teacher, images, [scene.gt_boxes], [scene.gt_labels], proposals)


def micro_loss(problem: MicroProblem, kind: str, gamma: float = 0.5) -> T.Tensor:
    """One of the training objectives on the micro problem, with proposals held fixed."""
    s, t = problem.student, problem.teacher
    out = det.forward_train(s, problem.images, problem.gt_boxes, problem.gt_labels, np.random.default_rng(0),
                            proposals=problem.proposals)
    if kind == "rpn":
        return out.rpn_loss
    if kind == "detection":
        return det.detection_loss(out)
    cfg = kd.DistillConfig()
    coeffs = kd.Coefficients.from_config(cfg, gamma)
    if kind == "total":
        return kd.distilled_step_loss(out, t, problem.images, problem.gt_boxes, cfg, coeffs).total
    with T.no_grad():
        f_t = det.backbone_forward(t, problem.images)
    if kind == "bk":
        _, _, fh, fw = out.features.shape
        masks = kd.batch_masks(problem.gt_boxes, s.config.stride, fh, fw, cfg.mask)
        return kd.backbone_distill_loss(out.features, f_t, masks)
    pos = out.positive
    shared = kd.share_proposals(t, f_t, out.boxes[pos], out.batch_index[pos], out.labels[pos], out.pos_gt_boxes)
    if kind == "cls":
        return kd.cls_distill_loss(out.logits, out.labels, shared.soft_labels, pos, coeffs.beta1)
    if kind == "reg":
        # halfway between proposal and GT: the gate passes wherever the proposal is not already exact
        r_p = out.boxes[pos]
        r_t = 0.5 * (r_p + out.pos_gt_boxes)
        student = det.class_deltas(T.gather_rows(out.deltas, pos), out.labels[pos])
        return kd.reg_distill_loss(student, r_p, r_t, out.pos_gt_boxes, coeffs.beta2, s.config.head_delta_weights)
    raise ValueError(kind)


def param_loss_fn(problem: MicroProblem, kind: str, name: str, gamma: float = 0.5) -> Callable[[T.Tensor], T.Tensor]:
    """``f(p)``: the loss with student parameter ``name`` replaced by ``p``."""

    def f(p):
        original = problem.student.params[name]
        problem.student.params[name] = p
        try:
            return micro_loss(problem, kind, gamma)
        finally:
            problem.student.params[name] = original

    return f


def max_param_grad_error(problem: MicroProblem, kind: str, step: float = 1e-5) -> float:
    worst = 0.0
    for name, p in problem.student.params.items():
        worst = max(worst, T.finite_diff_check(param_loss_fn(problem, kind, name), p, step))
    return worst


# ------------------------------------------------------- acceptance reporting
CRITERIA_LINES: List[str] = []


def report_criterion(number: int, name: str, ok: bool, evidence: str) -> None:
    line = f"ACCEPTANCE [{number}] {name}: {'PASS' if ok else 'FAIL'} ({evidence})"
    CRITERIA_LINES.append(line)
    print(line, flush=True)
