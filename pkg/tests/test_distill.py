import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadkd import detector as det
from tadkd import distill as kd
from tadkd import geometry as geo
from tadkd import tensor as T
from tadkd.geometry import Box, MaskConfig

import helpers


# ----------------------------------------------------------------- config
def test_config_defaults_and_validation():
    cfg = kd.DistillConfig()
    assert (cfg.beta1, cfg.beta2, cfg.lam) == (10.0, 3.0, 0.6)
    assert cfg.mask == MaskConfig("gaussian", 2.0, 2.0)
    assert cfg.decay_enabled and cfg.any_enabled
    with pytest.raises(ValueError):
        kd.DistillConfig(beta1=-1)
    with pytest.raises(ValueError):
        kd.DistillConfig(bce_on="tanh")
    assert kd.DistillConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------------ decay
def test_decay_examples():
    assert kd.decay_gamma(0, 12) == 1.0
    assert kd.decay_gamma(12, 12) == 0.0
    assert kd.decay_gamma(6, 12) == 0.5
    assert kd.decay_gamma(7, 12, enabled=False) == 1.0
    with pytest.raises(kd.DecayDomainError):
        kd.decay_gamma(13, 12)
    with pytest.raises(kd.DecayDomainError):
        kd.decay_gamma(-1, 12)


@given(st.integers(1, 100), st.data())
def test_decay_non_increasing(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    sched = kd.DecaySchedule(total)
    assert sched.gamma(b) <= sched.gamma(a)
    assert 0.0 <= sched.gamma(b) <= 1.0


def test_coefficients_toggle_and_scale():
    cfg = kd.DistillConfig(enable_reg=False)
    c = kd.Coefficients.from_config(cfg, 0.5)
    assert (c.beta1, c.beta2, c.lam) == (5.0, 0.0, 0.3)
    assert not kd.Coefficients.from_config(cfg, 0.0).active


# ---------------------------------------------------------------- backbone
def test_bk_golden_value():
    loss = kd.backbone_distill_loss(T.Tensor(np.full((1, 1, 1), 3.0)), np.full((1, 1, 1), 1.0), np.ones((1, 1)))
    assert abs(loss.item() - 2.0) < 1e-12


def test_bk_zero_cases():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(2, 4, 3, 3))
    assert kd.backbone_distill_loss(T.Tensor(f), f, np.ones((2, 3, 3))).item() == 0.0
    assert kd.backbone_distill_loss(T.Tensor(f), f + 1, np.zeros((2, 3, 3))).item() == 0.0


def test_bk_shape_errors():
    with pytest.raises(T.ShapeError):
        kd.backbone_distill_loss(T.Tensor(np.zeros((2, 3, 3))), np.zeros((2, 3, 4)), np.ones((3, 3)))
    with pytest.raises(T.ShapeError):
        kd.backbone_distill_loss(T.Tensor(np.zeros((2, 3, 3))), np.zeros((2, 3, 3)), np.ones((3, 4)))


def test_bk_all_ones_is_half_mse_and_mask_scale_invariant():
    rng = np.random.default_rng(1)
    fs, ft = rng.normal(size=(2, 5, 4, 4)), rng.normal(size=(2, 5, 4, 4))
    ones = kd.backbone_distill_loss(T.Tensor(fs), ft, np.ones((2, 4, 4))).item()
    assert abs(ones - 0.5 * np.mean((fs - ft) ** 2)) < 1e-12
    m = rng.uniform(size=(2, 4, 4))
    base = kd.backbone_distill_loss(T.Tensor(fs), ft, m).item()
    for k in (1e-3, 0.7, 13.0):
        assert abs(kd.backbone_distill_loss(T.Tensor(fs), ft, k * m).item() - base) < 1e-12


def test_bk_gradient_to_student_only():
    rng = np.random.default_rng(2)
    fs = T.Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    ft = T.Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    T.backward(kd.backbone_distill_loss(fs, ft, rng.uniform(size=(1, 4, 4))))
    assert fs.grad is not None and ft.grad is None
    mask = rng.uniform(size=(1, 4, 4))
    err = T.finite_diff_check(lambda x: kd.backbone_distill_loss(x, ft.data, mask), fs, 1e-5)
    assert err < 1e-8


def test_batch_masks_scale_boxes_by_stride():
    gts = [np.array([[8.0, 8.0, 40.0, 24.0]])]
    m = kd.batch_masks(gts, 8, 8, 8, MaskConfig("rectangle"))
    assert m.shape == (1, 8, 8)
    assert m[0, 1:3, 1:5].all() and m[0].sum() == 8


# -------------------------------------------------------------------- cls
def test_soft_bce_golden_value():
    logits = T.Tensor(np.zeros((1, 2)))
    v = kd.soft_label_bce(logits, np.array([[1.0, 0.0]])).item()
    assert abs(v - 2 * math.log(2)) < 1e-12
    assert abs(v - 1.3863) < 1e-4
    assert abs(kd.soft_label_bce(logits, np.array([[1.0, 0.0]]), "softmax").item() - 2 * math.log(2)) < 1e-10


def test_cls_loss_with_zero_beta_is_ce():
    rng = np.random.default_rng(3)
    logits = T.Tensor(rng.normal(size=(6, 4)))
    labels = np.array([0, 1, 0, 3, 2, 0])
    soft = rng.dirichlet(np.ones(4), size=3)
    a = kd.cls_distill_loss(logits, labels, soft, [1, 3, 4], 0.0).item()
    assert a == det.cross_entropy(logits, labels).item()
    b = kd.cls_distill_loss(logits, labels, soft, [1, 3, 4], 2.5).item()
    expected = a + 2.5 * kd.soft_label_bce(T.Tensor(logits.data[[1, 3, 4]]), soft).item()
    assert abs(b - expected) < 1e-12


def test_cls_loss_perfect_student_vanishes():
    logits = np.full((2, 3), -40.0)
    logits[0, 1] = 40.0
    logits[1, 2] = 40.0
    soft = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    v = kd.cls_distill_loss(T.Tensor(logits), [1, 2], soft, [0, 1], 10.0).item()
    assert v < 1e-15


def test_cls_loss_bad_index():
    with pytest.raises(IndexError):
        kd.cls_distill_loss(T.Tensor(np.zeros((3, 4))), [0, 0, 1], np.ones((1, 4)) / 4, [3], 1.0)


# ------------------------------------------------------------------ gate
def test_gate_examples():
    gt = Box(0, 0, 10, 10)
    p = Box(2, 0, 12, 10)
    assert kd.reg_distill_gate(p, gt, gt)
    assert not kd.reg_distill_gate(p, p, gt)
    # proposal IoU 0.6, teacher IoU 0.55 -> closed gate
    def shifted(iou):  # shift a 10x10 box right so that IoU with gt is ``iou``
        s = 10 * (1 - iou) / (1 + iou)
        return Box(s, 0, 10 + s, 10)

    r_p, r_t = shifted(0.6), shifted(0.55)
    assert geo.iou(r_p, gt) == pytest.approx(0.6, abs=1e-12)
    assert geo.iou(r_t, gt) == pytest.approx(0.55, abs=1e-12)
    assert not kd.reg_distill_gate(r_p, r_t, gt)


@settings(max_examples=100)
@given(st.lists(st.floats(0.5, 30), min_size=12, max_size=12), st.floats(0.05, 20))
def test_gate_coordinate_scale_invariant(v, s):
    def mk(i):
        return Box(v[i], v[i + 1], v[i] + v[i + 2], v[i + 1] + v[i + 3])

    p, t, g = mk(0), mk(4), mk(8)
    ip, it = geo.iou(p, g), geo.iou(t, g)
    if abs(ip - it) > 1e-9:  # exact ties may flip under rounding
        assert kd.reg_distill_gate(p, t, g) == kd.reg_distill_gate(p.scaled(s), t.scaled(s), g.scaled(s))


# ------------------------------------------------------------- regression
def _reg_case():
    r_p = np.array([[10.0, 10.0, 30.0, 30.0]])
    r_gt = np.array([[12.0, 10.0, 32.0, 30.0]])
    r_t = np.array([[11.0, 10.0, 31.0, 30.0]])
    return r_p, r_t, r_gt


def test_reg_all_gates_closed_is_plain():
    r_p, _, r_gt = _reg_case()
    s = T.Tensor(np.array([[0.3, -0.2, 0.1, 0.05]]))
    plain = det.regression_loss(s, geo.encode_deltas(r_p, r_gt), 1).item()
    assert kd.reg_distill_loss(s, r_p, r_p.copy(), r_gt, 3.0).item() == plain
    assert kd.reg_distill_loss(s, r_p, None, r_gt, 3.0).item() == plain


def test_reg_distill_term_golden():
    r_p, r_t, r_gt = _reg_case()
    t_teacher = geo.encode_deltas(r_p, r_t)
    s = T.Tensor(t_teacher + np.array([[0.5, 0.0, 0.0, 0.0]]))
    plain = det.regression_loss(s, geo.encode_deltas(r_p, r_gt), 1).item()
    total = kd.reg_distill_loss(s, r_p, r_t, r_gt, 1.5).item()
    assert abs((total - plain) - 1.5 * 0.125) < 1e-12
    at_teacher = kd.reg_distill_loss(T.Tensor(t_teacher), r_p, r_t, r_gt, 1.5).item()
    assert abs(at_teacher - det.regression_loss(T.Tensor(t_teacher), geo.encode_deltas(r_p, r_gt), 1).item()) < 1e-15


def test_reg_delta_weights_scale_targets():
    r_p, r_t, r_gt = _reg_case()
    w = np.array([10.0, 10.0, 5.0, 5.0])
    s = np.array([[0.2, 0.1, -0.3, 0.4]])
    a = kd.reg_distill_loss(T.Tensor(s), r_p, r_t, r_gt, 2.0, w).item()
    expected = geo.smooth_l1(s - geo.encode_deltas(r_p, r_gt) * w) + 2.0 * geo.smooth_l1(
        s - geo.encode_deltas(r_p, r_t) * w)
    assert abs(a - expected) < 1e-12


def test_reg_empty_is_zero():
    assert kd.reg_distill_loss(T.Tensor(np.zeros((0, 4))), np.zeros((0, 4)), None, np.zeros((0, 4)), 3.0).item() == 0


def _reg_head_grad(r_t):
    r_p, _, r_gt = _reg_case()
    s = T.Tensor(np.array([[0.3, -0.2, 0.1, 0.05]]), requires_grad=True)
    with_kd = kd.reg_distill_loss(s, r_p, r_t, r_gt, 3.0)
    T.backward(with_kd)
    g = s.grad.copy()
    s.grad = None
    T.backward(det.regression_loss(s, geo.encode_deltas(r_p, r_gt), 1))
    return g - s.grad


def test_gate_controls_distillation_gradient():
    r_p, r_t, r_gt = _reg_case()
    worse = np.array([[8.0, 10.0, 28.0, 30.0]])
    assert np.all(_reg_head_grad(worse) == 0.0)
    assert np.any(_reg_head_grad(r_t) != 0.0)


# ------------------------------------------------------------------ total
def test_total_loss_examples():
    v = kd.total_loss(T.Tensor(2.0), T.Tensor(1.0), T.Tensor(1.0), T.Tensor(0.5), 0.3).item()
    assert abs(v - 3.1) < 1e-12
    z = T.Tensor(0.0)
    assert kd.total_loss(z, z, z, z, 0.6).item() == 0.0


# --------------------------------------------------------- share proposals
def test_share_proposals_empty_and_uniform():
    teacher = det.DetectorModel.init(helpers.MICRO_TEACHER, seed=0).freeze()
    f = T.Tensor(np.ones((1, 4, 2, 2)))
    empty = kd.share_proposals(teacher, f, np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 4)))
    assert len(empty) == 0 and empty.soft_labels.shape == (0, 4)
    teacher.params["head.cls.weight"].data[...] = 0.0
    teacher.params["head.cls.bias"].data[...] = 0.0
    boxes = np.array([[0.0, 0.0, 8.0, 8.0], [4.0, 4.0, 16.0, 12.0]])
    out = kd.share_proposals(teacher, f, boxes, np.array([0, 0]), np.array([1, 2]), boxes)
    np.testing.assert_allclose(out.soft_labels, 0.25, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.soft_labels.sum(axis=1), 1.0, atol=1e-9)
    assert out.teacher_boxes.shape == (2, 4)


# --------------------------------------------------- micro-scene gradients
@pytest.mark.parametrize("kind", ["bk", "cls", "reg", "total"])
def test_distillation_gradients(kind):
    problem = helpers.micro_problem(1)
    assert helpers.max_param_grad_error(problem, kind) <= 1e-5


def test_decay_endpoint_bit_identical_gradient():
    problem = helpers.micro_problem(2)
    s = problem.student

    def grads(kind, gamma):
        for p in s.parameters():
            p.grad = None
        T.backward(helpers.micro_loss(problem, kind, gamma))
        return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in s.parameters()]

    plain = grads("detection", 0.5)
    at_end = grads("total", 0.0)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(plain, at_end))
    mid = grads("total", 0.5)
    assert any(a.tobytes() != b.tobytes() for a, b in zip(plain, mid))


def test_teacher_never_receives_gradients():
    problem = helpers.micro_problem(0)
    before = problem.teacher.state_bytes()
    T.backward(helpers.micro_loss(problem, "total"))
    assert all(p.grad is None for p in problem.teacher.parameters())
    assert problem.teacher.state_bytes() == before
