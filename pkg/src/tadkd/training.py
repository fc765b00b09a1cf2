"""Deterministic training loops for baseline, distilled and chained students."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import detector as det
from . import tensor as T
from .distill import Coefficients, DistillConfig, decay_gamma, distilled_step_loss
from .evaluation import EvalReport, evaluate, map_at
from .optim import SgdOptimizer, sgd_step


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 0.01
    lr_step_factor: float = 0.1
    warmup_iters: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    distill: Optional[DistillConfig] = None

    def __post_init__(self):
        if isinstance(self.distill, dict):
            object.__setattr__(self, "distill", DistillConfig.from_dict(self.distill))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def lr_step_epoch(self) -> int:
        return math.ceil(2 * self.epochs / 3)

    def lr_at(self, epoch: int, iteration: int) -> float:
        """Learning rate for 1-based ``epoch``; linear warmup over the first iterations."""
        lr = self.learning_rate
        if epoch > self.lr_step_epoch:
            lr *= self.lr_step_factor
        if self.warmup_iters and iteration < self.warmup_iters:
            lr *= (iteration + 1) / self.warmup_iters
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = None if self.distill is None else self.distill.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    gamma: Optional[float]
    l_total: float
    l_bk: float
    l_cls: float
    l_reg: float
    l_rpn: float
    l_det: float
    val_map50: float
    gate_rate: float = float("nan")


@dataclass
class RunRecord:
    epochs: List[EpochRecord] = field(default_factory=list)
    final: Optional[EvalReport] = None

    CSV_COLUMNS = ("epoch", "gamma", "L_total", "L_bk", "L_cls", "L_reg", "L_rpn", "val_map50")

    def csv_rows(self) -> List[List[str]]:
        rows = []
        for e in self.epochs:
            rows.append(
                [str(e.epoch), "" if e.gamma is None else repr(e.gamma)]
                + [repr(float(v)) for v in (e.l_total, e.l_bk, e.l_cls, e.l_reg, e.l_rpn, e.val_map50)]
            )
        return rows


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_detector(
    train_scenes: Sequence,
    config: TrainConfig,
    detector_config: Optional[det.DetectorConfig] = None,
    teacher: Optional[det.DetectorModel] = None,
    val_scenes: Optional[Sequence] = None,
    model: Optional[det.DetectorModel] = None,
    log: Optional[Callable[[str], None]] = None,
    final_eval_scenes: Optional[Sequence] = None,
):
    """Train a detector, distilling from ``teacher`` when one is given with ``config.distill``.

    Returns ``(model, RunRecord)``. Bit-for-bit deterministic in ``config.seed``.
    """
    if model is None:
        model = det.DetectorModel.init(detector_config or det.DetectorConfig.student(), seed=config.seed)
    if model.frozen:
        raise det.ConfigMismatchError("cannot train a frozen (teacher) model as a student")
    distill_cfg = config.distill if teacher is not None else None
    if teacher is not None:
        det.check_distill_pair(model.config, teacher.config)
        if not teacher.frozen:
            teacher.freeze()
    params = model.parameters()
    opt = SgdOptimizer(params, config.learning_rate, config.momentum, config.weight_decay)
    record = RunRecord()
    n = len(train_scenes)
    if n == 0:
        raise ValueError("empty training set")
    iteration = 0
    use_distill = distill_cfg is not None and distill_cfg.any_enabled
    for epoch in range(1, config.epochs + 1):
        gamma = decay_gamma(epoch, config.epochs, distill_cfg.decay_enabled) if use_distill else None
        coeffs = Coefficients.from_config(distill_cfg, gamma) if use_distill else None
        order = epoch_order(config.seed, epoch, n)
        sums = np.zeros(7)
        gate_rates = []
        batches = 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch = [train_scenes[i] for i in idx]
            images = np.stack([s.image for s in batch])
            gt_boxes = [s.gt_boxes for s in batch]
            gt_labels = [s.gt_labels for s in batch]
            rng = np.random.default_rng([config.seed, epoch, bi, 1])
            out = det.forward_train(model, images, gt_boxes, gt_labels, rng)
            parts = distilled_step_loss(out, teacher if use_distill else None, images, gt_boxes, distill_cfg, coeffs)
            values = np.array([parts.total.item(), parts.l_bk, parts.l_cls, parts.l_reg, parts.l_rpn, parts.detection, 0.0])
            if not np.all(np.isfinite(values)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {bi}: total={values[0]} L_bk={values[1]} "
                    f"L_cls={values[2]} L_reg={values[3]} L_rpn={values[4]}"
                )
            T.backward(parts.total)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.learning_rate = config.lr_at(epoch, iteration)
            sgd_step(opt, params)
            sums += values
            if not math.isnan(parts.gate_rate):
                gate_rates.append(parts.gate_rate)
            batches += 1
            iteration += 1
        mean = sums / batches
        val = map_at(model, val_scenes) if val_scenes else float("nan")
        rec = EpochRecord(
            epoch=epoch,
            gamma=gamma,
            l_total=mean[0],
            l_bk=mean[1],
            l_cls=mean[2],
            l_reg=mean[3],
            l_rpn=mean[4],
            l_det=mean[5],
            val_map50=val,
            gate_rate=float(np.mean(gate_rates)) if gate_rates else float("nan"),
        )
        record.epochs.append(rec)
        if log is not None:
            g = "-" if gamma is None else f"{gamma:.3f}"
            log(
                f"epoch {epoch:2d}/{config.epochs} gamma={g} L={rec.l_total:.4f} bk={rec.l_bk:.4f} "
                f"cls={rec.l_cls:.4f} reg={rec.l_reg:.4f} rpn={rec.l_rpn:.4f} val_mAP50={val:.4f}"
            )
    if final_eval_scenes is not None:
        record.final = evaluate(model, final_eval_scenes)
    return model, record
