"""Momentum SGD over :class:`~tadkd.tensor.Tensor` parameters."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class SgdOptimizer:
    """Heavy-ball SGD: ``v = mu * v + (g + wd * p)``, ``p -= lr * v``.

    Velocity buffers are keyed by parameter position, so pass the same
    parameter sequence on every step.
    """

    def __init__(self, params: Sequence[Tensor], learning_rate: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(optimizer: SgdOptimizer, params: Sequence[Tensor]) -> None:
    """Apply one momentum update to ``params`` and zero their grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradError(f"parameter {i} with shape {p.shape} has no gradient")
    for i, p in enumerate(params):
        g = p.grad
        if optimizer.weight_decay:
            g = g + optimizer.weight_decay * p.data
        v = optimizer.velocity.get(i)
        if v is None or optimizer.momentum == 0.0:
            v = np.array(g, copy=True)
        else:
            v *= optimizer.momentum
            v += g
        optimizer.velocity[i] = v
        p.data -= optimizer.learning_rate * v
        p.grad = None
