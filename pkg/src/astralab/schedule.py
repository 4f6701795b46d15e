"""Optimization schedule pieces: warmup+cosine learning rate, early stopping."""

from __future__ import annotations

import math


def warmup_cosine_lr(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Learning rate applied at 1-based step `step`.

    Linear ramp to peak over warmup_steps, then cosine decay reaching
    exactly 0 at total_steps; the two pieces agree at the junction.
    """
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside [1, {total_steps}]")
    if warmup_steps > total_steps:
        raise ValueError(
            f"warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class EarlyStopper:
    """Patience-based stop on a maximized validation metric.

    Training stops once the metric has gone `patience` consecutive epochs
    without improving on the best value seen.
    """

    def __init__(self, patience: int = 7):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch's metric; returns True when training should stop."""
        if self.best is None or value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience
