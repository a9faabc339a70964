"""Adaptive batch-size schedule: piecewise-constant batch growth coupled
with learning-rate decay, per-iteration warmup, and the effective
learning rate (lr / batch) bookkeeping that makes adaptive and fixed
schedules directly comparable.

Growing the batch by `batch_multiplier` while decaying the lr by
`lr_decay` at each interval multiplies the effective learning rate by
lr_decay / batch_multiplier, so e.g. doubling with decay 0.75 matches a
fixed-batch schedule decaying by 0.375.
"""

import math
from dataclasses import dataclass, asdict

from .errors import ConfigError


@dataclass(frozen=True)
class AdaBatchSchedule:
    base_lr: float
    base_batch: int
    interval_epochs: int
    lr_decay: float = 1.0
    batch_multiplier: int = 1
    warmup_epochs: int = 0
    warmup_ref_batch: int = 256
    max_batch: int = 2 ** 30
    micro_batch_cap: int = 2 ** 30
    total_epochs: int = 1

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"schedule.base_lr must be >= 0, got {self.base_lr}")
        if self.base_batch < 1:
            raise ConfigError(f"schedule.base_batch must be >= 1, got {self.base_batch}")
        if self.interval_epochs < 1:
            raise ConfigError(f"schedule.interval_epochs must be >= 1, got {self.interval_epochs}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"schedule.lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_multiplier < 1 or int(self.batch_multiplier) != self.batch_multiplier:
            raise ConfigError(
                f"schedule.batch_multiplier must be an integer >= 1, got {self.batch_multiplier}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"schedule.warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.warmup_ref_batch < 1:
            raise ConfigError(
                f"schedule.warmup_ref_batch must be >= 1, got {self.warmup_ref_batch}")
        if self.max_batch < 1:
            raise ConfigError(f"schedule.max_batch must be >= 1, got {self.max_batch}")
        if self.micro_batch_cap < 1:
            raise ConfigError(
                f"schedule.micro_batch_cap must be >= 1, got {self.micro_batch_cap}")
        if self.total_epochs < 1:
            raise ConfigError(f"schedule.total_epochs must be >= 1, got {self.total_epochs}")

    @property
    def lr_target(self):
        """Post-warmup base learning rate (linear scaling by batch ratio)."""
        if self.warmup_epochs == 0:
            return self.base_lr
        return self.base_lr * (self.base_batch / self.warmup_ref_batch)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ScheduleRow:
    epoch: int
    batch_size: int
    lr: float
    effective_lr: float
    warmup_active: bool
    micro_batches_per_step: int


def batch_size_at(s, epoch, dataset_size=None):
    """Batch size for an epoch: base * multiplier^(growth steps), capped."""
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    r = s.base_batch * s.batch_multiplier ** (epoch // s.interval_epochs)
    r = min(r, s.max_batch)
    if dataset_size is not None:
        r = min(r, dataset_size)
    return r


def lr_at(s, epoch, it=0, iters_in_epoch=1):
    """Learning rate at one iteration.

    During warmup the rate ramps linearly per iteration from base_lr at the
    very first iteration to lr_target at the last warmup iteration. After
    warmup it is lr_target decayed once per interval, counted from epoch 0.
    """
    if not 0 <= it < iters_in_epoch:
        raise ValueError(f"iteration {it} outside [0, {iters_in_epoch})")
    if epoch < s.warmup_epochs:
        total = s.warmup_epochs * iters_in_epoch
        step = epoch * iters_in_epoch + it
        if total == 1:
            return s.lr_target
        return s.base_lr + (s.lr_target - s.base_lr) * (step / (total - 1))
    return s.lr_target * s.lr_decay ** (epoch // s.interval_epochs)


def effective_lr(alpha, r):
    """Per-sample step scale alpha / r."""
    if r < 1:
        raise ValueError(f"batch size must be >= 1, got {r}")
    return alpha / r


def expand(s, dataset_size):
    """Resolve the schedule to one row per epoch for a concrete dataset size."""
    if dataset_size < s.base_batch:
        raise ConfigError(
            f"dataset size {dataset_size} smaller than base batch {s.base_batch}")
    rows = []
    for e in range(s.total_epochs):
        r = batch_size_at(s, e, dataset_size)
        iters = math.ceil(dataset_size / r)
        alpha = lr_at(s, e, 0, iters)
        rows.append(ScheduleRow(
            epoch=e,
            batch_size=r,
            lr=alpha,
            effective_lr=effective_lr(alpha, r),
            warmup_active=e < s.warmup_epochs,
            micro_batches_per_step=math.ceil(r / s.micro_batch_cap),
        ))
    return rows


def assert_effective_equivalence(a, b, rel_tol=1e-15):
    """True iff the two schedules trace the same per-epoch effective lr.

    Compares the post-warmup plateau value lr_target * decay^k / batch for
    every epoch; warmup settings must agree for the ramp itself to match.
    """
    if a.total_epochs != b.total_epochs or a.interval_epochs != b.interval_epochs:
        return False
    if (a.warmup_epochs, a.warmup_ref_batch) != (b.warmup_epochs, b.warmup_ref_batch):
        return False
    for e in range(a.total_epochs):
        va = effective_lr(a.lr_target * a.lr_decay ** (e // a.interval_epochs),
                          batch_size_at(a, e))
        vb = effective_lr(b.lr_target * b.lr_decay ** (e // b.interval_epochs),
                          batch_size_at(b, e))
        if va == vb:
            continue
        if abs(va - vb) > rel_tol * max(abs(va), abs(vb)):
            return False
    return True
