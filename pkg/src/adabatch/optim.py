"""SGD with momentum and weight decay.

Layer backward passes hand over batch-SUM gradients; the 1/r normalization
happens here, so one update at batch r with learning rate a equals one
update at batch c*r with learning rate c*a on the same summed gradient.
"""

import numpy as np
from dataclasses import dataclass, field

from .errors import ShapeError


@dataclass
class SgdState:
    """Optimizer hyperparameters plus one velocity buffer per parameter."""

    momentum: float = 0.0
    weight_decay: float = 0.0
    bn_decay_exempt: bool = False
    velocities: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def velocity_for(self, name, param):
        if name not in self.velocities:
            self.velocities[name] = np.zeros_like(param)
        return self.velocities[name]


def _is_bn_param(name):
    return name.split("/")[-2].startswith("bn") if "/" in name else name.startswith("bn")


def sgd_step(params, grads, lr, batch_size, state):
    """One in-place update: g = sum_grad/r + decay*W; u = mu*u + g; W -= lr*u.

    `grads` are batch sums; `batch_size` is the actual number of samples
    they were summed over (a truncated final batch passes its real size).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    for name, W in params.items():
        if name not in grads:
            raise ShapeError(f"sgd_step: missing gradient for {name!r}")
        dW = grads[name]
        if dW.shape != W.shape:
            raise ShapeError(f"sgd_step: gradient {dW.shape} vs parameter {W.shape} for {name!r}")
        g = dW / batch_size
        decay = state.weight_decay
        if state.bn_decay_exempt and _is_bn_param(name):
            decay = 0.0
        if decay:
            g = g + decay * W
        u = state.velocity_for(name, W)
        if state.momentum:
            u *= state.momentum
            u += g
        else:
            u[...] = g
        W -= lr * u


@dataclass
class EquivalenceRecord:
    """Outcome of comparing an accumulated update against one big-batch update."""

    max_abs_diff: float
    max_rel_diff: float
    accumulated: dict
    big_batch: dict


def effective_update_equivalence(params, micro_grads, lr, micro_batch, state=None):
    """Compare two ways of applying `beta` micro gradients taken at fixed weights.

    Path A sums the micro batch-sum gradients and takes one step at batch
    beta*r. Path B averages the per-micro normalized gradients and applies
    the same learning rate. Both reduce to W - lr/(beta*r) * sum(grads);
    the returned record carries their floating-point disagreement.
    """
    micro_grads = list(micro_grads)
    if not micro_grads:
        raise ValueError("effective_update_equivalence: no micro gradients")
    beta = len(micro_grads)
    mu = state.momentum if state is not None else 0.0
    names = list(params)

    a_params = {k: params[k].copy() for k in names}
    summed = {k: sum(g[k] for g in micro_grads) for k in names}
    a_state = SgdState(momentum=mu)
    sgd_step(a_params, summed, lr, beta * micro_batch, a_state)

    b_params = {k: params[k].copy() for k in names}
    averaged = {k: sum(g[k] / micro_batch for g in micro_grads) / beta for k in names}
    b_state = SgdState(momentum=mu)
    sgd_step(b_params, averaged, lr, 1, b_state)

    max_abs = 0.0
    max_rel = 0.0
    for k in names:
        diff = np.abs(a_params[k] - b_params[k])
        scale = np.maximum(np.abs(a_params[k]), np.abs(b_params[k]))
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(scale > 0, diff / scale, 0.0)
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
    return EquivalenceRecord(max_abs, max_rel, a_params, b_params)
