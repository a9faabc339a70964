"""Softmax cross-entropy loss, its gradient, and epoch-level aggregation."""

import numpy as np

from .errors import ShapeError
from .tensor import seq_sum


def softmax(z):
    """Softmax of a logit vector, shifted by max(z) so huge logits stay finite."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / seq_sum(e[None, :], axis=1)[0]


def softmax_columns(Z):
    """Column-wise softmax of an (M, r) logit matrix."""
    Z = np.asarray(Z)
    e = np.exp(Z - Z.max(axis=0, keepdims=True))
    return e / seq_sum(e.T[:, :, None], axis=1).T


def ce_value(p, target):
    """Cross entropy of a probability vector against a one-hot class index."""
    p = np.asarray(p)
    target = int(target)
    if not 0 <= target < p.shape[0]:
        raise ShapeError(f"ce_value: target {target} out of range for {p.shape[0]} classes")
    return float(-np.log(p[target]))


def ce_softmax_grad(p, target):
    """Gradient of cross entropy w.r.t. the logits: probabilities minus one-hot."""
    p = np.asarray(p)
    target = int(target)
    if not 0 <= target < p.shape[0]:
        raise ShapeError(f"ce_softmax_grad: target {target} out of range for {p.shape[0]} classes")
    g = p.copy()
    g[target] -= 1.0
    return g


def batch_ce(Z, targets):
    """Per-column losses and probabilities for a logit batch.

    Returns (losses, P): losses[s] = -log P[targets[s], s], P column-softmax.
    """
    Z = np.asarray(Z)
    targets = np.asarray(targets, dtype=np.int64)
    if Z.ndim != 2 or targets.shape != (Z.shape[1],):
        raise ShapeError(f"batch_ce: logits {Z.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= Z.shape[0]):
        raise ShapeError(f"batch_ce: target out of range for {Z.shape[0]} classes")
    P = softmax_columns(Z)
    losses = -np.log(P[targets, np.arange(Z.shape[1])])
    return losses, P


def batch_grad(P, targets):
    """(M, r) gradient matrix: each column is P[:, s] minus the one-hot target."""
    G = P.copy()
    G[np.asarray(targets, dtype=np.int64), np.arange(P.shape[1])] -= 1.0
    return G


def batch_loss(batches):
    """Mean of per-batch mean losses over an epoch.

    Each element of `batches` is (logits, targets). With unequal batch sizes
    this is the mean of batch means, which differs from the dataset mean;
    callers wanting the dataset mean should aggregate per-sample sums.
    """
    batches = list(batches)
    if not batches:
        raise ShapeError("batch_loss: no batches")
    means = []
    for Z, targets in batches:
        losses, _ = batch_ce(Z, targets)
        means.append(float(seq_sum(losses[None, :], axis=1)[0]) / losses.shape[0])
    return sum(means) / len(means)
