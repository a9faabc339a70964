"""Epoch orchestration: dataset partitioning, gradient accumulation,
training runs with per-epoch logging, flop accounting, the sequential-vs-
big-batch equivalence experiment, and the finite-difference gradient check.
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .optim import sgd_step
from .schedule import batch_size_at, effective_lr, lr_at
from .tensor import seq_sum

EPOCH_LOG_HEADER = ("epoch,batch_size,micro_batch,lr,effective_lr,train_loss,"
                    "train_loss_eq9,test_error,fwd_flops,bwd_flops,wall_seconds")


@dataclass
class BatchPlan:
    """One epoch's shuffled index batches; only the last may be short."""

    epoch: int
    slices: list

    @property
    def sizes(self):
        return [len(s) for s in self.slices]


@dataclass
class EpochLog:
    epoch: int
    batch_size: int
    micro_batch: int
    lr: float
    effective_lr: float
    train_loss: float
    train_loss_eq9: float
    test_error: float
    fwd_flops: int
    bwd_flops: int
    wall_seconds: float

    def csv_row(self):
        return ",".join([
            str(self.epoch), str(self.batch_size), str(self.micro_batch),
            repr(self.lr), repr(self.effective_lr), repr(self.train_loss),
            repr(self.train_loss_eq9), repr(self.test_error),
            str(self.fwd_flops), str(self.bwd_flops), repr(self.wall_seconds),
        ])


def write_epoch_logs(path, logs):
    with open(path, "w") as f:
        f.write(EPOCH_LOG_HEADER + "\n")
        for log in logs:
            f.write(log.csv_row() + "\n")


@dataclass
class StepRecord:
    loss_sum: float
    count: int
    micro_batches: int
    fwd_flops: int
    bwd_flops: int


def partition_epoch(n, r, rng, epoch=0):
    """Shuffle 0..n-1 and cut into ceil(n/r) batches; the last is truncated
    rather than padded."""
    if not 1 <= r <= n:
        raise ValueError(f"partition: batch size {r} outside [1, {n}]")
    perm = rng.permutation(n)
    slices = [perm[i : i + r] for i in range(0, n, r)]
    return BatchPlan(epoch=epoch, slices=slices)


def standardize(train, test):
    """Return standardized copies of the feature matrices using mean/std
    computed on the training split only."""
    mu = train.features.mean(axis=0)
    sigma = train.features.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return (train.features - mu) / sigma, (test.features - mu) / sigma


def train_step(net, features, labels, indices, lr, micro_batch_cap, opt_state):
    """One parameter update over a batch of sample indices.

    The batch is split into ceil(len/cap) micro batches, each run forward
    and backward at the SAME weights; the batch-sum gradients are added and
    a single optimizer step divides by the full actual batch size, so the
    result is independent of the cap up to summation rounding.
    """
    k = len(indices)
    if k == 0:
        raise ValueError("train_step: empty batch")
    params = net.params()
    total_grads = None
    loss_sum = 0.0
    fwd = bwd = 0
    micros = range(0, k, micro_batch_cap)
    for start in micros:
        idx = indices[start : start + micro_batch_cap]
        _, V, losses = net.loss_and_grad(features[idx], labels[idx])
        grads, _ = net.backward(V)
        loss_sum += float(seq_sum(losses[None, :], axis=1)[0])
        fwd += net.flops_forward(len(idx))
        bwd += net.flops_backward(len(idx))
        if total_grads is None:
            total_grads = grads
        else:
            for name in total_grads:
                total_grads[name] += grads[name]
    sgd_step(params, total_grads, lr, k, opt_state)
    return StepRecord(loss_sum=loss_sum, count=k, micro_batches=len(micros),
                      fwd_flops=fwd, bwd_flops=bwd)


def evaluate(net, features, labels, eval_batch=256, threads=None):
    """Top-1 test error in percent over the full split, forward-only.

    Batch boundaries are fixed by eval_batch (batch norm statistics depend
    on them), so the result does not depend on the worker count.
    """
    n = features.shape[0]
    chunks = [(features[i : i + eval_batch], labels[i : i + eval_batch])
              for i in range(0, n, eval_batch)]

    def count_wrong(chunk):
        X, y = chunk
        Z = net.forward(X, train=False)
        return int(np.count_nonzero(np.argmax(Z, axis=0) != y))

    if threads is None:
        threads = int(os.environ.get("ADABATCH_THREADS", "1") or "1")
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            wrong = sum(pool.map(count_wrong, chunks))
    else:
        wrong = sum(count_wrong(c) for c in chunks)
    return 100.0 * wrong / n


def epoch_flops(net, n, r):
    """Exact integer (forward, backward) flop totals for one epoch at batch
    size r; the truncated final batch counts at its actual size. Because
    every layer's cost is strictly linear in the batch, the totals do not
    depend on r."""
    if r < 1:
        raise ValueError(f"epoch_flops: batch size {r} must be >= 1")
    fwd = bwd = 0
    remaining = n
    while remaining > 0:
        b = min(r, remaining)
        fwd += net.flops_forward(b)
        bwd += net.flops_backward(b)
        remaining -= b
    return fwd, bwd


def run_training(net, train_ds, test_ds, sched, opt_state, rng,
                 eval_batch=256, start_epoch=0, micro_batch_cap=None):
    """Train for the scheduled epochs; returns one EpochLog per epoch.

    Fully deterministic given the rng state: the shuffle stream is the only
    randomness consumed, one permutation per epoch, so a run resumed from a
    checkpointed state continues the exact same stream.
    """
    n = train_ds.features.shape[0]
    cap = micro_batch_cap if micro_batch_cap is not None else sched.micro_batch_cap
    train_x, test_x = standardize(train_ds, test_ds)
    logs = []
    for epoch in range(start_epoch, sched.total_epochs):
        t0 = time.perf_counter()
        r = batch_size_at(sched, epoch, n)
        plan = partition_epoch(n, r, rng, epoch=epoch)
        iters = len(plan.slices)
        loss_total = 0.0
        batch_means = []
        fwd = bwd = 0
        lr0 = lr_at(sched, epoch, 0, iters)
        for t, idx in enumerate(plan.slices):
            lr = lr_at(sched, epoch, t, iters)
            rec = train_step(net, train_x, train_ds.labels, idx, lr, cap, opt_state)
            if not math.isfinite(rec.loss_sum):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} iteration {t}",
                    epoch=epoch, iteration=t)
            loss_total += rec.loss_sum
            batch_means.append(rec.loss_sum / rec.count)
            fwd += rec.fwd_flops
            bwd += rec.bwd_flops
        err = evaluate(net, test_x, test_ds.labels, eval_batch)
        logs.append(EpochLog(
            epoch=epoch,
            batch_size=r,
            micro_batch=min(r, cap),
            lr=lr0,
            effective_lr=effective_lr(lr0, r),
            train_loss=loss_total / n,
            train_loss_eq9=sum(batch_means) / len(batch_means),
            test_error=err,
            fwd_flops=fwd,
            bwd_flops=bwd,
            wall_seconds=time.perf_counter() - t0,
        ))
    return logs


# ---------------------------------------------------------------------------
# sequential vs big-batch equivalence


@dataclass
class EquivStep:
    step: int
    max_abs_dist: float
    rel_dist: float


def _clone_params(net):
    return {k: v.copy() for k, v in net.params().items()}


def _param_distance(a, b):
    max_abs = 0.0
    max_rel = 0.0
    for k in a:
        diff = np.abs(a[k] - b[k])
        scale = np.maximum(np.abs(a[k]), np.abs(b[k]))
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(scale > 0, diff / scale, 0.0)
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
    return max_abs, max_rel


def equivalence_experiment(net, features, labels, r, beta, lr, steps,
                           opt_factory=None, constructed=False):
    """Compare small sequential updates against big-batch updates.

    General mode: path A takes beta sequential steps at batch r with
    learning rate lr per group; path B takes one step at batch beta*r with
    learning rate beta*lr on the same samples in the same order. The paths
    are genuinely different trainings, so the result is a divergence REPORT,
    not an assertion.

    Constructed mode: every group contains beta identical copies of one
    micro batch and path A computes all beta micro gradients at the group's
    starting weights (the accumulation regime), which forces the update
    terms of both paths to be equal; distances then sit at rounding level.
    """
    from .optim import SgdState

    n = features.shape[0]
    if beta < 1 or steps < 1:
        raise ValueError("equivalence_experiment: beta and steps must be >= 1")
    needed = r * steps if constructed else beta * r * steps
    if needed > n:
        raise ValueError(
            f"equivalence_experiment: need {needed} samples, have {n}")

    start = _clone_params(net)
    make_opt = opt_factory if opt_factory is not None else (lambda: SgdState())

    # path A: sequential micro updates (or accumulation in constructed mode)
    net.set_params(start)
    opt = make_opt()
    a_states = []
    cursor = 0
    for g in range(steps):
        if constructed:
            group = [base] * beta
        else:
            group = []
            for _ in range(beta):
                sl = slice(cursor, cursor + r)
                group.append((features[sl], labels[sl]))
                cursor += r
        if constructed:
            params = net.params()
            total = None
            for X, y in group:
                _, V, _ = net.loss_and_grad(X, y)
                grads, _ = net.backward(V)
                total = grads if total is None else {
                    k: total[k] + grads[k] for k in total}
            sgd_step(params, total, beta * lr, beta * r, opt)
        else:
            for X, y in group:
                _, V, _ = net.loss_and_grad(X, y)
                grads, _ = net.backward(V)
                sgd_step(net.params(), grads, lr, r, opt)
        a_states.append(_clone_params(net))

    # path B: one big batch per group at beta times the learning rate
    net.set_params(start)
    opt = make_opt()
    rows = []
    cursor = 0
    for g in range(steps):
        if constructed:
            X = np.concatenate([base[0]] * beta)
            y = np.concatenate([base[1]] * beta)
        else:
            sl = slice(cursor, cursor + beta * r)
            X, y = features[sl], labels[sl]
            cursor += beta * r
        _, V, _ = net.loss_and_grad(X, y)
        grads, _ = net.backward(V)
        sgd_step(net.params(), grads, beta * lr, beta * r, opt)
        max_abs, rel = _param_distance(a_states[g], net.params())
        rows.append(EquivStep(step=g, max_abs_dist=max_abs, rel_dist=rel))
    net.set_params(start)
    return rows


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckReport:
    tol: float
    entries: dict = field(default_factory=dict)  # tensor name -> max relative error

    @property
    def passed(self):
        return all(v < self.tol for v in self.entries.values())

    @property
    def worst(self):
        return max(self.entries, key=self.entries.get)


def _tensor_rel_error(analytic, numeric):
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def gradcheck(net, X_rows, targets, tol=1e-6, h=1e-5, corrupt=None):
    """Compare every analytic gradient against central finite differences of
    the mean batch loss. Requires 64-bit parameters. `corrupt` names a
    tensor whose analytic gradient is deliberately perturbed (negative
    control for the harness itself)."""
    params = net.params()
    for name, arr in params.items():
        if arr.dtype != np.float64:
            raise ShapeError(f"gradcheck needs float64 parameters; {name!r} is {arr.dtype}")
    X_rows = np.asarray(X_rows, dtype=np.float64)
    r = X_rows.shape[0]

    def batch_loss():
        mean, _, _ = net.loss_and_grad(X_rows, targets)
        return mean

    _, V, _ = net.loss_and_grad(X_rows, targets)
    grads, input_grad = net.backward(V)
    # layer gradients are batch sums; the objective is the batch mean
    analytic = {name: g / r for name, g in grads.items()}
    analytic["input"] = input_grad / r
    if corrupt is not None:
        if corrupt not in analytic:
            raise ShapeError(f"gradcheck: unknown tensor {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] + 1e-3

    report = GradcheckReport(tol=tol)
    for name, arr in list(params.items()) + [("input", X_rows)]:
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss()
            flat[i] = orig - h
            down = batch_loss()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        report.entries[name] = _tensor_rel_error(analytic[name], numeric)
    return report
