"""
kafforge - Training Protocol
============================
Adam on seeded mini-batches, cross-entropy plus lambda * ||w||^2, validation
accuracy every few iterations and patience-based early stopping with
restoration of the best-validation parameters.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from data import Dataset, one_hot_batch
from errors import DomainError, NumericError
from nn import softmax_cross_entropy

# ============================================================================
# CONFIGURATION AND STATE
# ============================================================================


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.001
    batch_size: int = 32
    eval_every: int = 10
    patience: int = 250
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 5000
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "eval_every", "patience", "max_iters"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DomainError(f"{name} must be a positive integer, got {value}")
        if self.lam < 0 or self.lr < 0:
            raise DomainError("lambda and learning rate must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or self.adam_eps <= 0:
            raise DomainError("Adam needs betas in [0, 1) and a positive epsilon")
        if self.patience < self.eval_every:
            raise DomainError(f"patience ({self.patience}) must be at least eval_every ({self.eval_every})")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter list"""

    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, config):
    """Bias-corrected Adam update, applied to the parameter arrays in place"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DomainError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment slots")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DomainError(f"parameter {p.shape} and gradient {g.shape} shapes differ")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.lr * (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
    return params, state


# ============================================================================
# DATA SPLITS AND BATCHES
# ============================================================================


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def split_indices(n, n_val, n_test, seed):
    if n_val < 0 or n_test < 0 or n_val + n_test >= n:
        raise DomainError(f"cannot hold out {n_val} + {n_test} of {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return order[n_val + n_test:], order[:n_val], order[n_val:n_val + n_test]


def split_dataset(dataset, n_val, n_test, seed=0):
    """Seeded shuffle, then (train, val, test); disjoint and exhaustive"""
    train_idx, val_idx, test_idx = split_indices(dataset.n, n_val, n_test, seed)
    return Splits(dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx))


class BatchSampler:
    """Without-replacement epochs, reshuffled every epoch from one seeded stream"""

    def __init__(self, dataset, batch_size, seed):
        self.dataset = dataset
        self.batch_size = min(batch_size, dataset.n)
        self.rng = np.random.default_rng(seed)
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0

    def next_indices(self):
        if self._cursor + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.dataset.n)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return idx

    def next_batch(self):
        idx = self.next_indices()
        images = self.dataset.images[idx]
        targets = one_hot_batch(self.dataset.labels[idx], self.dataset.class_count)
        images.setflags(write=False)
        targets.setflags(write=False)
        return images, targets


def _batches(sampler, threads):
    """Yield batches; with threads > 1 the next batch is gathered in the background"""
    if threads <= 1:
        while True:
            yield sampler.next_batch()
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(sampler.next_batch)
        while True:
            batch = pending.result()
            pending = pool.submit(sampler.next_batch)
            yield batch


# ============================================================================
# EVALUATION
# ============================================================================

def predict(network, images, batch_size=256):
    """Inference-mode logits, computed in chunks"""
    chunks = [network.forward(images[i:i + batch_size], training=False)
              for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate(network, images, labels, batch_size=256):
    """Fraction of samples whose argmax logit (lowest index on ties) is the label"""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DomainError("cannot evaluate on an empty set")
    logits = predict(network, images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == labels))


def iterations_to_reach(val_curve, target):
    """First iteration whose validation accuracy is at least target, else None"""
    for iteration, accuracy in val_curve:
        if accuracy >= target:
            return iteration
    return None


# ============================================================================
# TRAINING LOOP
# ============================================================================


@dataclass
class TrainReport:
    loss_curve: List[Tuple[int, float]] = field(default_factory=list)
    val_curve: List[Tuple[int, float]] = field(default_factory=list)
    best_iteration: int = 0
    best_val_accuracy: float = float("-inf")
    final_val_accuracy: float = float("nan")
    test_accuracy: Optional[float] = None
    test_accuracy_at_stop: Optional[float] = None
    stopped_iteration: int = 0
    stop_reason: str = ""
    param_count: int = 0
    wall_time: float = 0.0

    def loss_frame(self):
        return pd.DataFrame(self.loss_curve, columns=["iteration", "loss"])

    def val_frame(self):
        return pd.DataFrame(self.val_curve, columns=["iteration", "accuracy"])

    def write_csvs(self, out_dir):
        self.loss_frame().to_csv(out_dir / "loss.csv", index=False, float_format="%.17g")
        self.val_frame().to_csv(out_dir / "val.csv", index=False, float_format="%.17g")

    def summary(self):
        def fmt(v):
            return "n/a" if v is None else f"{v:.6f}"
        return "\n".join([
            f"param_count = {self.param_count}",
            f"best_iteration = {self.best_iteration}",
            f"best_val_accuracy = {fmt(self.best_val_accuracy)}",
            f"final_val_accuracy = {fmt(self.final_val_accuracy)}",
            f"test_accuracy = {fmt(self.test_accuracy)}",
            f"test_accuracy_at_stop = {fmt(self.test_accuracy_at_stop)}",
            f"stopped_iteration = {self.stopped_iteration}",
            f"stop_reason = {self.stop_reason}",
            f"wall_time_seconds = {self.wall_time:.3f}",
        ])


def train(network, splits, config, verbose=False, threads=1):
    """
    Run the protocol on `network` (mutated in place) and return its report

    Iteration k's loss is measured on the parameters after k updates. The
    validation set is scored after every `eval_every` updates; a strictly
    higher accuracy becomes the new best and is snapshotted. Training stops
    once `patience` updates pass without improvement or at `max_iters`, and
    the best snapshot is restored.
    """
    train_set, val_set, test_set = splits
    if train_set.n == 0 or val_set.n == 0:
        raise DomainError("training and validation splits must be non-empty")

    started = time.perf_counter()
    report = TrainReport(param_count=network.param_count())
    params = [p for _, _, p in network.parameters()]
    regularized = {id(p) for _, _, p in network.regularized_parameters()}
    state = AdamState.zeros_like(params)
    sampler = BatchSampler(train_set, config.batch_size, config.seed)
    best_snapshot = network.snapshot()

    iteration = 0
    batches = _batches(sampler, threads)
    try:
        while iteration < config.max_iters:
            images, targets = next(batches)
            logits = network.forward(images, training=True)
            loss, grad = softmax_cross_entropy(logits, targets, config.lam * network.l2_norm_sq())
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at iteration {iteration}", iteration)
            report.loss_curve.append((iteration, loss))

            network.backward(grad)
            grads = network.gradients()
            for p, g in zip(params, grads):
                if id(p) in regularized:
                    g += 2.0 * config.lam * p
            adam_step(params, grads, state, config)
            iteration += 1

            if iteration % config.eval_every == 0:
                accuracy = evaluate(network, val_set.images, val_set.labels)
                report.val_curve.append((iteration, accuracy))
                if accuracy > report.best_val_accuracy:
                    report.best_val_accuracy = accuracy
                    report.best_iteration = iteration
                    best_snapshot = network.snapshot()
                if verbose:
                    print(f"🔄 iter {iteration:6d}  loss {loss:.5f}  val {accuracy:.4f}  "
                          f"best {report.best_val_accuracy:.4f} @ {report.best_iteration}")
                if iteration - report.best_iteration >= config.patience:
                    report.stop_reason = "patience"
                    break
    finally:
        batches.close()

    report.stop_reason = report.stop_reason or "max_iters"
    report.stopped_iteration = iteration
    report.final_val_accuracy = evaluate(network, val_set.images, val_set.labels)
    if test_set.n:
        report.test_accuracy_at_stop = evaluate(network, test_set.images, test_set.labels)
    if report.val_curve:
        network.restore(best_snapshot)
    else:
        report.best_val_accuracy = report.final_val_accuracy
        report.best_iteration = iteration
    if test_set.n:
        report.test_accuracy = evaluate(network, test_set.images, test_set.labels)
    report.wall_time = time.perf_counter() - started
    if verbose:
        print(f"✅ stopped at iteration {iteration} ({report.stop_reason}); "
              f"best val {report.best_val_accuracy:.4f} @ {report.best_iteration}")
    return report
