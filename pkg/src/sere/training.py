"""Optimization loop: KL warm-up schedules, free bits, Adam, dynamic
binarization, and per-epoch metric emission.

The geometric warm-up spends 2^n epochs at level n (boundaries at 2^n - 1)
with beta_n = 10^(n/N - 1) and beta_0 = 0, reaching the full objective at
epoch 2^N - 1. Training is bit-deterministic given the config seed: every
stochastic choice (split, shuffling, binarization, posterior noise) draws
from its own named counter-based stream keyed by (seed, purpose, epoch).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .hierarchy import SereModel
from .tensor import Tape, maximum_scalar, new_rng


class NumericError(RuntimeError):
    """Loss became non-finite; carries the name of the offending term."""

    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__(f"non-finite {term}: {value}")


@dataclass
class WarmupSchedule:
    kind: str = "geometric"   # geometric | linear | hard_then_geometric
    n_levels: int = 10        # N for the geometric kinds
    total_epochs: int = 256   # for linear
    hard_epochs: int = 0      # for hard_then_geometric

    def __post_init__(self):
        if self.kind not in ("geometric", "linear", "hard_then_geometric"):
            raise ValueError(f"unknown warm-up kind {self.kind!r}")
        if self.kind == "linear" and self.total_epochs < 1:
            raise ValueError("linear warm-up needs total_epochs >= 1")
        if self.kind != "linear" and self.n_levels < 1:
            raise ValueError("geometric warm-up needs n_levels >= 1")

    def _geometric(self, epoch):
        # level n occupies epochs [2^n - 1, 2^{n+1} - 1): 2^n epochs each
        level = (epoch + 1).bit_length() - 1
        if level >= self.n_levels:
            return 1.0
        if level == 0:
            return 0.0
        return 10.0 ** (level / self.n_levels - 1.0)

    def beta(self, epoch):
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if self.kind == "geometric":
            return self._geometric(epoch)
        if self.kind == "linear":
            return min(1.0, epoch / self.total_epochs)
        if epoch < self.hard_epochs:
            return 0.0
        return self._geometric(epoch - self.hard_epochs)


def warmup_beta(schedule, epoch):
    return schedule.beta(epoch)


def free_bits_objective(recon, kl_layers, lam, beta):
    """Loss = -recon + beta * sum_l max(lam, KL_l); clamped layers contribute
    no KL gradient. With lam = 0 this is exactly the plain warm-up loss."""
    if lam < 0:
        raise ValueError("free-bits lambda must be >= 0")
    loss = -recon
    for kl in kl_layers:
        loss = loss + beta * maximum_scalar(kl, lam)
    return loss


@dataclass
class LrSchedule:
    kind: str = "constant"    # constant | cosine
    lr: float = 1e-3
    total: int = 0            # T for cosine

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.kind!r}")
        if self.kind == "cosine" and self.total < 1:
            raise ValueError("cosine schedule needs total >= 1")

    def value(self, epoch):
        if self.kind == "constant":
            return self.lr
        if epoch >= self.total:
            return 0.0
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / self.total))


class Adam:
    """Standard Adam with bias correction; l2 regularization enters as
    weight_decay * param added to the raw gradient."""

    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        for name, tensor in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(tensor.data)
            elif g.shape != tensor.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            kernels.adam_update(tensor.data, g, self.m[name], self.v[name],
                                lr, self.b1, self.b2, self.eps, self.t,
                                weight_decay=self.weight_decay)


def adam_step(state, grads, lr):
    state.step(grads, lr)


def dynamic_binarize(x, rng):
    """Pixel ~ Bernoulli(gray value); resampled by the caller every epoch."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("dynamic_binarize expects values in [0,1]")
    return (rng.random(x.shape) < x).astype(np.float64)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    lr: float = 1e-3
    lr_kind: str = "constant"
    lr_total: int = 0
    l2: float = 0.0
    seed: int = 0
    warmup: WarmupSchedule = field(default_factory=WarmupSchedule)
    free_bits: float = 0.0
    binarize: bool = True
    val_fraction: float = 0.1
    n_mc: int = 1
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch-norm precondition)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def lr_schedule(self):
        return LrSchedule(kind=self.lr_kind, lr=self.lr, total=self.lr_total)


@dataclass
class EpochMetrics:
    epoch: int
    beta: float
    train_reg_elbo: float
    train_elbo: float
    val_elbo: float
    val_kls: list
    wall_time: float


def split_data(x, val_fraction, seed):
    """Deterministic shuffle, then the trailing fraction becomes validation."""
    x = np.asarray(x, dtype=np.float64)
    perm = new_rng(seed, "split").permutation(x.shape[0])
    x = x[perm]
    n_val = int(round(x.shape[0] * val_fraction))
    if n_val == 0:
        return x, x[:0]
    return x[:-n_val], x[-n_val:]


def _check_finite(parts, loss):
    for l, kl in enumerate(parts.kl_layers, start=1):
        if not np.isfinite(kl.data):
            raise NumericError(f"kl_layer_{l}", float(kl.data))
    if not np.isfinite(parts.recon.data):
        raise NumericError("reconstruction", float(parts.recon.data))
    if not np.isfinite(loss.data):
        raise NumericError("loss", float(loss.data))


def validation_metrics(model, val_x, beta, rng, binarize):
    if val_x.shape[0] == 0:
        return float("nan"), []
    xb = dynamic_binarize(val_x, rng) if binarize else val_x
    parts = model.elbo(xb, beta=1.0, rng=rng, mode="eval")
    return float(parts.elbo.data), [float(k.data) for k in parts.kl_layers]


def train(config, spec, data, model=None, optimizer=None, start_epoch=0, on_epoch=None):
    """Run the loop; returns (model, list of EpochMetrics).

    `data` is the full training array (grayscale in [0,1] when
    config.binarize, else raw continuous rows). Parameters are mutated only
    inside the optimizer step. `on_epoch(epoch, model, optimizer, metrics)`
    runs after each epoch (checkpointing hooks)."""
    if data.shape[0] == 0:
        raise ValueError("training data is empty")
    if model is None:
        model = SereModel(spec, seed=config.seed)
    if optimizer is None:
        optimizer = Adam(model.store.params, b1=config.adam_b1, b2=config.adam_b2,
                         eps=config.adam_eps, weight_decay=config.l2)
    train_x, val_x = split_data(data, config.val_fraction, config.seed)
    lr_sched = config.lr_schedule()
    metrics = []
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        beta = config.warmup.beta(epoch)
        lr = lr_sched.value(epoch)
        xs = train_x
        if config.binarize:
            xs = dynamic_binarize(train_x, new_rng(config.seed, "binarize", epoch))
        order = new_rng(config.seed, "shuffle", epoch).permutation(xs.shape[0])
        noise_rng = new_rng(config.seed, "noise", epoch)

        reg_sum = 0.0
        elbo_sum = 0.0
        n_batches = 0
        for lo in range(0, xs.shape[0], config.batch_size):
            batch = xs[order[lo:lo + config.batch_size]]
            if batch.shape[0] < 2:
                continue  # batch-norm needs >= 2 rows; drop the remainder
            with Tape() as tape:
                parts = model.elbo(batch, beta=beta, rng=noise_rng,
                                   n_mc=config.n_mc, mode="train")
                loss = free_bits_objective(parts.recon, parts.kl_layers,
                                           config.free_bits, beta)
                _check_finite(parts, loss)
                model.store.zero_grad()
                tape.backward(loss)
            grads = {n: t.grad for n, t in model.store.params.items() if t.grad is not None}
            optimizer.step(grads, lr)
            reg_sum += float(parts.elbo.data)
            elbo_sum += float(parts.recon.data) - sum(float(k.data) for k in parts.kl_layers)
            n_batches += 1

        val_elbo, val_kls = validation_metrics(
            model, val_x, beta, new_rng(config.seed, "val", epoch), config.binarize)
        row = EpochMetrics(
            epoch=epoch,
            beta=beta,
            train_reg_elbo=reg_sum / max(1, n_batches),
            train_elbo=elbo_sum / max(1, n_batches),
            val_elbo=val_elbo,
            val_kls=val_kls,
            wall_time=time.perf_counter() - t0,
        )
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(epoch, model, optimizer, row)
    return model, metrics
