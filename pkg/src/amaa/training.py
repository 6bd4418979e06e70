"""Training loop: adaptive-moment optimizer with decoupled weight decay.

One optimizer step per mini-batch of 2 (fixed order, gradients averaged),
learning rate following polynomial decay lr_t = lr0 * (1 - t/T)^power over
global steps, global-norm gradient clipping, and per-epoch validation.

Weight decay is decoupled (subtracted directly from the parameter, not fed
through the moment estimates) and skipped for biases and the residual
scale: decaying a zero-initialized scale toward zero would fight the very
signal it is supposed to learn.

Everything is driven by named PRNG streams derived from the seed, so a
rerun with the same config reproduces parameters bit-for-bit. The only
augmentation is a horizontal flip of image and labels, which matches the
mirror symmetry of the default centered camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .errors import ConfigError, TrainingError
from .losses import (check_finite_terms, class_weights_from_counts,
                     loss_total)
from .metrics import MetricsAccumulator, MetricsReport, predict_labels
from .params import ParamStore
from .rng import SplitMix64, derive


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 2
    poly_power: float = 0.9
    clip_norm: float = 5.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"need at least one epoch, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError(f"betas must lie in [0, 1), got "
                              f"{self.beta1}, {self.beta2}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight decay must be >= 0 and eps > 0")


class AdamW:
    """Decoupled-decay adaptive moments over a ParamStore.

    total_steps enables the polynomial schedule; without it the learning
    rate stays constant.
    """

    def __init__(self, store: ParamStore, tc: TrainConfig,
                 no_decay=frozenset(), total_steps: int | None = None):
        self.store = store
        self.tc = tc
        self.no_decay = frozenset(no_decay)
        self.total_steps = total_steps
        self.t = 0
        self.m = {name: np.zeros(var.shape) for name, var in store.items()}
        self.v = {name: np.zeros(var.shape) for name, var in store.items()}

    def lr_at(self, step: int) -> float:
        if not self.total_steps:
            return self.tc.lr
        frac = min(step / self.total_steps, 1.0)
        return self.tc.lr * (1.0 - frac) ** self.tc.poly_power

    def step(self):
        """Apply one update from the gradients currently in the store."""
        tc = self.tc
        lr_t = self.lr_at(self.t)
        self.t += 1
        bc1 = 1.0 - tc.beta1 ** self.t
        bc2 = 1.0 - tc.beta2 ** self.t
        for name, var in self.store.items():
            g = self.store.grad(name)
            m = self.m[name]
            v = self.v[name]
            m *= tc.beta1
            m += (1.0 - tc.beta1) * g
            v *= tc.beta2
            v += (1.0 - tc.beta2) * g * g
            update = lr_t * (m / bc1) / (np.sqrt(v / bc2) + tc.eps)
            if tc.weight_decay and name not in self.no_decay:
                update = update + lr_t * tc.weight_decay * var.value
            var.value = var.value - update


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale gradients so their global norm is at most max_norm; returns
    the pre-clip norm."""
    norm = store.global_grad_norm()
    if max_norm and norm > max_norm:
        store.scale_grads(max_norm / norm)
    return norm


def flip_sample(rgb: np.ndarray, labels: np.ndarray):
    """Mirror image columns and the labels' w axis together."""
    return rgb[:, :, ::-1].copy(), np.ascontiguousarray(labels[:, :, ::-1])


def _shuffled(indices, rng: SplitMix64):
    order = list(indices)
    for i in range(len(order) - 1, 0, -1):
        j = rng.randint(0, i)
        order[i], order[j] = order[j], order[i]
    return order


@dataclass
class EpochLog:
    epoch: int
    lr: float
    ce: float
    affinity: float
    consistency: float
    total: float
    val: MetricsReport

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, "ce": self.ce,
                "affinity": self.affinity, "consistency": self.consistency,
                "total": self.total, "val": self.val.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "EpochLog":
        return cls(epoch=data["epoch"], lr=data["lr"], ce=data["ce"],
                   affinity=data["affinity"],
                   consistency=data["consistency"], total=data["total"],
                   val=MetricsReport.from_dict(data["val"]))


@dataclass
class TrainResult:
    logs: list = field(default_factory=list)

    @property
    def final_val(self) -> MetricsReport:
        return self.logs[-1].val


def evaluate(model, samples) -> MetricsReport:
    """Forward every sample (no tape) and pool counts over the split."""
    samples = list(samples)
    if not samples:
        raise ConfigError("cannot evaluate an empty split")
    acc = MetricsAccumulator(model.cfg.n_classes)
    for sample in samples:
        probs = np.asarray(model.forward(sample.rgb))
        acc.update(predict_labels(probs), sample.labels)
    return acc.report()


def train(model, train_samples, val_samples, tc: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Optimize the model in place; one log entry per epoch.

    on_epoch, if given, is called with each EpochLog as it is appended
    (for progress reporting; it cannot alter the run).
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise ConfigError("training split is empty")
    counts = np.zeros(model.cfg.n_classes)
    for sample in train_samples:
        counts += np.bincount(sample.labels.ravel(),
                              minlength=model.cfg.n_classes)
    class_weights = class_weights_from_counts(counts)

    n = len(train_samples)
    batches_per_epoch = -(-n // tc.batch_size)
    opt = AdamW(model.store, tc, no_decay=model.no_decay,
                total_steps=tc.epochs * batches_per_epoch)

    result = TrainResult()
    for epoch in range(tc.epochs):
        order = _shuffled(range(n), SplitMix64(derive(tc.seed,
                                                      f"shuffle:{epoch}")))
        flip_rng = SplitMix64(derive(tc.seed, f"augment:{epoch}"))
        epoch_lr = opt.lr_at(opt.t)
        sums = {"ce": 0.0, "affinity": 0.0, "consistency": 0.0, "total": 0.0}

        for start in range(0, n, tc.batch_size):
            batch = order[start:start + tc.batch_size]
            model.store.zero_grads()
            for idx in batch:
                sample = train_samples[idx]
                rgb, labels = sample.rgb, sample.labels
                if tc.augment and flip_rng.next_float() < 0.5:
                    rgb, labels = flip_sample(rgb, labels)
                with Tape() as tape:
                    probs = model.forward(rgb)
                    terms = loss_total(probs, labels, class_weights,
                                       model.cfg.loss)
                check_finite_terms(terms)
                back = tape.backward(terms["total"])
                model.store.accumulate(back, scale=1.0 / len(batch))
                for key in sums:
                    sums[key] += float(np.asarray(terms[key]))
            clip_gradients(model.store, tc.clip_norm)
            opt.step()

        report = evaluate(model, val_samples)
        result.logs.append(EpochLog(
            epoch=epoch, lr=epoch_lr,
            ce=sums["ce"] / n, affinity=sums["affinity"] / n,
            consistency=sums["consistency"] / n, total=sums["total"] / n,
            val=report))
        if on_epoch is not None:
            on_epoch(result.logs[-1])
    return result
