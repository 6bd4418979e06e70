"""Training objective: weighted cross-entropy, class affinity, consistency.

All three terms take per-voxel class probabilities (softmax over channel 0)
and an integer label volume. The total is

    total = ce + affinity + lambda_cons * consistency

* ce: mean over valid voxels of -w_y * log(p_y + eps), with per-class
  weights w (inverse frequency, clamped, mean 1);
* affinity: for every class present in the truth, soft precision, recall
  and specificity are computed scene-wise from probability mass, and the
  term is -mean((log P + log R + log S) / 3) over those classes;
* consistency: occupancy o = 1 - p_empty should vary smoothly, measured as
  the mean absolute gap between o and its clipped-window neighborhood mean.

Every term is non-negative and reaches (near) zero on a perfect one-hot
prediction. eps = 1e-12 guards all logarithms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Var, wrap
from .errors import ConfigError, ShapeError, TrainingError
from .volume_ops import (abs_val, add, affine, box_mean3d, divide, log_shift,
                         mean_all, reshape, slice_channel, select_channel,
                         sub, sum_all, weighted_sum)

EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_cons: float = 0.1
    cons_window: int = 3

    def __post_init__(self):
        if self.lambda_cons < 0:
            raise ConfigError(f"lambda_cons must be >= 0, got {self.lambda_cons}")
        if self.cons_window < 1 or self.cons_window % 2 == 0:
            raise ConfigError(f"cons_window must be odd, got {self.cons_window}")


def class_weights_from_counts(counts, clamp_lo: float = 0.2,
                              clamp_hi: float = 5.0) -> np.ndarray:
    """Inverse-frequency class weights, clamped then renormalized to mean 1.

    counts holds per-class voxel counts over the training split. Classes
    that never occur get the upper clamp before renormalization.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ShapeError(f"counts must be a per-class vector, got {counts.shape}")
    total = counts.sum()
    if total <= 0:
        raise ConfigError("class weights need at least one labeled voxel")
    freq = counts / total
    with np.errstate(divide="ignore"):
        inv = np.where(freq > 0.0, 1.0 / freq, np.inf)
    weights = np.clip(inv, clamp_lo, clamp_hi)
    return weights / weights.mean()


def _check_labels(probs, labels):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got {labels.dtype}")
    if labels.shape != probs.shape[1:]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match volume {probs.shape[1:]}"
        )
    if labels.min() < 0 or labels.max() >= probs.shape[0]:
        raise ShapeError(
            f"labels out of range [0, {probs.shape[0]}): "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def weighted_cross_entropy(probs, labels, class_weights, mask=None):
    """Mean over valid voxels of -w_y * log(p_y + eps)."""
    probs = wrap(probs)
    labels = _check_labels(probs, labels)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (probs.shape[0],):
        raise ShapeError(
            f"need one weight per class, got {class_weights.shape} "
            f"for {probs.shape[0]} classes"
        )
    w_map = class_weights[labels]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != labels.shape:
            raise ShapeError(f"mask shape {mask.shape} != labels {labels.shape}")
        w_map = w_map * mask
        n_valid = int(mask.sum())
    else:
        n_valid = labels.size
    if n_valid == 0:
        raise TrainingError("cross-entropy undefined: every voxel is masked out")
    p_y = select_channel(probs, labels)
    return weighted_sum(log_shift(p_y, EPS), -w_map / n_valid)


def affinity_loss(probs, labels):
    """Scene-wise soft precision/recall/specificity over present classes."""
    probs = wrap(probs)
    labels = _check_labels(probs, labels)
    present = np.unique(labels)
    terms = None
    for c in present.tolist():
        pos = (labels == c).astype(np.float64)
        n_pos = pos.sum()
        neg = 1.0 - pos
        n_neg = neg.sum()
        p_c = slice_channel(probs, c)
        mass_pos = weighted_sum(p_c, pos)
        precision = divide(mass_pos, sum_all(p_c))
        recall = affine(mass_pos, 1.0 / n_pos)
        if n_neg > 0:
            specificity = affine(
                weighted_sum(affine(p_c, -1.0, 1.0), neg), 1.0 / n_neg)
        else:
            specificity = Var(np.array(1.0))  # no negatives to misclassify
        term = add(add(log_shift(precision, EPS), log_shift(recall, EPS)),
                   log_shift(specificity, EPS))
        terms = term if terms is None else add(terms, term)
    return affine(terms, -1.0 / (3.0 * len(present)))


def consistency_loss(probs, window: int = 3):
    """Mean |occupancy - neighborhood mean of occupancy|, window clipped."""
    probs = wrap(probs)
    if probs.ndim != 4:
        raise ShapeError(f"probabilities must be (C, D, H, W), got {probs.shape}")
    occ = reshape(affine(slice_channel(probs, 0), -1.0, 1.0),
                  (1,) + probs.shape[1:])
    return mean_all(abs_val(sub(occ, box_mean3d(occ, window))))


def loss_total(probs, labels, class_weights, cfg: LossConfig = LossConfig(),
               mask=None):
    """All loss terms as Vars: {"ce", "affinity", "consistency", "total"}."""
    ce = weighted_cross_entropy(probs, labels, class_weights, mask)
    aff = affinity_loss(probs, labels)
    cons = consistency_loss(probs, cfg.cons_window)
    total = add(add(ce, aff), affine(cons, cfg.lambda_cons))
    return {"ce": ce, "affinity": aff, "consistency": cons, "total": total}


def check_finite_terms(terms: dict) -> None:
    """Abort with the offending term's name if any loss went non-finite."""
    for name, var in terms.items():
        val = float(np.asarray(var))
        if not np.isfinite(val):
            raise TrainingError(f"loss term {name!r} is non-finite ({val})")
