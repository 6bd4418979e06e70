"""Experiment drivers: ablation grid, alpha sweep, gradient audit.

Every driver consumes a RunConfig, trains through the normal loop, and
returns plain records that serialize losslessly to JSON, so the CSV
exports can be regenerated from a saved runs file and match it
field-for-field. CSV floats use repr() to keep full precision.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, replace

import numpy as np

from .attention import (aggregate_residual, se_block_3d, se_bottleneck_width,
                        simam_3d)
from .autodiff import GradCheckReport, grad_check
from .camera import CameraGrid, build_sample_plan, flosp_lift
from .config import RunConfig
from .errors import ConfigError
from .fusion import GateParams, afg_fuse, afg_gate
from .losses import (affinity_loss, class_weights_from_counts,
                     consistency_loss, loss_total, weighted_cross_entropy)
from .metrics import MetricsReport
from .model import ModelConfig, VARIANTS, build_model, variant_config
from .params import ParamStore
from .rng import SplitMix64, derive
from .scene import generate_split
from .training import EpochLog, train
from .volume_ops import (abs_val, add, affine, box_mean3d, broadcast_mul,
                         channel_scale, concat_channels, conv2d, conv3d,
                         crop3d, divide, global_avg_pool3d, log_shift,
                         matvec, mean_all, mean_channels, mul,
                         neighborhood_stats, reciprocal, relu, reshape,
                         scale_by, select_channel, sigmoid, slice_channel,
                         softmax_channels, square, sub, sum_all, upsample3d,
                         weighted_sum)

DEFAULT_ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
DEFAULT_ALPHA = 0.75


@dataclass
class RunRecord:
    """One trained model: its label, seed, final report, and loss history."""

    label: str
    seed: int
    alpha: float
    report: MetricsReport
    logs: list

    def to_dict(self) -> dict:
        return {"label": self.label, "seed": self.seed, "alpha": self.alpha,
                "report": self.report.to_dict(),
                "logs": [log.to_dict() for log in self.logs]}

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(label=data["label"], seed=data["seed"],
                   alpha=data["alpha"],
                   report=MetricsReport.from_dict(data["report"]),
                   logs=[EpochLog.from_dict(d) for d in data["logs"]])


def records_to_jsonable(records) -> list:
    return [rec.to_dict() for rec in records]


def records_from_jsonable(data) -> list:
    return [RunRecord.from_dict(d) for d in data]


def _train_one(model_cfg: ModelConfig, cfg: RunConfig, seed: int, label: str,
               train_samples, val_samples, progress=None) -> RunRecord:
    model_cfg = replace(model_cfg, seed=seed)
    model = build_model(model_cfg, cfg.grid)
    result = train(model, train_samples, val_samples,
                   replace(cfg.train, seed=seed))
    rec = RunRecord(label=label, seed=seed, alpha=model_cfg.alpha,
                    report=result.final_val, logs=result.logs)
    if progress is not None:
        progress(rec)
    return rec


def run_ablation(cfg: RunConfig, seeds=(0, 1, 2), variants=None,
                 progress=None) -> list:
    """Train every variant with every seed on one shared dataset."""
    variants = tuple(variants) if variants is not None else tuple(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}, expected one of "
                              f"{'/'.join(VARIANTS)}")
    train_s, val_s = generate_split(cfg.scene, cfg.grid, cfg.n_train,
                                    cfg.n_val)
    records = []
    for variant in variants:
        for seed in seeds:
            records.append(_train_one(variant_config(cfg.model, variant),
                                      cfg, seed, variant, train_s, val_s,
                                      progress))
    return records


def run_alpha_sweep(cfg: RunConfig, alphas=DEFAULT_ALPHA_GRID, seed=0,
                    progress=None) -> list:
    """Train the full model once per skip-gate strength on one dataset."""
    for a in alphas:
        if a < 0:
            raise ConfigError(f"alpha must be >= 0, got {a}")
    train_s, val_s = generate_split(cfg.scene, cfg.grid, cfg.n_train,
                                    cfg.n_val)
    full = variant_config(cfg.model, "D")
    return [_train_one(replace(full, alpha=float(a)), cfg, seed,
                       f"alpha={a:g}", train_s, val_s, progress)
            for a in alphas]


def _csv(header, rows) -> str:
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(repr(v) if isinstance(v, float) else str(v)
                           for v in row) + "\n")
    return out.getvalue()


def ablation_csv(records) -> str:
    return _csv(["variant", "seed", "sc_iou", "miou"],
                [(r.label, r.seed, r.report.sc_iou, r.report.miou)
                 for r in records])


def alpha_csv(records) -> str:
    return _csv(["alpha", "miou", "sc_iou", "precision", "recall"],
                [(r.alpha, r.report.miou, r.report.sc_iou,
                  r.report.precision, r.report.recall) for r in records])


def alpha_metadata(records) -> dict:
    """Sweep summary; records which strength is the shipped default."""
    best = max(records, key=lambda r: (r.report.miou, -r.alpha))
    return {"default_alpha": DEFAULT_ALPHA,
            "grid": [r.alpha for r in records],
            "best_alpha": best.alpha,
            "best_miou": best.report.miou}


def category_csv(records) -> str:
    """Long-form per-class IoU table, one row per (run, semantic class)."""
    rows = []
    for rec in records:
        for i, iou in enumerate(rec.report.class_iou):
            rows.append((rec.label, f"class_{i + 1}", rec.seed, iou))
    return _csv(["method", "category", "seed", "iou"], rows)


def loss_csv(logs) -> str:
    return _csv(["epoch", "ce", "affinity", "consistency", "total"],
                [(log.epoch, log.ce, log.affinity, log.consistency,
                  log.total) for log in logs])


def median_miou(records, label: str) -> float:
    vals = sorted(r.report.miou for r in records if r.label == label)
    if not vals:
        raise ConfigError(f"no records labeled {label!r}")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return 0.5 * (vals[mid - 1] + vals[mid])


# --------------------------------------------------------------------------
# Gradient audit: one named check per differentiable building block, each a
# tiny randomized scalar computation compared against central differences.

_CHECKS = []


def _check(name):
    def register(fn):
        _CHECKS.append((name, fn))
        return fn
    return register


def check_names() -> list:
    return [name for name, _ in _CHECKS]


def _rand(store: ParamStore, name: str, shape, seed: int, lo=-1.0, hi=1.0):
    rng = SplitMix64(derive(seed, "gradcheck:" + name))
    n = int(np.prod(shape)) if shape else 1
    return store.add(name, rng.uniform_array(n, lo, hi).reshape(shape))


def _fixed(seed: int, name: str, shape):
    rng = SplitMix64(derive(seed, "gradcheck-const:" + name))
    n = int(np.prod(shape))
    return rng.uniform_array(n, -1.0, 1.0).reshape(shape)


def _readout(var, seed: int, tag="readout"):
    return weighted_sum(var, _fixed(seed, tag, var.shape))


_VOL = (2, 3, 3, 3)


@_check("add_sub_mul")
def _add_sub_mul(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    b = _rand(s, "b", _VOL, seed)
    return lambda: _readout(add(mul(a, b), sub(a, b)), seed), s


@_check("divide")
def _divide(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    b = _rand(s, "b", _VOL, seed, lo=0.5, hi=2.0)
    return lambda: _readout(divide(a, b), seed), s


@_check("affine_square_abs")
def _affine_square_abs(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    return lambda: _readout(abs_val(affine(square(a), 1.5, -0.25)), seed), s


@_check("relu")
def _relu(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    return lambda: _readout(relu(a), seed), s


@_check("sigmoid")
def _sigmoid(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed, lo=-3.0, hi=3.0)
    return lambda: _readout(sigmoid(a), seed), s


@_check("log_shift_reciprocal")
def _log_recip(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed, lo=0.3, hi=1.8)
    return (lambda: _readout(log_shift(reciprocal(a, 0.05)), seed), s)


@_check("reductions")
def _reductions(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    return lambda: add(sum_all(square(a)), mean_all(a)), s


@_check("scale_by")
def _scale(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    g = _rand(s, "g", (), seed, lo=0.2, hi=1.2)
    return lambda: _readout(scale_by(a, g), seed), s


@_check("channel_scale_broadcast")
def _chan(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    v = _rand(s, "v", (2,), seed, lo=0.2, hi=1.5)
    m = _rand(s, "m", (1,) + _VOL[1:], seed)
    return lambda: _readout(broadcast_mul(channel_scale(a, v), m), seed), s


@_check("matvec")
def _matvec(seed):
    s = ParamStore()
    w = _rand(s, "w", (3, 4), seed)
    z = _rand(s, "z", (4,), seed)
    return lambda: _readout(matvec(w, z), seed), s


@_check("conv2d")
def _conv2d(seed):
    s = ParamStore()
    x = _rand(s, "x", (2, 4, 4), seed)
    w = _rand(s, "w", (2, 2, 3, 3), seed)
    b = _rand(s, "b", (2,), seed)
    return lambda: _readout(conv2d(x, w, b), seed), s


@_check("conv2d_stride2")
def _conv2d_s2(seed):
    s = ParamStore()
    x = _rand(s, "x", (2, 5, 5), seed)
    w = _rand(s, "w", (2, 2, 3, 3), seed)
    b = _rand(s, "b", (2,), seed)
    return lambda: _readout(conv2d(x, w, b, stride=2), seed), s


@_check("conv3d")
def _conv3d(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    w = _rand(s, "w", (2, 2, 3, 3, 3), seed)
    b = _rand(s, "b", (2,), seed)
    return lambda: _readout(conv3d(x, w, b), seed), s


@_check("conv3d_1x1")
def _conv3d_1x1(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    w = _rand(s, "w", (3, 2, 1, 1, 1), seed)
    b = _rand(s, "b", (3,), seed)
    return lambda: _readout(conv3d(x, w, b), seed), s


@_check("global_avg_pool3d")
def _gap(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    return lambda: _readout(global_avg_pool3d(x), seed), s


@_check("box_mean3d")
def _box(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    return lambda: _readout(box_mean3d(x, 3), seed), s


@_check("neighborhood_stats")
def _stats(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)

    def f():
        m, v = neighborhood_stats(x, 3)
        return add(_readout(m, seed, "readout-m"),
                   _readout(v, seed, "readout-v"))
    return f, s


@_check("concat_slice_select")
def _concat(seed):
    s = ParamStore()
    a = _rand(s, "a", _VOL, seed)
    b = _rand(s, "b", (1,) + _VOL[1:], seed)
    labels = np.array(SplitMix64(derive(seed, "lbl")).uniform_array(27, 0, 3)
                      ).astype(np.int64).reshape(3, 3, 3)

    def f():
        cat = concat_channels(a, b)
        picked = select_channel(cat, labels)
        return add(_readout(slice_channel(cat, 2), seed, "readout-s"),
                   _readout(picked, seed, "readout-p"))
    return f, s


@_check("mean_channels")
def _meanc(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    return lambda: _readout(mean_channels(x), seed), s


@_check("crop_reshape")
def _crop(seed):
    s = ParamStore()
    x = _rand(s, "x", (2, 4, 4, 4), seed)

    def f():
        c = crop3d(x, (3, 3, 3))
        return _readout(reshape(c, (2, 27)), seed)
    return f, s


@_check("upsample3d_trilinear")
def _up_tri(seed):
    s = ParamStore()
    x = _rand(s, "x", (2, 2, 2, 2), seed)
    return lambda: _readout(upsample3d(x, "trilinear"), seed), s


@_check("upsample3d_nearest")
def _up_near(seed):
    s = ParamStore()
    x = _rand(s, "x", (2, 2, 2, 2), seed)
    return lambda: _readout(upsample3d(x, "nearest"), seed), s


@_check("softmax_channels")
def _softmax(seed):
    s = ParamStore()
    x = _rand(s, "x", (3, 2, 2, 2), seed, lo=-2.0, hi=2.0)
    return lambda: _readout(softmax_channels(x), seed), s


@_check("se_block")
def _se(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    hidden = se_bottleneck_width(2, 4)
    wr = _rand(s, "wr", (hidden, 2), seed)
    we = _rand(s, "we", (2, hidden), seed)
    return lambda: _readout(se_block_3d(x, wr, we)[1], seed), s


@_check("simam")
def _simam(seed):
    from .attention import SimamConfig
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    cfg = SimamConfig()
    return lambda: _readout(simam_3d(x, cfg)[1], seed), s


@_check("aggregate_residual")
def _agg(seed):
    s = ParamStore()
    x = _rand(s, "x", _VOL, seed)
    v_se = _rand(s, "v_se", _VOL, seed)
    v_sim = _rand(s, "v_sim", _VOL, seed)
    w = _rand(s, "w", (2, 4, 1, 1, 1), seed)
    b = _rand(s, "b", (2,), seed)
    g = _rand(s, "g", (), seed, lo=0.2, hi=0.9)
    return (lambda: _readout(aggregate_residual(x, v_se, v_sim, w, b, g),
                             seed), s)


@_check("afg_gate_fuse")
def _afg(seed):
    s = ParamStore()
    f_dec = _rand(s, "f_dec", _VOL, seed)
    v_enc = _rand(s, "v_enc", _VOL, seed)
    w = _rand(s, "w", (1, 4, 1, 1, 1), seed)
    b = _rand(s, "b", (1,), seed)
    gate = GateParams(weight=w, bias=b)

    def f():
        return add(_readout(afg_gate(f_dec, v_enc, gate), seed, "readout-g"),
                   _readout(afg_fuse(f_dec, v_enc, gate, 0.75), seed,
                            "readout-f"))
    return f, s


_LIFT_GRID = CameraGrid(fx=6.0, fy=6.0, cx=3.0, cy=3.0, image_rows=6,
                        image_cols=6, dims=(3, 3, 3), voxel_size=0.3,
                        origin=(-0.45, -0.45, 0.3))


@_check("flosp_lift_bilinear")
def _lift_bi(seed):
    s = ParamStore()
    feats = _rand(s, "feats", (2, 3, 3), seed)
    plan = build_sample_plan(_LIFT_GRID, (3, 3), sampling="bilinear")
    return (lambda: _readout(flosp_lift(feats, _LIFT_GRID, plan=plan), seed),
            s)


@_check("flosp_lift_nearest")
def _lift_near(seed):
    s = ParamStore()
    feats = _rand(s, "feats", (2, 3, 3), seed)
    plan = build_sample_plan(_LIFT_GRID, (3, 3), sampling="nearest")
    return (lambda: _readout(flosp_lift(feats, _LIFT_GRID,
                                        sampling="nearest", plan=plan),
                             seed), s)


def _loss_inputs(seed):
    s = ParamStore()
    logits = _rand(s, "logits", (3, 2, 2, 2), seed, lo=-2.0, hi=2.0)
    labels = np.array(SplitMix64(derive(seed, "loss-lbl"))
                      .uniform_array(8, 0, 3)).astype(np.int64)
    labels = labels.reshape(2, 2, 2)
    weights = class_weights_from_counts(np.array([4.0, 2.0, 2.0]))
    return s, logits, labels, weights


@_check("cross_entropy")
def _ce(seed):
    s, logits, labels, weights = _loss_inputs(seed)
    return (lambda: weighted_cross_entropy(softmax_channels(logits), labels,
                                           weights), s)


@_check("affinity_loss")
def _aff(seed):
    s, logits, labels, _ = _loss_inputs(seed)
    return lambda: affinity_loss(softmax_channels(logits), labels), s


@_check("consistency_loss")
def _cons(seed):
    s, logits, _, _ = _loss_inputs(seed)
    return lambda: consistency_loss(softmax_channels(logits)), s


_MICRO_GRID = CameraGrid(fx=10.0, fy=10.0, cx=4.0, cy=4.0, image_rows=8,
                         image_cols=8, dims=(4, 4, 4), voxel_size=0.25,
                         origin=(-0.5, -0.5, 0.4))


@_check("micro_model")
def _micro(seed):
    cfg = ModelConfig(n_classes=3, widths=(2, 3), n_scales=2, use_se=True,
                      use_simam=True, use_afg=True, seed=seed)
    model = build_model(cfg, _MICRO_GRID)
    rng = SplitMix64(derive(seed, "micro-input"))
    rgb = rng.uniform_array(3 * 64, 0.0, 1.0).reshape(3, 8, 8)
    labels = np.array(rng.uniform_array(64, 0, 3)).astype(np.int64)
    labels = labels.reshape(4, 4, 4)
    weights = class_weights_from_counts(
        np.bincount(labels.ravel(), minlength=3).astype(np.float64))

    # The loss averages over 64 voxels, so a single head-bias component can
    # land within the central-difference truncation floor by chance. The
    # probe term keeps every gradient well scaled without shortening the
    # chain under test.
    probe = rng.uniform_array(3 * 64, -1.0, 1.0).reshape(3, 4, 4, 4)

    def f():
        probs = model.forward(rgb)
        total = loss_total(probs, labels, weights, cfg.loss)["total"]
        return add(total, weighted_sum(probs, probe))
    return f, model.store


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_check(name: str, seed: int = 0, h=1e-3,
              tolerance=1e-4) -> CheckResult:
    """Run one named check (see check_names()) for one seed."""
    for check_name, make in _CHECKS:
        if check_name == name:
            f, params = make(seed)
            report: GradCheckReport = grad_check(f, params, h=h,
                                                 tolerance=tolerance)
            return CheckResult(name=name, seed=seed,
                               max_error=report.max_error,
                               tolerance=tolerance)
    raise ConfigError(f"unknown gradient check {name!r}")


def gradcheck_suite(seeds=(0, 1, 2, 3, 4), h=1e-3,
                    tolerance=1e-4) -> list:
    """Run every registered check once per seed."""
    return [run_check(name, seed, h, tolerance)
            for name, _ in _CHECKS for seed in seeds]


def gradcheck_csv(results) -> str:
    return _csv(["check", "seed", "max_rel_err", "tolerance", "passed"],
                [(r.name, r.seed, r.max_error, r.tolerance, r.passed)
                 for r in results])
