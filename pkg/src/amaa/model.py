"""End-to-end network assembly: RGB image in, class probabilities out.

The dataflow is fixed; the config toggles decide which refinement nodes
exist in the recorded graph:

    2D conv encoder (stride-2 stages)
        -> lift the last n_scales feature maps onto the voxel grid
        -> per scale: channel attention / spatial attention / residual
           aggregation (any combination, or nothing at all)
        -> one 3x3x3 conv per scale (3D encoder)
        -> coarse-to-fine decoder; each stage may inject the matching
           encoder volume through a sigmoid gate scaled by alpha
        -> 1x1x1 class head + per-voxel softmax

The four standard variants map onto the toggles as A (none), B (channel),
C (channel + spatial), D (channel + spatial + gating). With everything
off the graph genuinely contains no attention or gating nodes, so A is a
true baseline rather than a zeroed-out D.

Initialization is keyed by parameter name, so any two variants draw
bit-identical values for the parameters they share. The residual scale
starts at 0 and gate projections are only created when widths differ,
which keeps a fresh attention stage an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (SimamConfig, aggregate_residual, se_block_3d,
                        se_bottleneck_width, simam_3d)
from .autodiff import Var, wrap
from .camera import CameraGrid, ScaleMap, build_sample_plan, multi_scale_lift
from .errors import ConfigError, ShapeError
from .fusion import DecoderStage, GateParams, decode_hierarchy
from .losses import LossConfig
from .params import ParamStore
from .volume_ops import conv2d, conv3d, relu, softmax_channels

VARIANTS = {
    "A": {"use_se": False, "use_simam": False, "use_afg": False},
    "B": {"use_se": True, "use_simam": False, "use_afg": False},
    "C": {"use_se": True, "use_simam": True, "use_afg": False},
    "D": {"use_se": True, "use_simam": True, "use_afg": True},
}


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 5
    widths: tuple = (8, 16, 32)
    n_scales: int = 2
    use_se: bool = False
    use_simam: bool = False
    use_afg: bool = False
    alpha: float = 0.75
    se_ratio: int = 4
    simam: SimamConfig = SimamConfig()
    loss: LossConfig = LossConfig()
    sampling: str = "bilinear"
    upsample_mode: str = "trilinear"
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"bad encoder widths {self.widths}")
        if not 1 <= self.n_scales <= len(self.widths):
            raise ConfigError(
                f"{self.n_scales} lifted scales need at least that many "
                f"encoder stages, have {len(self.widths)}"
            )
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.se_ratio < 1:
            raise ConfigError(f"se_ratio must be >= 1, got {self.se_ratio}")


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    """Standard ablation variant from a base config (toggles only)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected A/B/C/D")
    return replace(base, **VARIANTS[variant])


def variant_name(cfg: ModelConfig) -> str | None:
    toggles = {"use_se": cfg.use_se, "use_simam": cfg.use_simam,
               "use_afg": cfg.use_afg}
    for name, combo in VARIANTS.items():
        if combo == toggles:
            return name
    return None


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class Model:
    """Built network: parameter store plus the forward computation."""

    cfg: ModelConfig
    grid: CameraGrid
    store: ParamStore
    scale_map: ScaleMap
    plans: list
    feat_shapes: list  # (rows, cols) of each 2D encoder stage output
    lift_channels: list
    no_decay: frozenset = field(default_factory=frozenset)

    def param(self, name: str) -> Var:
        return self.store.get(name)

    def _encode_2d(self, image):
        x = wrap(image)
        expected = (3, self.grid.image_rows, self.grid.image_cols)
        if x.shape != expected:
            raise ShapeError(f"input image must be {expected}, got {x.shape}")
        feats = []
        for i in range(len(self.cfg.widths)):
            x = relu(conv2d(x, self.param(f"enc2d.{i}.weight"),
                            self.param(f"enc2d.{i}.bias"), stride=2))
            feats.append(x)
        return feats

    def _refine(self, volume, scale: int):
        cfg = self.cfg
        if cfg.use_se:
            _, v_se = se_block_3d(volume,
                                  self.param(f"agg.{scale}.se.reduce"),
                                  self.param(f"agg.{scale}.se.expand"))
        if cfg.use_simam:
            _, v_sim = simam_3d(volume, cfg.simam)
        if cfg.use_se and cfg.use_simam:
            return aggregate_residual(volume, v_se, v_sim,
                                      self.param(f"agg.{scale}.mix.weight"),
                                      self.param(f"agg.{scale}.mix.bias"),
                                      self.param(f"agg.{scale}.residual_scale"))
        if cfg.use_se:
            return v_se
        if cfg.use_simam:
            return v_sim
        return volume

    def forward(self, image):
        """(3, rows, cols) image -> (n_classes, D, H, W) probabilities."""
        cfg = self.cfg
        feats = self._encode_2d(image)
        pyramid = feats[len(cfg.widths) - cfg.n_scales:]
        lifted = multi_scale_lift(pyramid, self.grid, self.scale_map,
                                  cfg.sampling, self.plans)
        refined = [self._refine(v, l) for l, v in enumerate(lifted)]
        encoded = [relu(conv3d(v, self.param(f"enc3d.{l}.weight"),
                               self.param(f"enc3d.{l}.bias"), stride=1))
                   for l, v in enumerate(refined)]

        stages = []
        enc_feats = []
        for s in range(cfg.n_scales - 1):
            target = cfg.n_scales - 2 - s  # finer scale this stage lands on
            gate = None
            if cfg.use_afg:
                gate = GateParams(weight=self.param(f"dec.{s}.gate.weight"),
                                  bias=self.param(f"dec.{s}.gate.bias"))
            stages.append(DecoderStage(
                conv_weight=self.param(f"dec.{s}.conv.weight"),
                conv_bias=self.param(f"dec.{s}.conv.bias"),
                target_resolution=self.scale_map.levels[target][1],
                gate=gate,
                upsample_mode=cfg.upsample_mode,
            ))
            enc_feats.append(encoded[target] if cfg.use_afg else None)

        f = decode_hierarchy(encoded[-1], enc_feats, stages, cfg.alpha)
        logits = conv3d(f, self.param("head.weight"), self.param("head.bias"),
                        stride=1)
        return softmax_channels(logits)


def build_model(cfg: ModelConfig, grid: CameraGrid) -> Model:
    """Create parameters (seeded by name) and wire up the forward pass."""
    store = ParamStore()
    seed = cfg.seed
    no_decay = []

    def uniform(name, shape, fan_in):
        return store.create_uniform(name, shape, seed, 1.0 / math.sqrt(fan_in))

    def zeros(name, shape):
        no_decay.append(name)
        return store.add(name, np.zeros(shape))

    in_ch = 3
    feat_shapes = []
    rows, cols = grid.image_rows, grid.image_cols
    for i, width in enumerate(cfg.widths):
        uniform(f"enc2d.{i}.weight", (width, in_ch, 3, 3), in_ch * 9)
        zeros(f"enc2d.{i}.bias", (width,))
        rows, cols = _ceil_div(rows, 2), _ceil_div(cols, 2)
        if rows < 1 or cols < 1:
            raise ConfigError(f"image collapses at encoder stage {i}")
        feat_shapes.append((rows, cols))
        in_ch = width

    first_lift = len(cfg.widths) - cfg.n_scales
    lift_channels = list(cfg.widths[first_lift:])
    scale_map = ScaleMap.build(grid, cfg.n_scales)

    for l, ch in enumerate(lift_channels):
        if cfg.use_se:
            hidden = se_bottleneck_width(ch, cfg.se_ratio)
            uniform(f"agg.{l}.se.reduce", (hidden, ch), ch)
            uniform(f"agg.{l}.se.expand", (ch, hidden), hidden)
        if cfg.use_se and cfg.use_simam:
            uniform(f"agg.{l}.mix.weight", (ch, 2 * ch, 1, 1, 1), 2 * ch)
            zeros(f"agg.{l}.mix.bias", (ch,))
            zeros(f"agg.{l}.residual_scale", ())
        uniform(f"enc3d.{l}.weight", (ch, ch, 3, 3, 3), ch * 27)
        zeros(f"enc3d.{l}.bias", (ch,))

    for s in range(cfg.n_scales - 1):
        src = lift_channels[cfg.n_scales - 1 - s]
        dst = lift_channels[cfg.n_scales - 2 - s]
        uniform(f"dec.{s}.conv.weight", (dst, src, 3, 3, 3), src * 27)
        zeros(f"dec.{s}.conv.bias", (dst,))
        if cfg.use_afg:
            uniform(f"dec.{s}.gate.weight", (1, 2 * dst, 1, 1, 1), 2 * dst)
            zeros(f"dec.{s}.gate.bias", (1,))

    uniform("head.weight", (cfg.n_classes, lift_channels[0], 1, 1, 1),
            lift_channels[0])
    zeros("head.bias", (cfg.n_classes,))

    plans = []
    for slot, (feat_idx, resolution) in enumerate(scale_map.levels):
        shape = feat_shapes[first_lift + feat_idx]
        plans.append(build_sample_plan(grid, shape, resolution, cfg.sampling))

    return Model(cfg=cfg, grid=grid, store=store, scale_map=scale_map,
                 plans=plans, feat_shapes=feat_shapes,
                 lift_channels=lift_channels, no_decay=frozenset(no_decay))
