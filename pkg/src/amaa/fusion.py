"""Gated fusion of encoder features into the 3D decoder path.

At each decoder stage a single-channel mask M = sigmoid(Conv1x1x1([F ; V]))
is computed from the concatenated decoder feature F and the matching
encoder feature V, and the injection is F + alpha * (M * P(V)). alpha is a
fixed hyperparameter shared by all stages (not learned). P is an optional
1x1x1 channel projection used only when encoder and decoder widths differ.

alpha = 0 short-circuits: the gate is never evaluated and F is returned as
is, which makes "alpha = 0" and "injection branch removed" the same
computation rather than merely close.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Var, wrap
from .errors import ConfigError
from .volume_ops import (add, affine, broadcast_mul, concat_channels, conv3d,
                         crop3d, relu, sigmoid, upsample3d)


@dataclass
class GateParams:
    """Parameters of one fusion point.

    weight/bias: the 1-channel gate conv over (C_dec + C_enc) inputs.
    proj_weight/proj_bias: optional channel projection for the encoder
    feature, required exactly when C_enc != C_dec.
    """

    weight: Var
    bias: Var
    proj_weight: Var | None = None
    proj_bias: Var | None = None


def afg_gate(f_dec, v_enc, gate: GateParams):
    """Single-channel sigmoid mask from the concatenated features."""
    stacked = concat_channels(f_dec, v_enc)
    pre = conv3d(stacked, gate.weight, gate.bias, stride=1)
    return sigmoid(pre)


def afg_fuse(f_dec, v_enc, gate: GateParams, alpha: float):
    """F + alpha * (mask * projected encoder feature).

    alpha = 0 returns f_dec unchanged; alpha must be non-negative.
    """
    if alpha < 0:
        raise ConfigError(f"fusion strength alpha must be >= 0, got {alpha}")
    if alpha == 0.0:
        return wrap(f_dec)
    f_dec = wrap(f_dec)
    v_enc = wrap(v_enc)
    c_dec = f_dec.shape[0]
    c_enc = v_enc.shape[0]
    if c_enc != c_dec:
        if gate.proj_weight is None:
            raise ConfigError(
                f"encoder feature has {c_enc} channels but decoder has "
                f"{c_dec}; the fusion point needs a channel projection"
            )
        injected = conv3d(v_enc, gate.proj_weight, gate.proj_bias, stride=1)
    else:
        injected = v_enc
    mask = afg_gate(f_dec, v_enc, gate)
    return add(f_dec, affine(broadcast_mul(injected, mask), alpha))


@dataclass
class DecoderStage:
    """One coarse-to-fine step: upsample, conv+relu, optional gated fusion."""

    conv_weight: Var
    conv_bias: Var
    target_resolution: tuple[int, int, int]
    gate: GateParams | None = None
    upsample_mode: str = "trilinear"


def decode_hierarchy(bottleneck, encoder_features, stages, alpha: float):
    """Run decoder stages coarse to fine.

    encoder_features is aligned with stages (stage i fuses feature i); pass
    None entries (or gate=None on the stage) to skip fusion at that stage.
    Each stage upsamples by 2, crops to the stage's target resolution when
    the doubled size overshoots an odd grid, then applies conv + relu.
    """
    if len(encoder_features) != len(stages):
        raise ConfigError(
            f"{len(encoder_features)} encoder features for {len(stages)} stages"
        )
    f = wrap(bottleneck)
    for stage, enc in zip(stages, encoder_features):
        f = upsample3d(f, stage.upsample_mode)
        if f.shape[1:] != tuple(stage.target_resolution):
            f = crop3d(f, stage.target_resolution)
        f = relu(conv3d(f, stage.conv_weight, stage.conv_bias, stride=1))
        if stage.gate is not None and enc is not None:
            f = afg_fuse(f, enc, stage.gate, alpha)
    return f
