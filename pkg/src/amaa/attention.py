"""Channel and spatial attention over voxel volumes, and their aggregation.

Two parallel branches refine a lifted volume V:

* a squeeze-excitation branch: global average pool to a (C,) descriptor,
  a two-layer bottleneck MLP (no biases), sigmoid channel weights, then a
  per-channel rescale of V;
* a parameter-free spatial branch: per-voxel energies from neighborhood
  statistics, e = (x - mean)^2 / (4 (var + lam)) + 0.5, turned into a
  single-channel attention map A = sigmoid(1/e) that multiplies V.

Because var >= 0 and lam > 0, every energy is >= 0.5 and finite, so A lies
in (0.5, sigmoid(2)] with equality exactly on constant neighborhoods.

The aggregation is residual: V' = V + g * Conv1x1x1([V_se ; V_sim]) with a
learnable scalar g. Initializing g to 0 makes the whole stage the identity
bit-for-bit, so enabling attention never perturbs a fresh model.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .volume_ops import (add, affine, broadcast_mul, channel_scale,
                         concat_channels, conv3d, divide, global_avg_pool3d,
                         matvec, mean_channels, neighborhood_stats, reciprocal,
                         relu, scale_by, sigmoid, sub, square)


@dataclass(frozen=True)
class SimamConfig:
    """Settings for the spatial branch."""

    lam: float = 1e-4
    window: int = 3
    channel_mode: str = "channel_mean"  # or "per_channel"

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"simam lambda must be positive, got {self.lam}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"simam window must be odd, got {self.window}")
        if self.channel_mode not in ("channel_mean", "per_channel"):
            raise ConfigError(f"unknown channel mode {self.channel_mode!r}")


def se_bottleneck_width(channels: int, ratio: int) -> int:
    """Hidden width of the SE MLP: max(1, floor(C / ratio))."""
    if ratio < 1:
        raise ConfigError(f"SE reduction ratio must be >= 1, got {ratio}")
    return max(1, channels // ratio)


def se_block_3d(volume, w_reduce, w_expand):
    """Squeeze-excitation: returns (channel weights s, rescaled volume).

    w_reduce is (hidden, C), w_expand is (C, hidden); neither has a bias.
    """
    z = global_avg_pool3d(volume)
    hidden = relu(matvec(w_reduce, z))
    s = sigmoid(matvec(w_expand, hidden))
    return s, channel_scale(volume, s)


def simam_energy(volume, cfg: SimamConfig):
    """Per-voxel energies from clipped-window statistics; always >= 0.5."""
    mean, var = neighborhood_stats(volume, cfg.window)
    dev = sub(volume, mean)
    denom = affine(var, 4.0, 4.0 * cfg.lam)
    return affine(divide(square(dev), denom), 1.0, 0.5)


def simam_3d(volume, cfg: SimamConfig):
    """SimAM attention: returns (attention map (1, D, H, W), modulated volume).

    channel_mean mode computes one energy map from the channel-mean volume;
    per_channel computes per-channel energies and averages the resulting
    attention into one map. Both keep the map in (0.5, sigmoid(2)].
    """
    if cfg.channel_mode == "channel_mean":
        base = mean_channels(volume)
        energy = simam_energy(base, cfg)
        attention = sigmoid(reciprocal(energy, floor=0.25))
    else:
        energy = simam_energy(volume, cfg)
        attention = mean_channels(sigmoid(reciprocal(energy, floor=0.25)))
    return attention, broadcast_mul(volume, attention)


def aggregate_residual(volume, v_se, v_sim, w_mix, b_mix, residual_scale):
    """V' = V + g * Conv1x1x1([V_se ; V_sim]) with learnable scalar g.

    w_mix maps 2C channels back to C. With g = 0 the output is the input
    unchanged (the conv result is multiplied by exactly zero and added).
    """
    mixed = conv3d(concat_channels(v_se, v_sim), w_mix, b_mix, stride=1)
    return add(volume, scale_by(mixed, residual_scale))
