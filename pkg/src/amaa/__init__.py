"""Monocular semantic scene completion on dense voxel grids.

A single RGB view goes in; a per-voxel class distribution over a metric
grid comes out. The pipeline is a small 2D feature pyramid, line-of-sight
lifting of each pyramid level into 3D, channel and spatial attention
recalibration fused as a residual, and a coarse-to-fine decoder whose skip
connections pass through a learned gate. Everything runs on float64 numpy
with a tape-based autodiff layer, so runs are reproducible bit-for-bit
from a seed.
"""

__version__ = "0.1.0"
