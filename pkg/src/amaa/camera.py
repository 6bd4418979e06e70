"""Pinhole projection of voxel centers and 2D-to-3D feature lifting.

Geometry conventions, fixed across the package:

* camera frame: x right, y down, z forward (z > 0 is in front of the camera);
* voxel index (d, h, w): d along camera-forward depth, h vertical (down),
  w horizontal, so the center of voxel (d, h, w) sits at
  ``origin + cell_size * (w + 1/2, h + 1/2, d + 1/2)`` in x/y/z order;
* pixel (row, col) covers [col, col+1) x [row, row+1) in image coordinates,
  i.e. its center is at u = col + 1/2, v = row + 1/2.

Lifting samples a 2D feature map at each voxel's projection (the multi-scale
variant reuses one projection per pyramid level, so every voxel along a ray
shares the same source pixels). Voxels behind the camera or projecting
outside the image receive the zero vector. Feature maps smaller than the
camera image reuse the same intrinsics divided by the downscale factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Prim, apply_prim
from .errors import ConfigError, ShapeError
from .volume_ops import check_image


@dataclass(frozen=True)
class CameraGrid:
    """Intrinsics plus the voxel grid they observe.

    rotation/translation take grid-frame points to the camera frame; the
    default identity means the grid is axis-aligned with the camera.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    image_rows: int
    image_cols: int
    dims: tuple[int, int, int]  # (D, H, W)
    voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, z corner
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.image_rows < 1 or self.image_cols < 1:
            raise ConfigError("image dimensions must be at least 1x1")
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ConfigError(f"grid dims must be three positive ints, got {self.dims}")
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel size must be positive, got {self.voxel_size}")

    def voxel_centers(self, resolution=None) -> np.ndarray:
        """Camera-frame centers, shape (Dl, Hl, Wl, 3) in x/y/z order.

        A coarser resolution covers the same physical extent with larger
        cells (cell size = voxel_size * full_dim / res per axis).
        """
        d_full, h_full, w_full = self.dims
        dl, hl, wl = resolution if resolution is not None else self.dims
        cell_d = self.voxel_size * d_full / dl
        cell_h = self.voxel_size * h_full / hl
        cell_w = self.voxel_size * w_full / wl
        ox, oy, oz = self.origin
        xs = ox + cell_w * (np.arange(wl) + 0.5)
        ys = oy + cell_h * (np.arange(hl) + 0.5)
        zs = oz + cell_d * (np.arange(dl) + 0.5)
        grid = np.empty((dl, hl, wl, 3), dtype=np.float64)
        grid[..., 0] = xs[None, None, :]
        grid[..., 1] = ys[None, :, None]
        grid[..., 2] = zs[:, None, None]
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if not np.array_equal(rot, np.eye(3)) or t.any():
            grid = grid @ rot.T + t
        return grid


def project_points(grid: CameraGrid, points: np.ndarray):
    """Project camera-frame points to pixel coordinates.

    Returns (u, v, z, valid); valid is z > 0. u/v are full-resolution image
    coordinates (pixel centers at integer + 1/2).
    """
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    valid = z > 0.0
    safe_z = np.where(valid, z, 1.0)
    u = grid.fx * x / safe_z + grid.cx
    v = grid.fy * y / safe_z + grid.cy
    return u, v, z, valid


@dataclass
class SamplePlan:
    """Precomputed gather indices/weights mapping a feature map to voxels."""

    resolution: tuple[int, int, int]
    feat_shape: tuple[int, int]
    valid: np.ndarray          # (N,) bool over flattened voxels
    indices: np.ndarray        # (T, n_valid) flat pixel indices
    weights: np.ndarray        # (T, n_valid) sample weights
    sampling: str = "bilinear"


def build_sample_plan(grid: CameraGrid, feat_shape, resolution=None,
                      sampling: str = "bilinear") -> SamplePlan:
    """Projection plan for lifting a (rows_f, cols_f) map onto the voxel grid."""
    if sampling not in ("bilinear", "nearest"):
        raise ConfigError(f"unknown sampling mode {sampling!r}")
    rows_f, cols_f = feat_shape
    if rows_f < 1 or cols_f < 1:
        raise ShapeError(f"feature map must be at least 1x1, got {feat_shape}")
    resolution = tuple(resolution) if resolution is not None else grid.dims
    centers = grid.voxel_centers(resolution)
    u, v, z, valid = project_points(grid, centers)
    # Same intrinsics divided by the downscale factor of this pyramid level.
    su = cols_f / grid.image_cols
    sv = rows_f / grid.image_rows
    uf = (u * su).reshape(-1)
    vf = (v * sv).reshape(-1)
    valid = valid.reshape(-1)

    if sampling == "nearest":
        col = np.floor(uf).astype(np.int64)
        row = np.floor(vf).astype(np.int64)
        valid = valid & (col >= 0) & (col < cols_f) & (row >= 0) & (row < rows_f)
        idx = (row[valid] * cols_f + col[valid])[None, :]
        wts = np.ones_like(idx, dtype=np.float64)
    else:
        valid = valid & (uf >= 0.0) & (uf <= cols_f) & (vf >= 0.0) & (vf <= rows_f)
        xs = np.clip(uf[valid] - 0.5, 0.0, cols_f - 1.0)
        ys = np.clip(vf[valid] - 0.5, 0.0, rows_f - 1.0)
        x0 = np.floor(xs).astype(np.int64)
        y0 = np.floor(ys).astype(np.int64)
        x1 = np.minimum(x0 + 1, cols_f - 1)
        y1 = np.minimum(y0 + 1, rows_f - 1)
        tx = xs - x0
        ty = ys - y0
        idx = np.stack([
            y0 * cols_f + x0,
            y0 * cols_f + x1,
            y1 * cols_f + x0,
            y1 * cols_f + x1,
        ])
        wts = np.stack([
            (1.0 - ty) * (1.0 - tx),
            (1.0 - ty) * tx,
            ty * (1.0 - tx),
            ty * tx,
        ])
    return SamplePlan(resolution=resolution, feat_shape=(rows_f, cols_f),
                      valid=valid, indices=idx, weights=wts, sampling=sampling)


def _flosp_fwd(feat, plan: SamplePlan):
    check_image(feat)
    rows_f, cols_f = plan.feat_shape
    if feat.shape[1:] != (rows_f, cols_f):
        raise ShapeError(
            f"feature map {feat.shape[1:]} does not match plan {plan.feat_shape}"
        )
    c = feat.shape[0]
    flat = feat.reshape(c, rows_f * cols_f)
    n_vox = plan.valid.size
    out = np.zeros((c, n_vox), dtype=np.float64)
    gathered = flat[:, plan.indices] * plan.weights  # (C, T, n_valid)
    out[:, plan.valid] = gathered.sum(axis=1)
    return out.reshape((c,) + plan.resolution)


def _flosp_vjp(g, feat, out, plan: SamplePlan):
    c = feat.shape[0]
    gv = g.reshape(c, -1)[:, plan.valid]  # (C, n_valid)
    grad_flat = np.zeros((feat.shape[1] * feat.shape[2], c), dtype=np.float64)
    for t in range(plan.indices.shape[0]):
        np.add.at(grad_flat, plan.indices[t], (gv * plan.weights[t]).T)
    return (grad_flat.T.reshape(feat.shape),)


_flosp = Prim("flosp_sample", _flosp_fwd, _flosp_vjp)


def flosp_lift(features, grid: CameraGrid, resolution=None,
               sampling: str = "bilinear", plan: SamplePlan | None = None):
    """Lift a 2D feature map onto the voxel grid along camera rays.

    Every voxel receives the feature vector sampled at its projected pixel
    (bilinear by default); invalid voxels receive zeros. Pass a precomputed
    plan to skip re-projection when the geometry is fixed.
    """
    if plan is None:
        feat_arr = np.asarray(features)
        plan = build_sample_plan(grid, feat_arr.shape[1:], resolution, sampling)
    return apply_prim(_flosp, features, plan=plan)


@dataclass(frozen=True)
class ScaleMap:
    """Which pyramid level feeds which voxel resolution, ordered fine to coarse.

    levels[i] = (pyramid index, (Dl, Hl, Wl)); resolutions follow the full
    grid divided by 2**i, rounded up.
    """

    levels: tuple = field(default_factory=tuple)

    @staticmethod
    def build(grid: CameraGrid, n_scales: int) -> "ScaleMap":
        if n_scales < 1:
            raise ConfigError(f"need at least one scale, got {n_scales}")
        levels = []
        for i in range(n_scales):
            res = tuple(-(-dim // (1 << i)) for dim in grid.dims)
            levels.append((i, res))
        return ScaleMap(levels=tuple(levels))

    def __len__(self):
        return len(self.levels)


def multi_scale_lift(pyramid, grid: CameraGrid, scale_map: ScaleMap,
                     sampling: str = "bilinear", plans=None):
    """Lift each pyramid level onto its voxel resolution; fine to coarse.

    pyramid is a list of (C_l, rows_l, cols_l) feature maps aligned with
    scale_map.levels by pyramid index.
    """
    if len(pyramid) < len(scale_map):
        raise ShapeError(
            f"pyramid has {len(pyramid)} levels, scale map needs {len(scale_map)}"
        )
    out = []
    for slot, (feat_idx, resolution) in enumerate(scale_map.levels):
        feat = pyramid[feat_idx]
        plan = plans[slot] if plans is not None else None
        out.append(flosp_lift(feat, grid, resolution, sampling, plan=plan))
    return out
