"""Procedural desk-scale scenes and their monocular renderings.

A scene is a labeled voxel grid: a floor slab at the bottom (h = H-1, since
h points down), a far wall at d = D-1, a left wall at w = 0, and a few
axis-aligned boxes resting on the floor. Boxes are drawn after the walls
and later boxes overwrite earlier ones, so occlusion along camera rays
exists by construction.

The paired RGB input is ray-cast from the camera: each pixel marches its
viewing ray in steps of 0.4 voxel, takes the first non-empty voxel, and
shades the class color by 1 / (1 + depth). Everything is a pure function
of (spec, seed), bit-identical across runs.

The per-scene draw order is part of the format: object count k, then for
each object its class, size (sd, sh, sw) and position (d0, w0), all from
one stream seeded by derive(seed, "scene"). Tests replay this walk.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass

import numpy as np

from .camera import CameraGrid
from .errors import ConfigError, ShapeError
from .rng import SplitMix64, derive
from .volume_io import load_volume, save_volume

FLOOR_CLASS = 1
WALL_CLASS = 2


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for the generator; defaults give the standard desk dataset."""

    dims: tuple = (16, 12, 16)  # (D, H, W)
    n_classes: int = 5
    n_objects: tuple = (2, 4)
    object_size: tuple = (2, 5)
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need empty plus one class, got C={self.n_classes}")
        d, h, w = self.dims
        if d < 2 or h < 2 or w < 2:
            raise ConfigError(
                f"grid {self.dims} too small for floor and wall slabs"
            )
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad object count range [{lo}, {hi}]")
        slo, shi = self.object_size
        if slo < 1 or shi < slo:
            raise ConfigError(f"bad object size range [{slo}, {shi}]")
        if shi > min(d, h - 1, w):
            raise ConfigError(
                f"objects up to {shi} voxels cannot rest on the floor of a "
                f"{self.dims} grid"
            )

    def box_classes(self) -> range:
        """Class ids the boxes draw from; reuses wall/floor ids when C < 4."""
        return range(min(3, self.n_classes - 1), self.n_classes)


def default_camera_grid() -> CameraGrid:
    """Desk-scale view: 64x48 image of a 16x12x16 grid at 0.08 m voxels.

    The origin centers the grid laterally and vertically; depth starts at
    0.32 m so every voxel is strictly in front of the camera.
    """
    return CameraGrid(
        fx=52.0, fy=52.0, cx=32.0, cy=24.0,
        image_rows=48, image_cols=64,
        dims=(16, 12, 16), voxel_size=0.08,
        origin=(-0.64, -0.48, 0.32),
    )


def default_palette(n_classes: int) -> np.ndarray:
    """Distinct base color per semantic class; row 0 (empty) stays black."""
    if n_classes < 2:
        raise ConfigError(f"palette needs at least 2 classes, got {n_classes}")
    pal = np.zeros((n_classes, 3))
    for c in range(1, n_classes):
        hue = (c - 1) / (n_classes - 1)
        pal[c] = colorsys.hsv_to_rgb(hue, 0.75, 1.0)
    return pal


def generate_scene(spec: SceneSpec, seed: int) -> np.ndarray:
    """Labeled (D, H, W) grid for one seed; see the module docstring."""
    d, h, w = spec.dims
    labels = np.zeros((d, h, w), dtype=np.int64)
    labels[:, h - 1, :] = FLOOR_CLASS
    labels[d - 1, :, :] = WALL_CLASS
    labels[:, :, 0] = WALL_CLASS

    rng = SplitMix64(derive(seed, "scene"))
    classes = spec.box_classes()
    n_boxes = rng.randint(spec.n_objects[0], spec.n_objects[1])
    for _ in range(n_boxes):
        cls = rng.randint(classes.start, classes.stop - 1)
        sd = rng.randint(spec.object_size[0], spec.object_size[1])
        sh = rng.randint(spec.object_size[0], spec.object_size[1])
        sw = rng.randint(spec.object_size[0], spec.object_size[1])
        d0 = rng.randint(0, d - sd)
        w0 = rng.randint(0, w - sw)
        labels[d0:d0 + sd, h - 1 - sh:h - 1, w0:w0 + sw] = cls
    return labels


def march_first_hit(labels, grid: CameraGrid):
    """First occupied voxel along every pixel ray, by uniform sampling.

    Samples each ray at arc lengths step, 2*step, ... with step = 0.4 voxel
    until past the farthest grid corner. Returns (hit, index, depth):
    hit is a (rows, cols) bool mask, index holds the (d, h, w) of the first
    occupied voxel (-1 where missed), depth the camera-frame z of the
    sample point that landed in it (inf where missed).
    """
    labels = np.asarray(labels)
    if labels.shape != tuple(grid.dims):
        raise ShapeError(f"labels {labels.shape} do not match grid {grid.dims}")

    rows, cols = grid.image_rows, grid.image_cols
    u = (np.arange(cols) + 0.5 - grid.cx) / grid.fx
    v = (np.arange(rows) + 0.5 - grid.cy) / grid.fy
    dirs = np.empty((rows, cols, 3))
    dirs[..., 0] = u[None, :]
    dirs[..., 1] = v[:, None]
    dirs[..., 2] = 1.0
    unit = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    rot = np.asarray(grid.rotation)
    trans = np.asarray(grid.translation)
    has_pose = not (np.array_equal(rot, np.eye(3)) and not trans.any())

    # march until past the farthest grid corner seen from the camera
    dgrid, hgrid, wgrid = grid.dims
    ox, oy, oz = grid.origin
    corners = np.array([
        (ox + i * wgrid * grid.voxel_size,
         oy + j * hgrid * grid.voxel_size,
         oz + k * dgrid * grid.voxel_size)
        for i in (0, 1) for j in (0, 1) for k in (0, 1)
    ])
    if has_pose:
        corners = corners @ rot.T + trans
    step = 0.4 * grid.voxel_size
    n_steps = int(np.ceil(np.linalg.norm(corners, axis=1).max() / step)) + 1

    hit = np.zeros((rows, cols), dtype=bool)
    index = np.full((rows, cols, 3), -1, dtype=np.int64)
    depth = np.full((rows, cols), np.inf)
    alive = np.ones((rows, cols), dtype=bool)
    for i in range(1, n_steps + 1):
        if not alive.any():
            break
        p_cam = unit[alive] * (i * step)
        p = (p_cam - trans) @ rot if has_pose else p_cam
        wi = np.floor((p[:, 0] - ox) / grid.voxel_size).astype(np.int64)
        hi = np.floor((p[:, 1] - oy) / grid.voxel_size).astype(np.int64)
        di = np.floor((p[:, 2] - oz) / grid.voxel_size).astype(np.int64)
        inside = ((di >= 0) & (di < dgrid) & (hi >= 0) & (hi < hgrid)
                  & (wi >= 0) & (wi < wgrid))
        lab = np.zeros(len(p), dtype=np.int64)
        lab[inside] = labels[di[inside], hi[inside], wi[inside]]
        found = lab != 0
        if found.any():
            pix = np.argwhere(alive)[found]
            hit[pix[:, 0], pix[:, 1]] = True
            index[pix[:, 0], pix[:, 1], 0] = di[found]
            index[pix[:, 0], pix[:, 1], 1] = hi[found]
            index[pix[:, 0], pix[:, 1], 2] = wi[found]
            depth[pix[:, 0], pix[:, 1]] = p_cam[found, 2]
            still = alive[alive].copy()
            still[found] = False
            alive[alive] = still
    return hit, index, depth


def render_rgb(labels, grid: CameraGrid, palette) -> np.ndarray:
    """(3, rows, cols) image; black where no ray hits an occupied voxel.

    Hit pixels show palette[class] scaled by 1 / (1 + depth).
    """
    labels = np.asarray(labels)
    palette = np.asarray(palette, dtype=np.float64)
    if palette.ndim != 2 or palette.shape[1] != 3 \
            or palette.shape[0] <= labels.max():
        raise ShapeError(
            f"palette {palette.shape} cannot color class {int(labels.max())}"
        )
    hit, index, depth = march_first_hit(labels, grid)
    img = np.zeros((3, grid.image_rows, grid.image_cols))
    if hit.any():
        idx = index[hit]
        classes = labels[idx[:, 0], idx[:, 1], idx[:, 2]]
        shade = 1.0 / (1.0 + depth[hit])
        img[:, hit] = (palette[classes] * shade[:, None]).T
    return img


@dataclass(frozen=True)
class SceneSample:
    """One training example: rendered input plus its label volume."""

    rgb: np.ndarray
    labels: np.ndarray
    grid: CameraGrid
    seed: int


def make_sample(spec: SceneSpec, grid: CameraGrid, seed: int,
                palette=None) -> SceneSample:
    if tuple(grid.dims) != tuple(spec.dims):
        raise ConfigError(f"grid dims {grid.dims} != scene dims {spec.dims}")
    palette = default_palette(spec.n_classes) if palette is None else palette
    labels = generate_scene(spec, seed)
    rgb = render_rgb(labels, grid, palette)
    return SceneSample(rgb=rgb, labels=labels, grid=grid, seed=seed)


def dataset_seeds(spec: SceneSpec, n_train: int, n_val: int):
    """Disjoint per-split seed lists: train first, then val."""
    base = spec.seed
    train = [base + i for i in range(n_train)]
    val = [base + n_train + j for j in range(n_val)]
    return train, val


def generate_split(spec: SceneSpec, grid: CameraGrid, n_train: int,
                   n_val: int):
    """In-memory dataset: (train samples, val samples)."""
    palette = default_palette(spec.n_classes)
    train_seeds, val_seeds = dataset_seeds(spec, n_train, n_val)
    train = [make_sample(spec, grid, s, palette) for s in train_seeds]
    val = [make_sample(spec, grid, s, palette) for s in val_seeds]
    return train, val


def make_dataset(spec: SceneSpec, grid: CameraGrid, out_dir, n_train: int,
                 n_val: int) -> dict:
    """Render every scene to disk and write manifest.json alongside.

    File contents depend only on (spec, grid), so regenerating produces
    byte-identical files. Paths in the manifest are relative to out_dir.
    """
    if n_train < 1 or n_val < 1:
        raise ConfigError(f"need at least one scene per split, got "
                          f"{n_train} train / {n_val} val")
    os.makedirs(out_dir, exist_ok=True)
    palette = default_palette(spec.n_classes)
    train_seeds, val_seeds = dataset_seeds(spec, n_train, n_val)
    manifest = {"version": 1, "train": [], "val": []}
    for split, seeds in (("train", train_seeds), ("val", val_seeds)):
        for i, seed in enumerate(seeds):
            sample = make_sample(spec, grid, seed, palette)
            rgb_name = f"{split}_{i:03d}_rgb.vox"
            lab_name = f"{split}_{i:03d}_labels.vox"
            save_volume(os.path.join(out_dir, rgb_name),
                        sample.rgb[:, None, :, :])
            save_volume(os.path.join(out_dir, lab_name),
                        sample.labels[None].astype(np.uint16))
            manifest[split].append(
                {"rgb": rgb_name, "labels": lab_name, "seed": seed})
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return manifest


def load_dataset(manifest_path):
    """Read a make_dataset tree back into SceneSample lists (no grid)."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise ConfigError(f"unsupported manifest version {manifest.get('version')}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    out = {}
    for split in ("train", "val"):
        samples = []
        for entry in manifest[split]:
            rgb = load_volume(os.path.join(root, entry["rgb"]))[:, 0, :, :]
            labels = load_volume(
                os.path.join(root, entry["labels"]))[0].astype(np.int64)
            samples.append(SceneSample(rgb=rgb, labels=labels, grid=None,
                                       seed=entry["seed"]))
        out[split] = samples
    return out["train"], out["val"]
