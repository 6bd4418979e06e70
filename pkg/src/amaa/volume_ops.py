"""Differentiable primitives over dense channel-first volumes.

A voxel volume is a float64 array of shape (C, D, H, W): channels, then
depth (camera-forward), height (down), width (right). A 2D feature map is
(C, rows, cols). Both conventions are plain numpy arrays; ``check_volume``
and ``check_image`` validate them at module boundaries.

Every public function here is a recorded primitive (see ``autodiff``): it
accepts Vars or arrays, returns a Var, and registers an exact VJP. Padding
behavior is part of each contract:

* conv2d/conv3d: zero same-padding of floor(k/2), output dims ceil(dim/stride),
  k in {1, 3}, stride in {1, 2};
* box_mean3d / neighborhood_stats: windows are clipped at the boundary (no
  zero padding) and divide by the actual in-bounds count; variance is the
  population variance with tiny negative values clamped to 0;
* upsample3d: factor 2, nearest or trilinear (edge-clamped, half-voxel
  aligned centers).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Prim, apply_prim, wrap
from .errors import ShapeError

# ---------------------------------------------------------------------------
# shape validation


def check_volume(x, channels: int | None = None) -> np.ndarray:
    """Validate a (C, D, H, W) float64 volume and return it as an ndarray."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"volume must be rank 4 (C, D, H, W), got shape {arr.shape}")
    if arr.dtype != np.float64:
        raise ShapeError(f"volume must be float64, got {arr.dtype}")
    if channels is not None and arr.shape[0] != channels:
        raise ShapeError(f"expected {channels} channels, got {arr.shape[0]}")
    return arr


def check_image(x, channels: int | None = None) -> np.ndarray:
    """Validate a (C, rows, cols) float64 feature map."""
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"image must be rank 3 (C, rows, cols), got shape {arr.shape}")
    if arr.dtype != np.float64:
        raise ShapeError(f"image must be float64, got {arr.dtype}")
    if channels is not None and arr.shape[0] != channels:
        raise ShapeError(f"expected {channels} channels, got {arr.shape[0]}")
    return arr


def check_finite(x, what: str = "volume") -> np.ndarray:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{what} contains non-finite values")
    return arr


def _same_shape(a, b, opname):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_add = Prim("add",
            lambda a, b: (_same_shape(a, b, "add"), a + b)[1],
            lambda g, a, b, out: (g, g))

_sub = Prim("sub",
            lambda a, b: (_same_shape(a, b, "sub"), a - b)[1],
            lambda g, a, b, out: (g, -g))

_mul = Prim("mul",
            lambda a, b: (_same_shape(a, b, "mul"), a * b)[1],
            lambda g, a, b, out: (g * b, g * a))

_divide = Prim("divide",
               lambda a, b: (_same_shape(a, b, "divide"), a / b)[1],
               lambda g, a, b, out: (g / b, -g * a / (b * b)))

_affine = Prim("affine",
               lambda a, scale, shift: scale * a + shift,
               lambda g, a, out, scale, shift: (g * scale,))

_relu = Prim("relu",
             lambda a: np.maximum(a, 0.0),
             lambda g, a, out: (g * (a > 0.0),))

_sigmoid = Prim("sigmoid",
                lambda a: _stable_sigmoid(a),
                lambda g, a, out: (g * out * (1.0 - out),))

_square = Prim("square",
               lambda a: a * a,
               lambda g, a, out: (2.0 * a * g,))

_abs = Prim("abs",
            lambda a: np.abs(a),
            lambda g, a, out: (g * np.sign(a),))

_log_shift = Prim("log_shift",
                  lambda a, eps: np.log(a + eps),
                  lambda g, a, out, eps: (g / (a + eps),))


def _recip_fwd(a, floor):
    return 1.0 / np.maximum(a, floor)


def _recip_vjp(g, a, out, floor):
    return (np.where(a > floor, -g * out * out, 0.0),)


_reciprocal = Prim("reciprocal", _recip_fwd, _recip_vjp)

_sum_all = Prim("sum_all",
                lambda a: np.asarray(np.sum(a)),
                lambda g, a, out: (np.broadcast_to(g, a.shape).copy(),))

_mean_all = Prim("mean_all",
                 lambda a: np.asarray(np.mean(a)),
                 lambda g, a, out: (np.broadcast_to(g / a.size, a.shape).copy(),))

_weighted_sum = Prim("weighted_sum",
                     lambda a, weights: np.asarray(np.sum(a * weights)),
                     lambda g, a, out, weights: (g * weights,))


def _scale_by_fwd(a, s):
    if s.shape != ():
        raise ShapeError(f"scale_by needs a scalar factor, got shape {s.shape}")
    return a * s


_scale_by = Prim("scale_by", _scale_by_fwd,
                 lambda g, a, s, out: (g * s, np.asarray(np.sum(g * a))))


def add(a, b):
    return apply_prim(_add, a, b)


def sub(a, b):
    return apply_prim(_sub, a, b)


def mul(a, b):
    return apply_prim(_mul, a, b)


def divide(a, b):
    return apply_prim(_divide, a, b)


def affine(a, scale: float, shift: float = 0.0):
    """scale * a + shift with constant (non-learned) coefficients."""
    return apply_prim(_affine, a, scale=float(scale), shift=float(shift))


def relu(a):
    return apply_prim(_relu, a)


def sigmoid(a):
    return apply_prim(_sigmoid, a)


def square(a):
    return apply_prim(_square, a)


def abs_val(a):
    return apply_prim(_abs, a)


def log_shift(a, eps: float = 1e-12):
    """log(a + eps); eps guards exact zeros."""
    return apply_prim(_log_shift, a, eps=float(eps))


def reciprocal(a, floor: float):
    """1 / max(a, floor); the floor keeps the op finite near zero."""
    if floor <= 0.0:
        raise ShapeError(f"reciprocal floor must be positive, got {floor}")
    return apply_prim(_reciprocal, a, floor=float(floor))


def sum_all(a):
    return apply_prim(_sum_all, a)


def mean_all(a):
    return apply_prim(_mean_all, a)


def weighted_sum(a, weights):
    """sum(a * weights) with a constant weight array (no grad to weights)."""
    w = np.asarray(weights, dtype=np.float64)
    return apply_prim(_weighted_sum, a, weights=w)


def scale_by(a, s):
    """Multiply by a learnable scalar (0-d Var)."""
    return apply_prim(_scale_by, a, s)


# ---------------------------------------------------------------------------
# channel-shaped products


def _channel_scale_fwd(vol, vec):
    check_volume(vol)
    if vec.shape != (vol.shape[0],):
        raise ShapeError(
            f"channel_scale: vector shape {vec.shape} does not match "
            f"{vol.shape[0]} channels"
        )
    return vol * vec[:, None, None, None]


_channel_scale = Prim(
    "channel_scale", _channel_scale_fwd,
    lambda g, vol, vec, out: (g * vec[:, None, None, None],
                              np.sum(g * vol, axis=(1, 2, 3))))


def channel_scale(vol, vec):
    """Scale each channel of a volume by one entry of a (C,) vector."""
    return apply_prim(_channel_scale, vol, vec)


def _broadcast_mul_fwd(vol, m):
    check_volume(vol)
    if m.shape != (1,) + vol.shape[1:]:
        raise ShapeError(
            f"broadcast_mul: map shape {m.shape} does not broadcast over "
            f"volume {vol.shape}"
        )
    return vol * m


_broadcast_mul = Prim(
    "broadcast_mul", _broadcast_mul_fwd,
    lambda g, vol, m, out: (g * m, np.sum(g * vol, axis=0, keepdims=True)))


def broadcast_mul(vol, m):
    """Multiply a (C, D, H, W) volume by a single-channel (1, D, H, W) map."""
    return apply_prim(_broadcast_mul, vol, m)


def _matvec_fwd(w, z):
    if w.ndim != 2 or z.ndim != 1 or w.shape[1] != z.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} @ {z.shape}")
    return w @ z


_matvec = Prim("matvec", _matvec_fwd,
               lambda g, w, z, out: (np.outer(g, z), w.T @ g))


def matvec(w, z):
    return apply_prim(_matvec, w, z)


# ---------------------------------------------------------------------------
# convolution (shared 2D/3D core)


def _conv_check(x, w, b, stride, rank):
    if x.ndim != rank + 1:
        raise ShapeError(f"conv{rank}d input must be rank {rank + 1}, got {x.shape}")
    if w.ndim != rank + 2:
        raise ShapeError(f"conv{rank}d kernel must be rank {rank + 2}, got {w.shape}")
    k = w.shape[2]
    if any(w.shape[2 + i] != k for i in range(rank)):
        raise ShapeError(f"conv{rank}d kernel must be cubic, got {w.shape[2:]}")
    if k not in (1, 3):
        raise ShapeError(f"unsupported kernel size {k}: only 1 and 3 are supported")
    if stride not in (1, 2):
        raise ShapeError(f"unsupported stride {stride}: only 1 and 2 are supported")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv{rank}d channel mismatch: input has {x.shape[0]}, "
            f"kernel expects {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(
            f"conv{rank}d bias shape {b.shape} does not match {w.shape[0]} "
            f"output channels"
        )
    return k


def _conv_windows(x, k, stride, rank):
    pad = k // 2
    if pad:
        widths = [(0, 0)] + [(pad, pad)] * rank
        xp = np.pad(x, widths)
    else:
        xp = x
    win = sliding_window_view(xp, (k,) * rank, axis=tuple(range(1, rank + 1)))
    if stride > 1:
        sel = (slice(None),) + (slice(None, None, stride),) * rank
        win = win[sel]
    return win


def _conv_fwd(x, w, b, stride, rank):
    _conv_check(x, w, b, stride, rank)
    k = w.shape[2]
    win = _conv_windows(x, k, stride, rank)
    # Contract channel and kernel axes of the windows against the kernel.
    y = np.tensordot(win, w, axes=([0] + list(range(rank + 1, 2 * rank + 1)),
                                   list(range(1, rank + 2))))
    y = np.moveaxis(y, -1, 0)
    return y + b[(slice(None),) + (None,) * rank]


def _conv_vjp(g, x, w, b, out, stride, rank):
    k = w.shape[2]
    pad = k // 2
    win = _conv_windows(x, k, stride, rank)
    spatial = tuple(range(1, rank + 1))
    grad_b = g.sum(axis=spatial)
    grad_w = np.tensordot(g, win, axes=(spatial, spatial))
    out_dims = g.shape[1:]
    padded_shape = (x.shape[0],) + tuple(d + 2 * pad for d in x.shape[1:])
    grad_xp = np.zeros(padded_shape, dtype=np.float64)
    for offset in np.ndindex(*(k,) * rank):
        tap = w[(slice(None), slice(None)) + offset]
        t = np.tensordot(tap, g, axes=(0, 0))
        window = tuple(
            slice(offset[i], offset[i] + stride * (out_dims[i] - 1) + 1, stride)
            for i in range(rank)
        )
        grad_xp[(slice(None),) + window] += t
    if pad:
        core = tuple(slice(pad, pad + d) for d in x.shape[1:])
        grad_x = grad_xp[(slice(None),) + core]
    else:
        grad_x = grad_xp
    return grad_x, grad_w, grad_b


_conv2d = Prim("conv2d",
               lambda x, w, b, stride: _conv_fwd(x, w, b, stride, 2),
               lambda g, x, w, b, out, stride: _conv_vjp(g, x, w, b, out, stride, 2))

_conv3d = Prim("conv3d",
               lambda x, w, b, stride: _conv_fwd(x, w, b, stride, 3),
               lambda g, x, w, b, out, stride: _conv_vjp(g, x, w, b, out, stride, 3))


def conv2d(x, w, b, stride: int = 1):
    """2D convolution, zero same-padding, output dims ceil(dim/stride)."""
    return apply_prim(_conv2d, x, w, b, stride=int(stride))


def conv3d(x, w, b, stride: int = 1):
    """3D convolution, zero same-padding, output dims ceil(dim/stride)."""
    return apply_prim(_conv3d, x, w, b, stride=int(stride))


# ---------------------------------------------------------------------------
# pooling and windowed statistics


def _gap_fwd(x):
    check_volume(x)
    return x.mean(axis=(1, 2, 3))


def _gap_vjp(g, x, out):
    n = x.shape[1] * x.shape[2] * x.shape[3]
    return (np.broadcast_to(g[:, None, None, None] / n, x.shape).copy(),)


_gap3d = Prim("global_avg_pool3d", _gap_fwd, _gap_vjp)


def global_avg_pool3d(x):
    """Mean over all voxels per channel: (C, D, H, W) -> (C,)."""
    return apply_prim(_gap3d, x)


def _box_counts(dims, window):
    r = window // 2
    per_axis = []
    for n in dims:
        idx = np.arange(n)
        per_axis.append(np.minimum(idx + r, n - 1) - np.maximum(idx - r, 0) + 1)
    return per_axis[0][:, None, None] * per_axis[1][None, :, None] * per_axis[2][None, None, :]


def _box_sum(x, window):
    """Sum over the clipped cubic window at every voxel (zeros past the edge)."""
    r = window // 2
    d, h, w = x.shape[1:]
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    acc = np.zeros_like(x)
    for a in range(window):
        for b in range(window):
            for c in range(window):
                acc += xp[:, a:a + d, b:b + h, c:c + w]
    return acc


def _box_mean_fwd(x, window):
    check_volume(x)
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"box window must be odd and positive, got {window}")
    counts = _box_counts(x.shape[1:], window)
    # Summing deviations from a per-channel anchor instead of raw values keeps
    # the mean of a constant channel bit-exact (0/n + c == c), which the
    # consistency loss relies on.  The anchor cancels algebraically, so the
    # derivative (and the vjp below) is unchanged.
    anchor = x[:, :1, :1, :1]
    return anchor + _box_sum(x - anchor, window) / counts


def _box_mean_vjp(g, x, out, window):
    counts = _box_counts(x.shape[1:], window)
    return (_box_sum(g / counts, window),)


_box_mean3d = Prim("box_mean3d", _box_mean_fwd, _box_mean_vjp)


def box_mean3d(x, window: int = 3):
    """Clipped-window neighborhood mean; boundary windows divide by their
    actual size instead of padding with zeros."""
    return apply_prim(_box_mean3d, x, window=int(window))


def neighborhood_stats(x, window: int = 3):
    """Per-voxel (mean, variance) over the clipped cubic window.

    Variance is the population variance (divide by n); tiny negative values
    from floating-point cancellation are clamped to 0.
    """
    m = box_mean3d(x, window)
    ex2 = box_mean3d(square(x), window)
    var = relu(sub(ex2, square(m)))
    return m, var


# ---------------------------------------------------------------------------
# shape plumbing: concat / slice / crop / channel reductions


def _concat_fwd(a, b):
    if a.ndim != b.ndim or a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"concat_channels: trailing dims differ, {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=0)


_concat = Prim("concat_channels", _concat_fwd,
               lambda g, a, b, out: (g[: a.shape[0]], g[a.shape[0]:]))


def concat_channels(a, b):
    return apply_prim(_concat, a, b)


def _slice_channel_fwd(x, c):
    check_volume(x)
    if not 0 <= c < x.shape[0]:
        raise ShapeError(f"channel {c} out of range for {x.shape[0]} channels")
    return x[c]


def _slice_channel_vjp(g, x, out, c):
    gx = np.zeros_like(x)
    gx[c] = g
    return (gx,)


_slice_channel = Prim("slice_channel", _slice_channel_fwd, _slice_channel_vjp)


def slice_channel(x, c: int):
    """Extract channel c of a volume as a (D, H, W) array."""
    return apply_prim(_slice_channel, x, c=int(c))


def _select_channel_fwd(x, labels):
    check_volume(x)
    if labels.shape != x.shape[1:]:
        raise ShapeError(
            f"select_channel: labels shape {labels.shape} != spatial {x.shape[1:]}"
        )
    return np.take_along_axis(x, labels[None], axis=0)[0]


def _select_channel_vjp(g, x, out, labels):
    gx = np.zeros_like(x)
    np.put_along_axis(gx, labels[None], g[None], axis=0)
    return (gx,)


_select_channel = Prim("select_channel", _select_channel_fwd, _select_channel_vjp)


def select_channel(x, labels):
    """Per-voxel gather: out[d,h,w] = x[labels[d,h,w], d, h, w]."""
    lab = np.asarray(labels)
    if not np.issubdtype(lab.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got {lab.dtype}")
    return apply_prim(_select_channel, x, labels=lab)


def _mean_channels_fwd(x):
    check_volume(x)
    return x.mean(axis=0, keepdims=True)


_mean_channels = Prim(
    "mean_channels", _mean_channels_fwd,
    lambda g, x, out: (np.broadcast_to(g / x.shape[0], x.shape).copy(),))


def mean_channels(x):
    """Average over channels: (C, D, H, W) -> (1, D, H, W)."""
    return apply_prim(_mean_channels, x)


def _crop_fwd(x, dims):
    check_volume(x)
    if any(t > s for t, s in zip(dims, x.shape[1:])):
        raise ShapeError(f"crop3d target {dims} exceeds input {x.shape[1:]}")
    d, h, w = dims
    return x[:, :d, :h, :w]


def _crop_vjp(g, x, out, dims):
    gx = np.zeros_like(x)
    d, h, w = dims
    gx[:, :d, :h, :w] = g
    return (gx,)


_crop3d = Prim("crop3d", _crop_fwd, _crop_vjp)


def crop3d(x, dims):
    """Keep the leading dims of each spatial axis (used after upsampling)."""
    return apply_prim(_crop3d, x, dims=tuple(int(d) for d in dims))


def _reshape_fwd(x, shape):
    n = 1
    for d in shape:
        n *= d
    if n != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


_reshape = Prim("reshape", _reshape_fwd,
                lambda g, x, out, shape: (g.reshape(x.shape),))


def reshape(x, shape):
    return apply_prim(_reshape, x, shape=tuple(int(d) for d in shape))


# ---------------------------------------------------------------------------
# upsampling


def _axis_matrix(n: int, mode: str) -> np.ndarray:
    m = np.zeros((2 * n, n), dtype=np.float64)
    if mode == "nearest":
        for o in range(2 * n):
            m[o, o // 2] = 1.0
    else:
        for o in range(2 * n):
            xs = (o + 0.5) / 2.0 - 0.5
            xs = min(max(xs, 0.0), float(n - 1))
            i0 = int(np.floor(xs))
            i1 = min(i0 + 1, n - 1)
            t = xs - i0
            m[o, i0] += 1.0 - t
            m[o, i1] += t
    return m


_AXIS_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _axis_matrix_cached(n, mode):
    key = (n, mode)
    if key not in _AXIS_CACHE:
        _AXIS_CACHE[key] = _axis_matrix(n, mode)
    return _AXIS_CACHE[key]


def _upsample_fwd(x, mode):
    check_volume(x)
    md = _axis_matrix_cached(x.shape[1], mode)
    mh = _axis_matrix_cached(x.shape[2], mode)
    mw = _axis_matrix_cached(x.shape[3], mode)
    return np.einsum("ai,bj,ck,nijk->nabc", md, mh, mw, x, optimize=True)


def _upsample_vjp(g, x, out, mode):
    md = _axis_matrix_cached(x.shape[1], mode)
    mh = _axis_matrix_cached(x.shape[2], mode)
    mw = _axis_matrix_cached(x.shape[3], mode)
    return (np.einsum("ai,bj,ck,nabc->nijk", md, mh, mw, g, optimize=True),)


_upsample3d = Prim("upsample3d", _upsample_fwd, _upsample_vjp)


def upsample3d(x, mode: str = "trilinear"):
    """Double every spatial dim. Modes: "nearest" or "trilinear"."""
    if mode not in ("nearest", "trilinear"):
        raise ShapeError(f"unknown upsample mode {mode!r}")
    return apply_prim(_upsample3d, x, mode=mode)


# ---------------------------------------------------------------------------
# softmax over channels


def _softmax_fwd(x):
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _softmax_vjp(g, x, out):
    inner = np.sum(g * out, axis=0, keepdims=True)
    return (out * (g - inner),)


_softmax = Prim("softmax_channels", _softmax_fwd, _softmax_vjp)


def softmax_channels(x):
    """Softmax over axis 0 (the channel axis), numerically stabilized."""
    return apply_prim(_softmax, x)
