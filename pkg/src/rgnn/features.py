"""Toy convolutional backbone, bilinear upsampling and region pooling.

All resampling shares one coordinate convention: an output bin of extent
``n`` over a source span samples at centers ``(i + 0.5) * span / n - 0.5``
in pixel-center coordinates, clamped to the source (edge replication).
Upsampling by a factor f is the special case span = in, n = in * f.  The
convention is part of the on-disk contract: pooled features written by two
runs must agree bit-for-bit at fp64.

Each sampling pattern is differentiable because it is a fixed sparse linear
map of the source pixels: gathers of the four corner pixels weighted by
constant bilinear coefficients.  Plans (index and weight arrays) are
precomputed per geometry and cached.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .regions import Region
from .tensor import Tensor


# ---------------------------------------------------------------------------
# sampling plans
# ---------------------------------------------------------------------------

def bin_centers(start: float, span: float, bins: int) -> np.ndarray:
    """Sample positions for `bins` bins over [start, start+span), center coords."""
    return start + (np.arange(bins) + 0.5) * (span / bins) - 0.5


class BilinearPlan:
    """Corner gather indices and weights for a fixed set of sample points."""

    def __init__(self, py: np.ndarray, px: np.ndarray, in_h: int, in_w: int,
                 channels: int, batch: int):
        py = np.clip(py, 0.0, in_h - 1.0)
        px = np.clip(px, 0.0, in_w - 1.0)
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        y1 = np.minimum(y0 + 1, in_h - 1)
        x1 = np.minimum(x0 + 1, in_w - 1)
        ty = py - y0
        tx = px - x0

        corners = [(y0, x0, (1 - ty) * (1 - tx)), (y0, x1, (1 - ty) * tx),
                   (y1, x0, ty * (1 - tx)), (y1, x1, ty * tx)]
        n_samples = py.size
        cext = np.arange(channels, dtype=np.int64)
        next_ = np.arange(batch, dtype=np.int64) * (in_h * in_w)
        self.out_rows = batch * n_samples
        self.channels = channels
        self.idx = []
        self.weights = []
        for cy, cx, w in corners:
            base = cy * in_w + cx  # (n_samples,)
            full = ((next_[:, None] + base[None, :])[:, :, None] * channels
                    + cext[None, None, :])
            self.idx.append(full.ravel())
            w_sc = np.repeat(w, channels).reshape(n_samples, channels)
            self.weights.append(T.constant(np.tile(w_sc, (batch, 1))))

    def gather(self, source: Tensor) -> Tensor:
        """Weighted 4-corner gather: (batch*samples, channels) tensor."""
        parts = []
        for idx, w in zip(self.idx, self.weights):
            parts.append(T.mul(T.take_flat(source, idx, (self.out_rows, self.channels)), w))
        return T.add(T.add(parts[0], parts[1]), T.add(parts[2], parts[3]))


class ConvPlan:
    """im2col indices for 3x3 same-padding convolution plus 2x2 max pooling."""

    def __init__(self, batch: int, height: int, width: int, c_in: int):
        if height % 2 or width % 2:
            raise ValueError(f"conv block needs even spatial size, got {height}x{width}")
        self.batch, self.height, self.width, self.c_in = batch, height, width, c_in
        hp, wp = height + 2, width + 2
        n_i = np.arange(batch, dtype=np.int64)
        y_i = np.arange(height, dtype=np.int64)
        x_i = np.arange(width, dtype=np.int64)
        ky, kx = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        ky = ky.ravel()[None, None, None, :]
        kx = kx.ravel()[None, None, None, :]
        yy = y_i[None, :, None, None] + ky  # padded coords, offset already +1-1
        xx = x_i[None, None, :, None] + kx
        base = (n_i[:, None, None, None] * hp + yy) * wp + xx  # (N,H,W,9)
        self.im2col = (base[..., None] * c_in
                       + np.arange(c_in, dtype=np.int64)).reshape(
                           batch * height * width, 9 * c_in)

    def pool_indices(self, c_out: int) -> np.ndarray:
        n, h, w = self.batch, self.height, self.width
        h2, w2 = h // 2, w // 2
        n_i = np.arange(n, dtype=np.int64)[:, None, None, None]
        y2 = np.arange(h2, dtype=np.int64)[None, :, None, None]
        x2 = np.arange(w2, dtype=np.int64)[None, None, :, None]
        dy = np.array([0, 0, 1, 1], dtype=np.int64)[None, None, None, :]
        dx = np.array([0, 1, 0, 1], dtype=np.int64)[None, None, None, :]
        base = (n_i * h + 2 * y2 + dy) * w + (2 * x2 + dx)
        return (base[..., None] * c_out
                + np.arange(c_out, dtype=np.int64)).reshape(n * h2 * w2, 4, c_out)


_conv_plans: dict = {}
_pool_plans: dict = {}
_bilinear_plans: dict = {}


def _conv_plan(batch, h, w, c_in) -> ConvPlan:
    key = (batch, h, w, c_in)
    if key not in _conv_plans:
        _conv_plans[key] = ConvPlan(*key)
    return _conv_plans[key]


def _pool_plan(batch, h, w, c_in, c_out) -> np.ndarray:
    key = (batch, h, w, c_in, c_out)
    if key not in _pool_plans:
        _pool_plans[key] = _conv_plan(batch, h, w, c_in).pool_indices(c_out)
    return _pool_plans[key]


def upsample_plan(batch, in_h, in_w, channels, factor) -> BilinearPlan:
    key = ("up", batch, in_h, in_w, channels, factor)
    if key not in _bilinear_plans:
        py = bin_centers(0.0, in_h, in_h * factor)
        px = bin_centers(0.0, in_w, in_w * factor)
        gy, gx = np.meshgrid(py, px, indexing="ij")
        _bilinear_plans[key] = BilinearPlan(
            gy.ravel(), gx.ravel(), in_h, in_w, channels, batch)
    return _bilinear_plans[key]


def region_pool_plan(batch, map_size, channels, regions, out_w, out_h) -> BilinearPlan:
    key = ("roi", batch, map_size, channels,
           tuple((r.x0, r.y0, r.x1, r.y1) for r in regions), out_w, out_h)
    if key not in _bilinear_plans:
        ys, xs = [], []
        for r in regions:
            py = bin_centers(r.y0, r.height, out_h)
            px = bin_centers(r.x0, r.width, out_w)
            gy, gx = np.meshgrid(py, px, indexing="ij")
            ys.append(gy.ravel())
            xs.append(gx.ravel())
        _bilinear_plans[key] = BilinearPlan(
            np.concatenate(ys), np.concatenate(xs),
            map_size, map_size, channels, batch)
    return _bilinear_plans[key]


# ---------------------------------------------------------------------------
# differentiable pipeline stages
# ---------------------------------------------------------------------------

def conv_block(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 conv (zero pad, stride 1) + ReLU + 2x2 stride-2 max pool.

    x: (N, H, W, C_in); weight: (9*C_in, C_out); bias: (C_out,).
    Returns (N, H/2, W/2, C_out).
    """
    n, h, w, c_in = x.shape
    c_out = weight.shape[1]
    plan = _conv_plan(n, h, w, c_in)
    padded = T.pad_zero(x, [(0, 0), (1, 1), (1, 1), (0, 0)])
    cols = T.take_flat(padded, plan.im2col, (n * h * w, 9 * c_in))
    act = T.relu(T.add_bias(T.matmul(cols, weight), bias))
    act = T.reshape(act, (n, h, w, c_out))
    windows = T.take_flat(act, _pool_plan(n, h, w, c_in, c_out),
                          (n * (h // 2) * (w // 2), 4, c_out))
    return T.reshape(T.reduce_max(windows, axes=(1,)), (n, h // 2, w // 2, c_out))


def toy_backbone_forward(images: Tensor, blocks) -> Tensor:
    """Stack of conv blocks; (N, S, S, ch) -> (N, S/2^B, S/2^B, widths[-1]).

    blocks: sequence of (weight Tensor, bias Tensor) pairs.
    """
    s = images.shape[1]
    if s % (2 ** len(blocks)) != 0:
        raise ValueError(
            f"image size {s} not divisible by 2^{len(blocks)} conv blocks")
    x = images
    for weight, bias in blocks:
        x = conv_block(x, weight, bias)
    return x


def bilinear_upsample(feature_map: Tensor, factor: int) -> Tensor:
    """Bilinear upsample by an integer factor; accepts (H,W,C) or (N,H,W,C)."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    squeeze = feature_map.data.ndim == 3
    x = T.reshape(feature_map, (1,) + feature_map.shape) if squeeze else feature_map
    n, h, w, c = x.shape
    if factor == 1:
        return feature_map
    plan = upsample_plan(n, h, w, c, factor)
    out = T.reshape(plan.gather(x), (n, h * factor, w * factor, c))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def pool_regions(feature_map: Tensor, regions, out_w: int, out_h: int) -> Tensor:
    """Pool every region from a batch of maps: (N,U,U,C) -> (N, R, out_h*out_w, C)."""
    n, u, u2, c = feature_map.shape
    if u != u2:
        raise ValueError("region pooling expects square maps")
    for r in regions:
        if not (0 <= r.x0 < r.x1 <= u and 0 <= r.y0 < r.y1 <= u):
            raise ValueError(f"region {r.id} outside map of size {u}")
    plan = region_pool_plan(n, u, c, regions, out_w, out_h)
    return T.reshape(plan.gather(feature_map), (n, len(regions), out_h * out_w, c))


def roi_bilinear_pool(feature_map: Tensor, region: Region,
                      out_w: int, out_h: int) -> Tensor:
    """Pool one region from one (U,U,C) map into (out_h, out_w, C)."""
    x = T.reshape(feature_map, (1,) + feature_map.shape)
    out = pool_regions(x, [region], out_w, out_h)
    c = feature_map.shape[2]
    return T.reshape(out, (out_h, out_w, c))


# ---------------------------------------------------------------------------
# data augmentation (numpy only; runs before the tape)
# ---------------------------------------------------------------------------

def augment(image: np.ndarray, rng, out_size: int,
            rot_degrees: float = 15.0, scale_jitter: float = 0.15) -> np.ndarray:
    """Random rotation, then scaling, then random crop to out_size.

    Bilinear resampling with zero fill outside the source.  Draw order is
    fixed (angle, scale, crop y, crop x) so streams replay identically.
    """
    s_raw = image.shape[0]
    theta = np.deg2rad(rng.uniform(-rot_degrees, rot_degrees))
    zoom = rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter)
    margin = s_raw - out_size
    if margin < 0:
        raise ValueError(f"cannot crop {out_size} from {s_raw}")
    oy = rng.randint(margin + 1) if margin else 0
    ox = rng.randint(margin + 1) if margin else 0
    return resample(image, theta, zoom, oy, ox, out_size)


def resample(image: np.ndarray, theta: float, zoom: float,
             oy: int, ox: int, out_size: int) -> np.ndarray:
    """Deterministic core of augment: inverse-map rotation/scale then crop."""
    s_raw = image.shape[0]
    center = (s_raw - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(out_size, dtype=np.float64),
                         np.arange(out_size, dtype=np.float64), indexing="ij")
    gy = yy + oy - center
    gx = xx + ox - center
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    sy = (cos_t * gy - sin_t * gx) / zoom + center
    sx = (sin_t * gy + cos_t * gx) / zoom + center

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    ty = sy - y0
    tx = sx - x0
    flat = image.ndim == 2
    src = image[..., None] if flat else image
    out = np.zeros((out_size, out_size, src.shape[2]), dtype=np.float64)
    for dy, dx, w in ((0, 0, (1 - ty) * (1 - tx)), (0, 1, (1 - ty) * tx),
                      (1, 0, ty * (1 - tx)), (1, 1, ty * tx)):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < s_raw) & (xi >= 0) & (xi < s_raw)
        yc = np.clip(yi, 0, s_raw - 1)
        xc = np.clip(xi, 0, s_raw - 1)
        out += src[yc, xc] * (w * valid)[..., None]
    return out[..., 0] if flat else out


def center_crop(image: np.ndarray, out_size: int) -> np.ndarray:
    """Deterministic evaluation-time crop."""
    s_raw = image.shape[0]
    off = (s_raw - out_size) // 2
    return image[off : off + out_size, off : off + out_size]
