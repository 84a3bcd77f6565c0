"""Dense feature maps, dilated convolution, RoI Align, and the conv/FC bridge.

A feature map is a float64 array of shape ``(channels, height, width)``.
Cell ``(r, c)`` has its center at ``(c + 0.5, r + 0.5)`` in feature-cell
coordinates. All arithmetic is 64-bit.

The load-bearing property of this module: for an anchor placed on the grid
with kernel ``(m, n)`` and dilation ``d``, extracting an ``m x n`` RoI-Align
patch over the anchor (one bilinear sample per bin, at the bin center) reads
exactly the same input values as the taps of an ``m x n`` dilated convolution
at that cell, including zeros past the borders. This makes a convolutional
sweep and a per-anchor fully-connected map over RoI patches interchangeable
when they share weights; :func:`fc_from_conv` fixes the flatten order that
ties the two together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, as_box_array


@dataclass
class ConvWeights:
    """Convolution weights ``(out_channels, in_channels, m, n)`` plus bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match out_channels {self.weight.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("conv weights must be finite")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return (self.weight.shape[2], self.weight.shape[3])

    def copy(self) -> "ConvWeights":
        return ConvWeights(self.weight.copy(), self.bias.copy())


@dataclass
class FeaturePyramid:
    """Ordered per-level feature maps with strictly increasing strides."""

    levels: tuple[np.ndarray, ...]
    strides: tuple[int, ...]
    image_width: int
    image_height: int

    def __post_init__(self) -> None:
        self.levels = tuple(np.asarray(f, dtype=np.float64) for f in self.levels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.levels) != len(self.strides):
            raise ValueError("levels and strides must have equal length")
        if any(s2 <= s1 for s1, s2 in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        for fmap, stride in zip(self.levels, self.strides):
            if fmap.ndim != 3:
                raise ValueError("each level must be a (C, H, W) array")
            want_h = -(-self.image_height // stride)
            want_w = -(-self.image_width // stride)
            if fmap.shape[1:] != (want_h, want_w):
                raise ValueError(
                    f"level at stride {stride} has dims {fmap.shape[1:]}, "
                    f"expected {(want_h, want_w)} for a "
                    f"{self.image_width}x{self.image_height} image"
                )

    def __len__(self) -> int:
        return len(self.levels)


def conv2d_dilated(inputs: np.ndarray, weights: ConvWeights, dilation: int) -> np.ndarray:
    """Dilated 2-D convolution with SAME zero padding.

    ``out[o, r, c] = bias[o] + sum_{i, ki, kj} weight[o, i, ki, kj] *
    in[i, r + d*(ki - (m-1)/2), c + d*(kj - (n-1)/2)]`` with out-of-bounds
    taps contributing zero. Output has the same spatial dims as the input.

    Even kernel dims are rejected (center alignment is undefined for them).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"input must be (C, H, W), got shape {x.shape}")
    m, n = weights.kernel
    if m % 2 == 0 or n % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {m}x{n}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if x.shape[0] != weights.in_channels:
        raise ValueError(
            f"input has {x.shape[0]} channels, weights expect {weights.in_channels}"
        )
    c_in, h, w = x.shape
    pad_h = dilation * (m - 1) // 2
    pad_w = dilation * (n - 1) // 2
    padded = np.zeros((c_in, h + 2 * pad_h, w + 2 * pad_w), dtype=np.float64)
    padded[:, pad_h : pad_h + h, pad_w : pad_w + w] = x
    out = np.empty((weights.out_channels, h, w), dtype=np.float64)
    out[:] = weights.bias[:, None, None]
    # Fixed tap order keeps the summation deterministic.
    for ki in range(m):
        for kj in range(n):
            window = padded[:, ki * dilation : ki * dilation + h, kj * dilation : kj * dilation + w]
            out += np.tensordot(weights.weight[:, :, ki, kj], window, axes=1)
    return out


def bilinear_sample_points(fmap: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at many points; returns (C, K).

    The interpolation grid is the lattice of cell-center values; samples past
    the outermost centers blend against implicit zeros, matching the zero
    padding of :func:`conv2d_dilated`.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    _, h, w = fmap.shape
    u = xs - 0.5
    v = ys - 0.5
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    fu = u - c0
    fv = v - r0

    def gather(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        vals = fmap[:, np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)]
        return np.where(valid[None, :], vals, 0.0)

    top = (1.0 - fu) * gather(r0, c0) + fu * gather(r0, c0 + 1)
    bottom = (1.0 - fu) * gather(r0 + 1, c0) + fu * gather(r0 + 1, c0 + 1)
    return (1.0 - fv) * top + fv * bottom


def bilinear_sample(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Per-channel bilinear interpolation at one point; returns (C,)."""
    return bilinear_sample_points(fmap, np.array([x]), np.array([y]))[:, 0]


def roi_align_many(fmap: np.ndarray, rois: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """RoI Align with one center sample per bin, for B RoIs; returns (B, C, out_h, out_w).

    RoIs are given in feature-cell coordinates. Bin (bi, bj) of an RoI is
    sampled at ``(x1 + (bj + 0.5) * w / out_w, y1 + (bi + 0.5) * h / out_h)``.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    rois = as_box_array(rois)
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    widths = rois[:, 2] - rois[:, 0]
    heights = rois[:, 3] - rois[:, 1]
    if np.any(widths <= 0.0) or np.any(heights <= 0.0):
        raise ValueError("roi_align requires RoIs with positive width and height")
    b = rois.shape[0]
    bj = (np.arange(out_w, dtype=np.float64) + 0.5) / out_w
    bi = (np.arange(out_h, dtype=np.float64) + 0.5) / out_h
    xs = rois[:, 0, None, None] + bj[None, None, :] * widths[:, None, None]
    ys = rois[:, 1, None, None] + bi[None, :, None] * heights[:, None, None]
    xs = np.broadcast_to(xs, (b, out_h, out_w))
    ys = np.broadcast_to(ys, (b, out_h, out_w))
    sampled = bilinear_sample_points(fmap, xs.reshape(-1), ys.reshape(-1))
    c = fmap.shape[0]
    return sampled.reshape(c, b, out_h, out_w).transpose(1, 0, 2, 3)


def roi_align(fmap: np.ndarray, roi, out_h: int, out_w: int) -> np.ndarray:
    """RoI Align for a single RoI; returns a (C, out_h, out_w) patch."""
    if isinstance(roi, Box):
        roi = roi.to_array()
    return roi_align_many(fmap, np.asarray(roi).reshape(1, 4), out_h, out_w)[0]


def fc_from_conv(weights: ConvWeights) -> tuple[np.ndarray, np.ndarray]:
    """View conv weights as a fully-connected map over flattened patches.

    The FC input ordering is channel-major, then row, then column of the
    ``m x n`` patch, i.e. column index ``ch * m * n + ki * n + kj``. Returns
    ``(matrix of shape (out_channels, in_channels * m * n), bias)``.
    """
    c_out = weights.out_channels
    return weights.weight.reshape(c_out, -1).copy(), weights.bias.copy()


def conv_from_fc(
    matrix: np.ndarray, bias: np.ndarray, in_channels: int, m: int, n: int
) -> ConvWeights:
    """Inverse of :func:`fc_from_conv`."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != in_channels * m * n:
        raise ValueError(
            f"matrix shape {matrix.shape} does not match {in_channels}x{m}x{n} patches"
        )
    return ConvWeights(matrix.reshape(matrix.shape[0], in_channels, m, n).copy(), bias)


def fc_apply(patch: np.ndarray, matrix: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``matrix @ flatten(patch) + bias``.

    ``patch`` may be a ``(C, m, n)`` array or already flat; the flatten order
    is the one fixed by :func:`fc_from_conv`.
    """
    flat = np.asarray(patch, dtype=np.float64).reshape(-1)
    matrix = np.asarray(matrix, dtype=np.float64)
    if flat.shape[0] != matrix.shape[1]:
        raise ValueError(
            f"patch has {flat.shape[0]} values, FC weights expect {matrix.shape[1]}"
        )
    return matrix @ flat + np.asarray(bias, dtype=np.float64)
