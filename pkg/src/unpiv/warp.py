"""Bilinear backward warping with analytic derivatives w.r.t. the flow.

Sampling convention: a sample at continuous position (x, y) is valid when
0 <= x <= width-1 and 0 <= y <= height-1. The interpolation cell is
floor-anchored (right-limit derivatives at integer positions), except on the
far right/bottom edge where the last interior cell is reused with weight 1 so
that zero flow is an exact identity with a fully true valid mask. Invalid
samples yield value 0 with zero derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, GridTooSmallError
from .fields import FlowField, GrayImage


@dataclass(frozen=True, eq=False)
class BilinearSample:
    """Values and partials of a bilinear sample, plus the cell geometry.

    iy0/ix0 index the top-left corner of the cell actually used; w00..w11 are
    the corner weights (zeroed where invalid), laid out as w<dx><dy> with dx
    advancing along x and dy along y.
    """

    value: np.ndarray
    d_dx: np.ndarray
    d_dy: np.ndarray
    valid: np.ndarray
    iy0: np.ndarray
    ix0: np.ndarray
    w00: np.ndarray
    w10: np.ndarray
    w01: np.ndarray
    w11: np.ndarray


def sample_bilinear(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> BilinearSample:
    h, w = values.shape
    if h < 2 or w < 2:
        raise GridTooSmallError(f"bilinear sampling needs a 2x2 grid, got {h}x{w}")
    valid = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)

    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    ix0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    iy0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - ix0
    fy = yc - iy0

    v00 = values[iy0, ix0]
    v10 = values[iy0, ix0 + 1]
    v01 = values[iy0 + 1, ix0]
    v11 = values[iy0 + 1, ix0 + 1]

    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy

    # Weighted-sum form: exact gather when weights are exactly {0, 1}.
    value = w00 * v00 + w10 * v10 + w01 * v01 + w11 * v11
    d_dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    d_dy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)

    invalid = ~valid
    if invalid.any():
        value = np.where(valid, value, 0.0)
        d_dx = np.where(valid, d_dx, 0.0)
        d_dy = np.where(valid, d_dy, 0.0)
        w00 = np.where(valid, w00, 0.0)
        w10 = np.where(valid, w10, 0.0)
        w01 = np.where(valid, w01, 0.0)
        w11 = np.where(valid, w11, 0.0)
    return BilinearSample(value, d_dx, d_dy, valid, iy0, ix0, w00, w10, w01, w11)


def pixel_grid(width: int, height: int):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


@dataclass(frozen=True, eq=False)
class WarpResult:
    """Backwarped image with partials of each warped value w.r.t. (u, v)."""

    warped: GrayImage
    d_warp_du: np.ndarray
    d_warp_dv: np.ndarray
    valid_mask: np.ndarray


def backwarp(target: GrayImage, flow: FlowField) -> WarpResult:
    """Sample `target` at x + flow(x) for every pixel x of the flow grid."""
    if target.shape != flow.shape:
        raise DimensionMismatchError(
            f"target {target.shape} vs flow {flow.shape}"
        )
    xs, ys = pixel_grid(flow.width, flow.height)
    s = sample_bilinear(target.data, xs + flow.u, ys + flow.v)
    return WarpResult(GrayImage(s.value), s.d_dx, s.d_dy, s.valid)


@dataclass(frozen=True, eq=False)
class ResidualResult:
    """Photometric residual i1 - warp(i2) with partials w.r.t. the flow."""

    residual: np.ndarray
    d_du: np.ndarray
    d_dv: np.ndarray
    valid_mask: np.ndarray


def photometric_residual(i1: GrayImage, i2: GrayImage, flow: FlowField) -> ResidualResult:
    """Residual between i1 and i2 backwarped by `flow`.

    Out-of-bounds samples contribute residual i1(x) - 0 with zero derivatives,
    so they stay in the objective but never drive the flow.
    """
    if i1.shape != i2.shape:
        raise DimensionMismatchError(f"i1 {i1.shape} vs i2 {i2.shape}")
    wr = backwarp(i2, flow)
    residual = i1.data - wr.warped.data
    return ResidualResult(residual, -wr.d_warp_du, -wr.d_warp_dv, wr.valid_mask)
