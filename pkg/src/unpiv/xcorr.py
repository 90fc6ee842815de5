"""Window cross-correlation flow estimation (multipass, with deformation).

Displacements are found per interrogation window by direct spatial-domain
zero-normalized cross correlation over a bounded integer search, refined to
sub-pixel precision by a three-point Gaussian fit. Later passes backwarp the
second image by the interpolated field and correlate residuals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.signal import correlate2d

from . import kvconfig
from .errors import DimensionMismatchError, EstimationFailedError, InvalidInputError
from .fields import FlowField, GrayImage
from .warp import backwarp

_MIN_PEAK = 0.3
_VAR_TINY = 1e-12

STATUS_OK = "ok"
STATUS_OUT_OF_BOUNDS = "out_of_bounds"
STATUS_UNDEFINED = "undefined"


@dataclass(frozen=True)
class XcorrConfig:
    """Window matching parameters.

    window_size : odd interrogation window edge, >= 5
    search_radius : max integer displacement searched per pass
    passes : correlation passes; passes > 1 add predictor-based deformation
    subpixel : "gaussian3" or "none"
    grid_step : spacing of window centers in pixels
    """

    window_size: int = 29
    search_radius: int = 8
    passes: int = 3
    subpixel: str = "gaussian3"
    grid_step: int = 8

    def __post_init__(self):
        if self.window_size < 5 or self.window_size % 2 == 0:
            raise InvalidInputError(
                f"window_size must be odd and >= 5, got {self.window_size}"
            )
        if self.search_radius < 1:
            raise InvalidInputError("search_radius must be >= 1")
        if self.passes < 1:
            raise InvalidInputError("passes must be >= 1")
        if self.subpixel not in ("gaussian3", "none"):
            raise InvalidInputError(
                f"subpixel must be 'gaussian3' or 'none', got {self.subpixel!r}"
            )
        if self.grid_step < 1:
            raise InvalidInputError("grid_step must be >= 1")

    @classmethod
    def config_keys(cls) -> frozenset:
        return frozenset(
            ("window_size", "search_radius", "passes", "subpixel", "grid_step")
        )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "XcorrConfig":
        base = cls()
        subpixel = mapping.get("subpixel", base.subpixel)
        return cls(
            window_size=kvconfig.parse_int(mapping, "window_size", base.window_size),
            search_radius=kvconfig.parse_int(mapping, "search_radius", base.search_radius),
            passes=kvconfig.parse_int(mapping, "passes", base.passes),
            subpixel=str(subpixel),
            grid_step=kvconfig.parse_int(mapping, "grid_step", base.grid_step),
        )


@dataclass(frozen=True)
class WindowMatch:
    """Result of one window correlation; du/dv/peak are meaningful only when
    status == "ok"."""

    du: float
    dv: float
    peak: float
    status: str


def _gaussian3(c_minus: float, c_zero: float, c_plus: float) -> float:
    # Three-point Gaussian peak fit; valid only for three positive samples.
    if min(c_minus, c_zero, c_plus) <= 0.0:
        return 0.0
    lm = math.log(c_minus)
    lz = math.log(c_zero)
    lp = math.log(c_plus)
    denom = 2.0 * lm - 4.0 * lz + 2.0 * lp
    if denom == 0.0:
        return 0.0
    delta = (lm - lp) / denom
    if not math.isfinite(delta) or abs(delta) >= 1.0:
        return 0.0
    return delta


def _window_sums(area: np.ndarray, k: int):
    """Sliding k x k window sums of `area` and `area**2` (integral images)."""
    ps = np.zeros((area.shape[0] + 1, area.shape[1] + 1))
    ps2 = np.zeros_like(ps)
    np.cumsum(np.cumsum(area, axis=0), axis=1, out=ps[1:, 1:])
    np.cumsum(np.cumsum(np.square(area), axis=0), axis=1, out=ps2[1:, 1:])
    s = ps[k:, k:] - ps[:-k, k:] - ps[k:, :-k] + ps[:-k, :-k]
    s2 = ps2[k:, k:] - ps2[:-k, k:] - ps2[k:, :-k] + ps2[:-k, :-k]
    return s, s2


def correlate_window(i1: GrayImage, i2: GrayImage, center, config: XcorrConfig) -> WindowMatch:
    """ZNCC search of the i1 window around `center` against i2.

    Returns the best integer offset (plus sub-pixel refinement) as the
    displacement of the window content from i1 to i2. Out-of-bounds geometry
    and zero-variance content are reported through `status`, not exceptions.
    """
    cx, cy = int(center[0]), int(center[1])
    half = config.window_size // 2
    r = config.search_radius
    h, w = i1.shape
    if (
        cx - half < 0
        or cy - half < 0
        or cx + half >= w
        or cy + half >= h
        or cx - half - r < 0
        or cy - half - r < 0
        or cx + half + r >= i2.width
        or cy + half + r >= i2.height
    ):
        return WindowMatch(0.0, 0.0, 0.0, STATUS_OUT_OF_BOUNDS)

    window = i1.data[cy - half : cy + half + 1, cx - half : cx + half + 1]
    n = window.size
    a = window - window.mean()
    var_a = float(np.sum(a * a))
    if var_a <= _VAR_TINY:
        return WindowMatch(0.0, 0.0, 0.0, STATUS_UNDEFINED)

    area = i2.data[cy - half - r : cy + half + r + 1, cx - half - r : cx + half + r + 1]
    # sum(a_c * b) over each candidate window; the b mean drops out since
    # a_c sums to zero.
    num = correlate2d(area, a, mode="valid")
    s, s2 = _window_sums(area, config.window_size)
    var_b = s2 - (s * s) / n
    np.maximum(var_b, 0.0, out=var_b)

    defined = var_b > _VAR_TINY
    if not defined.any():
        return WindowMatch(0.0, 0.0, 0.0, STATUS_UNDEFINED)
    with np.errstate(invalid="ignore", divide="ignore"):
        zncc = num / np.sqrt(var_a * var_b)
    zncc[~defined] = -np.inf

    flat = int(np.argmax(zncc))
    py, px = divmod(flat, zncc.shape[1])
    peak = float(np.clip(zncc[py, px], -1.0, 1.0))

    dx = float(px - r)
    dy = float(py - r)
    if config.subpixel == "gaussian3":
        if 0 < px < zncc.shape[1] - 1 and np.isfinite(zncc[py, px - 1]) and np.isfinite(zncc[py, px + 1]):
            dx += _gaussian3(zncc[py, px - 1], zncc[py, px], zncc[py, px + 1])
        if 0 < py < zncc.shape[0] - 1 and np.isfinite(zncc[py - 1, px]) and np.isfinite(zncc[py + 1, px]):
            dy += _gaussian3(zncc[py - 1, px], zncc[py, px], zncc[py + 1, px])
    return WindowMatch(dx, dy, peak, STATUS_OK)


@dataclass(frozen=True, eq=False)
class SparseFlow:
    """Per-window displacements on a regular lattice of window centers.

    grid_x/grid_y are the center coordinates (1-D); u, v, peak, valid are
    (len(grid_y), len(grid_x)) arrays in the same order.
    """

    grid_x: np.ndarray
    grid_y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    peak: np.ndarray
    valid: np.ndarray

    def to_csv_text(self) -> str:
        lines = ["x,y,u,v,peak,valid"]
        for iy, y in enumerate(self.grid_y):
            for ix, x in enumerate(self.grid_x):
                lines.append(
                    f"{int(x)},{int(y)},{self.u[iy, ix]!r},{self.v[iy, ix]!r},"
                    f"{self.peak[iy, ix]!r},{int(self.valid[iy, ix])}"
                )
        return "\n".join(lines) + "\n"


def _median_validate(u, v, peak, residual_bound, ok_mask):
    """Replace low-peak or runaway vectors by the median of their 8 lattice
    neighbors (valid ones only); undefined samples get the nearest valid value."""
    ny, nx = u.shape
    questionable = ok_mask & (
        (peak < _MIN_PEAK) | (np.abs(u) > residual_bound) | (np.abs(v) > residual_bound)
    )
    trusted = ok_mask & ~questionable
    u_new = u.copy()
    v_new = v.copy()
    for iy, ix in zip(*np.nonzero(questionable)):
        y0, y1 = max(iy - 1, 0), min(iy + 2, ny)
        x0, x1 = max(ix - 1, 0), min(ix + 2, nx)
        mask = trusted[y0:y1, x0:x1].copy()
        mask[iy - y0, ix - x0] = False
        if mask.any():
            u_new[iy, ix] = np.median(u[y0:y1, x0:x1][mask])
            v_new[iy, ix] = np.median(v[y0:y1, x0:x1][mask])
    filled = trusted | questionable
    if (~filled).any() and trusted.any():
        ty, tx = np.nonzero(trusted)
        for iy, ix in zip(*np.nonzero(~filled)):
            d2 = (ty - iy) ** 2 + (tx - ix) ** 2
            k = int(np.argmin(d2))
            u_new[iy, ix] = u[ty[k], tx[k]]
            v_new[iy, ix] = v[ty[k], tx[k]]
    return u_new, v_new


def _interpolate_dense(grid_x, grid_y, u, v, width, height):
    """Bilinear interpolation of lattice samples to every pixel, with linear
    extrapolation outside the sampled rectangle."""
    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    if len(grid_x) < 2 or len(grid_y) < 2:
        du = float(np.mean(u))
        dv = float(np.mean(v))
        return np.full((height, width), du), np.full((height, width), dv)
    pts = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    dense = []
    for comp in (u, v):
        interp = RegularGridInterpolator(
            (grid_y.astype(np.float64), grid_x.astype(np.float64)),
            comp,
            method="linear",
            bounds_error=False,
            fill_value=None,
        )
        dense.append(interp(pts).reshape(height, width))
    return dense[0], dense[1]


def estimate_multipass(i1: GrayImage, i2: GrayImage, config: XcorrConfig | None = None):
    """Multipass window correlation; returns (SparseFlow, dense FlowField).

    Pass 1 correlates the raw pair. Later passes interpolate the current
    sparse field to a dense predictor, backwarp i2 by it, and correlate the
    residual displacements on top.
    """
    config = config if config is not None else XcorrConfig()
    if i1.shape != i2.shape:
        raise DimensionMismatchError(f"i1 {i1.shape} vs i2 {i2.shape}")
    h, w = i1.shape
    half = config.window_size // 2
    margin = half + config.search_radius
    grid_x = np.arange(margin, w - margin, config.grid_step)
    grid_y = np.arange(margin, h - margin, config.grid_step)
    if len(grid_x) == 0 or len(grid_y) == 0:
        raise EstimationFailedError(
            f"no {config.window_size}px window with search radius "
            f"{config.search_radius} fits a {h}x{w} image"
        )
    ny, nx = len(grid_y), len(grid_x)

    u = np.zeros((ny, nx))
    v = np.zeros((ny, nx))
    peak = np.zeros((ny, nx))
    ok = np.zeros((ny, nx), dtype=bool)
    residual_bound = config.search_radius + 1.0

    for pass_idx in range(config.passes):
        if pass_idx == 0:
            pred_u = np.zeros((h, w))
            pred_v = np.zeros((h, w))
            i2_cur = i2
        else:
            pred_u, pred_v = _interpolate_dense(grid_x, grid_y, u, v, w, h)
            i2_cur = backwarp(i2, FlowField(pred_u, pred_v)).warped

        res_u = np.zeros((ny, nx))
        res_v = np.zeros((ny, nx))
        for iy, cy in enumerate(grid_y):
            for ix, cx in enumerate(grid_x):
                m = correlate_window(i1, i2_cur, (cx, cy), config)
                if m.status == STATUS_OK:
                    res_u[iy, ix] = m.du
                    res_v[iy, ix] = m.dv
                    peak[iy, ix] = m.peak
                    ok[iy, ix] = True
                else:
                    peak[iy, ix] = 0.0
                    ok[iy, ix] = False
        res_u, res_v = _median_validate(res_u, res_v, peak, residual_bound, ok)
        u = pred_u[grid_y[:, None], grid_x[None, :]] + res_u
        v = pred_v[grid_y[:, None], grid_x[None, :]] + res_v

    valid = ok & (peak >= _MIN_PEAK)
    sparse = SparseFlow(grid_x, grid_y, u, v, peak, valid)
    dense_u, dense_v = _interpolate_dense(grid_x, grid_y, u, v, w, h)
    return sparse, FlowField(dense_u, dense_v)
