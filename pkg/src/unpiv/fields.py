"""Core grid types (grayscale images, dense flow fields) and pyramid operations.

All grids wrap float64 numpy arrays in row-major (height, width) layout and are
frozen after construction; every operation returns a new object. Flow vectors
are stored as separate u (horizontal, +x right) and v (vertical, +y down)
component grids, in pixels of their own resolution level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, GridTooSmallError, InvalidInputError

MAX_PYRAMID_LEVELS = 6


def _freeze_grid(arr, name):
    a = np.array(arr, dtype=np.float64, order="C", copy=True)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got {a.ndim}-D")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image grid. Values must be finite; [0, 1] once normalized."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze_grid(self.data, "image data"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense displacement field with per-pixel (u, v) components in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", _freeze_grid(self.u, "flow u"))
        object.__setattr__(self, "v", _freeze_grid(self.v, "flow v"))
        if self.u.shape != self.v.shape:
            raise InvalidInputError(
                f"flow components disagree: u {self.u.shape} vs v {self.v.shape}"
            )

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def zero_flow(width: int, height: int) -> FlowField:
    return FlowField(np.zeros((height, width)), np.zeros((height, width)))


def constant_flow(width: int, height: int, du: float, dv: float) -> FlowField:
    return FlowField(
        np.full((height, width), float(du)), np.full((height, width), float(dv))
    )


@dataclass(frozen=True, eq=False)
class Pyramid:
    """Coarse-to-fine stack of grids; level 0 is full resolution.

    Level i+1 dims are floor(level i dims / 2). At most MAX_PYRAMID_LEVELS
    levels, all of the same grid kind.
    """

    levels: tuple

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not 1 <= len(levels) <= MAX_PYRAMID_LEVELS:
            raise InvalidInputError(
                f"pyramid must have 1..{MAX_PYRAMID_LEVELS} levels, got {len(levels)}"
            )
        kind = type(levels[0])
        if kind not in (GrayImage, FlowField):
            raise InvalidInputError("pyramid levels must be GrayImage or FlowField")
        for lv in levels[1:]:
            if type(lv) is not kind:
                raise InvalidInputError("pyramid levels must share one grid kind")
        for i in range(1, len(levels)):
            ph, pw = levels[i - 1].shape
            if levels[i].shape != (ph // 2, pw // 2):
                raise DimensionMismatchError(
                    f"level {i} is {levels[i].shape}, expected {(ph // 2, pw // 2)}"
                )

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def normalize(image: GrayImage) -> GrayImage:
    """Map 8-bit intensities [0, 255] to [0, 1] by dividing by 255."""
    data = image.data
    if data.min() < 0.0 or data.max() > 255.0:
        raise InvalidInputError(
            f"expected values in [0, 255], got range [{data.min()}, {data.max()}]"
        )
    return GrayImage(data / 255.0)


def _pool2x(a: np.ndarray) -> np.ndarray:
    # Pairwise sums keep the result bit-exact for blocks of equal values.
    hh, ww = a.shape[0] // 2, a.shape[1] // 2
    b = a[: 2 * hh, : 2 * ww]
    return ((b[0::2, 0::2] + b[0::2, 1::2]) + (b[1::2, 0::2] + b[1::2, 1::2])) * 0.25


def downsample2x(grid):
    """Halve both dimensions by 2x2 average pooling (trailing row/col dropped).

    Flow components are additionally scaled by 0.5 so displacements stay in
    pixels of the coarser grid.
    """
    h, w = grid.shape
    if h < 2 or w < 2:
        raise GridTooSmallError(f"cannot downsample a {h}x{w} grid")
    if isinstance(grid, GrayImage):
        return GrayImage(_pool2x(grid.data))
    if isinstance(grid, FlowField):
        return FlowField(_pool2x(grid.u) * 0.5, _pool2x(grid.v) * 0.5)
    raise InvalidInputError(f"cannot downsample {type(grid).__name__}")


def _lerp_rows(a: np.ndarray, coords: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    c = np.clip(coords, 0.0, n - 1.0)
    i0 = np.floor(c).astype(np.intp)
    i0 = np.minimum(i0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    t = (c - i0)[:, None]
    v0 = a[i0, :]
    v1 = a[i1, :]
    # v0 + t*(v1-v0) is exact for constant fields and at integer coords.
    return v0 + t * (v1 - v0)


def _resize_bilinear(a: np.ndarray, target_height: int, target_width: int) -> np.ndarray:
    sh, sw = a.shape
    rows = (np.arange(target_height) + 0.5) * (sh / target_height) - 0.5
    cols = (np.arange(target_width) + 0.5) * (sw / target_width) - 0.5
    out = _lerp_rows(a, rows)
    out = _lerp_rows(out.T, cols).T
    return out


def upsample2x_flow(flow: FlowField, target_width: int, target_height: int) -> FlowField:
    """Bilinearly upsample a flow to roughly doubled dims, scaling u, v by 2.

    Target dims must each be 2*source or 2*source + 1, matching the floor
    halving used on the way down a pyramid.
    """
    h, w = flow.shape
    for target, source, name in ((target_width, w, "width"), (target_height, h, "height")):
        if target not in (2 * source, 2 * source + 1):
            raise DimensionMismatchError(
                f"target {name} {target} incompatible with 2x upsample from {source}"
            )
    u = _resize_bilinear(flow.u, target_height, target_width) * 2.0
    v = _resize_bilinear(flow.v, target_height, target_width) * 2.0
    return FlowField(u, v)


def build_pyramid(grid, levels: int) -> Pyramid:
    """Repeatedly downsample2x a grid into a Pyramid with `levels` levels."""
    if not 1 <= levels <= MAX_PYRAMID_LEVELS:
        raise InvalidInputError(
            f"levels must be 1..{MAX_PYRAMID_LEVELS}, got {levels}"
        )
    h, w = grid.shape
    need = 2 ** (levels - 1)
    if h < need or w < need:
        raise GridTooSmallError(
            f"{h}x{w} grid cannot support {levels} levels (needs at least {need} per side)"
        )
    out = [grid]
    for _ in range(levels - 1):
        out.append(downsample2x(out[-1]))
    return Pyramid(tuple(out))
