"""Synthetic particle image pairs with analytic ground-truth flows.

Particles are scattered uniformly (seeded PCG64), rendered as isotropic
Gaussian blobs clipped at 3 sigma, and advected between frames by the
analytic flow evaluated at each particle center. The scatter domain extends
past the frame by the blob radius plus the maximum displacement so particle
density stays consistent at the borders of both frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError
from .fields import FlowField, GrayImage
from .warp import pixel_grid


class AnalyticFlow:
    """Base for closed-form displacement fields; subclasses fill in evaluate()."""

    kind = "base"

    def evaluate(self, xs, ys):
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def evaluate_grid(self, width: int, height: int) -> FlowField:
        xs, ys = pixel_grid(width, height)
        u, v = self.evaluate(xs, ys)
        return FlowField(np.broadcast_to(u, xs.shape), np.broadcast_to(v, xs.shape))


@dataclass(frozen=True)
class UniformFlow(AnalyticFlow):
    dx: float
    dy: float
    kind = "uniform"

    def evaluate(self, xs, ys):
        return np.full_like(xs, self.dx), np.full_like(ys, self.dy)

    def params(self):
        return {"dx": self.dx, "dy": self.dy}


@dataclass(frozen=True)
class ShearFlow(AnalyticFlow):
    """Horizontal displacement growing linearly with distance from center_y."""

    rate: float
    center_y: float
    kind = "shear"

    def evaluate(self, xs, ys):
        return self.rate * (ys - self.center_y), np.zeros_like(ys)

    def params(self):
        return {"rate": self.rate, "center_y": self.center_y}


@dataclass(frozen=True)
class SolidRotation(AnalyticFlow):
    """Exact rigid rotation by angle omega (radians) about a center point."""

    omega: float
    center: tuple
    kind = "solid_rotation"

    def evaluate(self, xs, ys):
        cx, cy = self.center
        rx = xs - cx
        ry = ys - cy
        cos_w = math.cos(self.omega)
        sin_w = math.sin(self.omega)
        u = rx * cos_w - ry * sin_w - rx
        v = rx * sin_w + ry * cos_w - ry
        return u, v

    def params(self):
        return {"omega": self.omega, "center_x": self.center[0], "center_y": self.center[1]}


@dataclass(frozen=True)
class LambOseenVortex(AnalyticFlow):
    """Tangential speed G/(2 pi r) * (1 - exp(-r^2/rc^2)); peaks near r = 1.12 rc."""

    circulation: float
    core_radius: float
    center: tuple
    kind = "lamb_oseen_vortex"

    def evaluate(self, xs, ys):
        cx, cy = self.center
        rx = xs - cx
        ry = ys - cy
        r2 = rx * rx + ry * ry
        # -expm1(-x) = 1 - exp(-x), stable for small x; the r=0 limit is 0.
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = self.circulation / (2.0 * math.pi) * (
                -np.expm1(-r2 / self.core_radius**2)
            ) / r2
        scale = np.where(r2 > 0.0, scale, 0.0)
        return -scale * ry, scale * rx

    def params(self):
        return {
            "circulation": self.circulation,
            "core_radius": self.core_radius,
            "center_x": self.center[0],
            "center_y": self.center[1],
        }


@dataclass(frozen=True)
class SinusoidFlow(AnalyticFlow):
    """Transverse wave: u = amplitude * sin(2 pi y / wavelength), v = 0."""

    amplitude: float
    wavelength: float
    kind = "sinusoid"

    def evaluate(self, xs, ys):
        u = self.amplitude * np.sin(2.0 * math.pi * ys / self.wavelength)
        return u, np.zeros_like(ys)

    def params(self):
        return {"amplitude": self.amplitude, "wavelength": self.wavelength}


FLOW_SPEC_GRAMMAR = (
    "uniform:dx,dy | shear:rate | rotation:omega[,cx,cy] | "
    "vortex:circulation,core_radius[,cx,cy] | sinusoid:amplitude,wavelength"
)


def parse_flow_spec(spec: str, image_size: int) -> AnalyticFlow:
    """Build an AnalyticFlow from a `kind:param,param` string.

    Center parameters default to the image center (size-1)/2.
    """
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    try:
        values = [float(p) for p in rest.split(",")] if rest.strip() else []
    except ValueError as exc:
        raise ConfigError(f"bad flow spec {spec!r}: {FLOW_SPEC_GRAMMAR}") from exc
    center = ((image_size - 1) / 2.0, (image_size - 1) / 2.0)
    try:
        if kind == "uniform" and len(values) == 2:
            return UniformFlow(values[0], values[1])
        if kind == "shear" and len(values) == 1:
            return ShearFlow(values[0], center[1])
        if kind == "rotation" and len(values) in (1, 3):
            c = tuple(values[1:3]) if len(values) == 3 else center
            return SolidRotation(values[0], c)
        if kind == "vortex" and len(values) in (2, 4):
            if values[1] <= 0.0:
                raise ConfigError("vortex core_radius must be positive")
            c = tuple(values[2:4]) if len(values) == 4 else center
            return LambOseenVortex(values[0], values[1], c)
        if kind == "sinusoid" and len(values) == 2:
            if values[1] == 0.0:
                raise ConfigError("sinusoid wavelength must be nonzero")
            return SinusoidFlow(values[0], values[1])
    except ConfigError:
        raise
    raise ConfigError(f"bad flow spec {spec!r}: {FLOW_SPEC_GRAMMAR}")


@dataclass(frozen=True)
class ParticleConfig:
    """Rendering parameters for one synthetic pair.

    particle_count defaults to 5% of the pixel count when left as None.
    particle_diameter is the Gaussian sigma of the blob, in pixels.
    """

    image_size: int = 256
    particle_count: int | None = None
    particle_diameter: float = 1.0
    peak_intensity: float = 1.0
    background: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 4:
            raise InvalidInputError(f"image_size must be >= 4, got {self.image_size}")
        if self.particle_count is not None and self.particle_count < 1:
            raise InvalidInputError("particle_count must be >= 1")
        if self.particle_diameter <= 0.0:
            raise InvalidInputError("particle_diameter must be positive")
        if not 0.0 <= self.background < self.peak_intensity <= 1.0:
            raise InvalidInputError(
                "need 0 <= background < peak_intensity <= 1, got "
                f"background={self.background} peak_intensity={self.peak_intensity}"
            )

    def resolved_count(self) -> int:
        if self.particle_count is not None:
            return self.particle_count
        return int(round(0.05 * self.image_size * self.image_size))


def _render(size, px, py, sigma, amplitude, background):
    img = np.full((size, size), background)
    radius = 3.0 * sigma
    inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma)
    r2_cut = radius * radius
    for xc, yc in zip(px, py):
        x0 = max(int(math.ceil(xc - radius)), 0)
        x1 = min(int(math.floor(xc + radius)), size - 1)
        y0 = max(int(math.ceil(yc - radius)), 0)
        y1 = min(int(math.floor(yc + radius)), size - 1)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1) - xc
        dy = np.arange(y0, y1 + 1) - yc
        r2 = dy[:, None] ** 2 + dx[None, :] ** 2
        img[y0 : y1 + 1, x0 : x1 + 1] += np.where(
            r2 <= r2_cut, amplitude * np.exp(-r2 * inv_two_sigma2), 0.0
        )
    return np.clip(img, 0.0, 1.0)


def render_pair(flow: AnalyticFlow, config: ParticleConfig):
    """Render (image1, image2, truth). Images are in [0, 1]; truth is the flow
    evaluated on the pixel grid."""
    size = config.image_size
    truth = flow.evaluate_grid(size, size)
    max_disp = float(truth.magnitude().max())
    margin = math.ceil(3.0 * config.particle_diameter + max_disp)

    rng = np.random.default_rng(config.seed)
    n = config.resolved_count()
    # Scale the count so in-frame density matches the configured count.
    extended = size + 2 * margin
    n_total = int(round(n * (extended / size) ** 2))
    px = rng.uniform(-margin, size + margin, size=n_total)
    py = rng.uniform(-margin, size + margin, size=n_total)

    du, dv = flow.evaluate(px, py)
    amplitude = config.peak_intensity - config.background
    img1 = _render(size, px, py, config.particle_diameter, amplitude, config.background)
    img2 = _render(size, px + du, py + dv, config.particle_diameter, amplitude, config.background)
    return GrayImage(img1), GrayImage(img2), truth


def flow_stats(flow: AnalyticFlow, image_size: int):
    """(max, mean) displacement magnitude over the pixel grid."""
    mag = flow.evaluate_grid(image_size, image_size).magnitude()
    return float(mag.max()), float(mag.mean())
