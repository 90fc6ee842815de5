"""Shared test utilities: random instances and finite-difference checking."""
from __future__ import annotations

import numpy as np

from unpiv import FlowField, GrayImage

# Frozen constants mirrored by hand so a regression in the library defaults is
# caught rather than silently absorbed.
RHO_ZERO = 1e-6**0.45  # penalty value at zero residual for eps=1e-3, gamma=0.45
LAYER_WEIGHTS = (12.7, 5.5, 4.35, 3.9, 3.4, 1.1)
LAYER_WEIGHT_SUM = 30.95


def random_image(rng: np.random.Generator, height: int, width: int) -> GrayImage:
    return GrayImage(rng.uniform(0.0, 1.0, (height, width)))


def random_flow(rng: np.random.Generator, height: int, width: int, scale: float = 1.5) -> FlowField:
    """Continuous random flow; off-lattice with probability one."""
    return FlowField(
        rng.uniform(-scale, scale, (height, width)),
        rng.uniform(-scale, scale, (height, width)),
    )


def flow_theta(flow_f: FlowField, flow_b: FlowField) -> np.ndarray:
    """Stack both flows into one (4, h, w) parameter array."""
    return np.stack([flow_f.u, flow_f.v, flow_b.u, flow_b.v])


def theta_flows(theta: np.ndarray) -> tuple[FlowField, FlowField]:
    return FlowField(theta[0], theta[1]), FlowField(theta[2], theta[3])


def fd_worst_rel_error(
    loss_fn,
    theta: np.ndarray,
    step: float,
    coords=None,
    stride: int = 3,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    `loss_fn(theta)` must return an object with `.value`, `.grad_forward` and
    `.grad_backward`. Checks every component at the given (c, y, x) coords, or
    a strided lattice of them when coords is None.
    """
    _, h, w = theta.shape[0], theta.shape[1], theta.shape[2]
    base = loss_fn(theta)
    analytic = np.stack(
        [
            base.grad_forward.u,
            base.grad_forward.v,
            base.grad_backward.u,
            base.grad_backward.v,
        ]
    )
    if coords is None:
        coords = [
            (c, y, x)
            for c in range(4)
            for y in range(0, h, stride)
            for x in range(0, w, stride)
        ]
    worst = 0.0
    for c, y, x in coords:
        plus = theta.copy()
        plus[c, y, x] += step
        minus = theta.copy()
        minus[c, y, x] -= step
        fd = (loss_fn(plus).value - loss_fn(minus).value) / (2.0 * step)
        a = analytic[c, y, x]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst


def shift_image(data: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer roll of an image; used to build exactly-displaced pairs whose
    interior obeys i2(x + d) = i1(x)."""
    return np.roll(np.roll(data, dy, axis=0), dx, axis=1)
