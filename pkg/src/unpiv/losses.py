"""Unsupervised flow objective: photometric, smoothness and consistency terms.

Every term is a plain (unnormalized) sum of generalized Charbonnier penalties
rho(x) = (x^2 + epsilon^2)^gamma over all pixels, returned together with its
analytic gradient w.r.t. both the forward and backward flow components. The
weighted total and the multi-scale aggregate build on the same pieces.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kvconfig
from .errors import DimensionMismatchError, GridTooSmallError, InvalidInputError
from .fields import FlowField, GrayImage, Pyramid, build_pyramid
from .warp import photometric_residual, pixel_grid, sample_bilinear

DEFAULT_LAYER_WEIGHTS = (12.7, 5.5, 4.35, 3.9, 3.4, 1.1)


@dataclass(frozen=True)
class LossParams:
    """Penalty shape and term weights for the total objective.

    lambda_s weights the second-order smoothness term, lambda_c the
    forward/backward consistency term; layer_weights[i] scales pyramid level i
    in the multi-scale aggregate (index 0 = full resolution).
    """

    gamma: float = 0.45
    epsilon: float = 1e-3
    lambda_p: float = 1.0
    lambda_s: float = 3.0
    lambda_c: float = 0.2
    layer_weights: tuple = DEFAULT_LAYER_WEIGHTS

    def __post_init__(self):
        object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidInputError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epsilon <= 0.0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        lambdas = (self.lambda_p, self.lambda_s, self.lambda_c)
        if any(lam < 0.0 for lam in lambdas):
            raise InvalidInputError("term weights must be non-negative")
        if all(lam == 0.0 for lam in lambdas):
            raise InvalidInputError("at least one term weight must be positive")
        if len(self.layer_weights) != len(DEFAULT_LAYER_WEIGHTS):
            raise InvalidInputError(
                f"layer_weights must have {len(DEFAULT_LAYER_WEIGHTS)} entries"
            )
        if any(w < 0.0 for w in self.layer_weights):
            raise InvalidInputError("layer weights must be non-negative")

    def to_config_text(self) -> str:
        return kvconfig.format_key_values(
            {
                "gamma": repr(self.gamma),
                "epsilon": repr(self.epsilon),
                "lambda_p": repr(self.lambda_p),
                "lambda_s": repr(self.lambda_s),
                "lambda_c": repr(self.lambda_c),
                "layer_weights": ",".join(repr(w) for w in self.layer_weights),
            }
        )

    @classmethod
    def config_keys(cls) -> frozenset:
        return frozenset(
            ("gamma", "epsilon", "lambda_p", "lambda_s", "lambda_c", "layer_weights")
        )

    @classmethod
    def from_mapping(cls, mapping: dict) -> "LossParams":
        base = cls()
        return cls(
            gamma=kvconfig.parse_float(mapping, "gamma", base.gamma),
            epsilon=kvconfig.parse_float(mapping, "epsilon", base.epsilon),
            lambda_p=kvconfig.parse_float(mapping, "lambda_p", base.lambda_p),
            lambda_s=kvconfig.parse_float(mapping, "lambda_s", base.lambda_s),
            lambda_c=kvconfig.parse_float(mapping, "lambda_c", base.lambda_c),
            layer_weights=kvconfig.parse_float_list(
                mapping, "layer_weights", base.layer_weights
            ),
        )

    @classmethod
    def from_config_text(cls, text: str) -> "LossParams":
        return cls.from_mapping(kvconfig.parse_key_values(text))


def charbonnier(x, params: LossParams):
    """Generalized Charbonnier penalty (x^2 + eps^2)^gamma, elementwise."""
    return (np.square(x) + params.epsilon**2) ** params.gamma


def charbonnier_deriv(x, params: LossParams):
    """d/dx of the penalty: 2*gamma*x*(x^2 + eps^2)^(gamma-1)."""
    return 2.0 * params.gamma * np.asarray(x) * (
        np.square(x) + params.epsilon**2
    ) ** (params.gamma - 1.0)


@dataclass(frozen=True, eq=False)
class LossValueGrad:
    """Scalar loss with gradients w.r.t. both flows; `terms` holds the raw
    (unweighted) per-term values when the loss is a weighted combination."""

    value: float
    grad_forward: FlowField
    grad_backward: FlowField
    terms: dict = field(default_factory=dict)


def _check_pair(flow_f: FlowField, flow_b: FlowField):
    if flow_f.shape != flow_b.shape:
        raise DimensionMismatchError(
            f"forward {flow_f.shape} vs backward {flow_b.shape}"
        )


def photometric_loss(
    i1: GrayImage, i2: GrayImage, flow_f: FlowField, flow_b: FlowField, params: LossParams
) -> LossValueGrad:
    """Bidirectional warp error: rho(i1 - warp(i2, F_f)) + rho(i2 - warp(i1, F_b))."""
    _check_pair(flow_f, flow_b)
    if i1.shape != i2.shape or i1.shape != flow_f.shape:
        raise DimensionMismatchError(
            f"images {i1.shape}/{i2.shape} vs flow {flow_f.shape}"
        )
    value = 0.0
    grads = []
    for a, b, flow in ((i1, i2, flow_f), (i2, i1, flow_b)):
        res = photometric_residual(a, b, flow)
        value += float(np.sum(charbonnier(res.residual, params)))
        w = charbonnier_deriv(res.residual, params)
        grads.append(FlowField(w * res.d_du, w * res.d_dv))
    return LossValueGrad(value, grads[0], grads[1])


# Each direction is (row slices, col slices) for the (s, x, r) stencil points.
_STENCIL_DIRECTIONS = (
    ((slice(None), slice(None), slice(None)), (slice(0, -2), slice(1, -1), slice(2, None))),
    ((slice(0, -2), slice(1, -1), slice(2, None)), (slice(None), slice(None), slice(None))),
    ((slice(0, -2), slice(1, -1), slice(2, None)), (slice(0, -2), slice(1, -1), slice(2, None))),
    ((slice(2, None), slice(1, -1), slice(0, -2)), (slice(0, -2), slice(1, -1), slice(2, None))),
)


def smoothness_term_count(width: int, height: int) -> int:
    """Number of rho evaluations in smoothness_loss for a flow pair.

    Per scalar component: horizontal, vertical and two diagonal second
    differences wherever the full 3-point stencil is in bounds; times 4 for
    the two components of the two flows.
    """
    if width < 3 or height < 3:
        raise GridTooSmallError(f"smoothness needs a 3x3 grid, got {height}x{width}")
    per_component = (
        height * (width - 2)
        + width * (height - 2)
        + 2 * (height - 2) * (width - 2)
    )
    return 4 * per_component


def _smoothness_one(component: np.ndarray, params: LossParams):
    value = 0.0
    grad = np.zeros_like(component)
    for rows, cols in _STENCIL_DIRECTIONS:
        s = component[rows[0], cols[0]]
        x = component[rows[1], cols[1]]
        r = component[rows[2], cols[2]]
        t = s - 2.0 * x + r
        value += float(np.sum(charbonnier(t, params)))
        g = charbonnier_deriv(t, params)
        grad[rows[0], cols[0]] += g
        grad[rows[1], cols[1]] -= 2.0 * g
        grad[rows[2], cols[2]] += g
    return value, grad


def smoothness_loss(flow_f: FlowField, flow_b: FlowField, params: LossParams) -> LossValueGrad:
    """Second-order smoothness: rho(F(s) - 2F(x) + F(r)) over horizontal,
    vertical and both diagonal neighbor pairs, per component, per flow.

    Stencils that would leave the grid are skipped (no padding), so boundary
    pixels simply appear in fewer terms.
    """
    _check_pair(flow_f, flow_b)
    h, w = flow_f.shape
    if h < 3 or w < 3:
        raise GridTooSmallError(f"smoothness needs a 3x3 grid, got {h}x{w}")
    value = 0.0
    grads = []
    for flow in (flow_f, flow_b):
        vu, gu = _smoothness_one(flow.u, params)
        vv, gv = _smoothness_one(flow.v, params)
        value += vu + vv
        grads.append(FlowField(gu, gv))
    return LossValueGrad(value, grads[0], grads[1])


def _scatter_corners(shape, sample, weight_grid):
    """Accumulate weight_grid * corner_weight onto each sampled cell corner."""
    h, w = shape
    out = np.zeros(h * w)
    iy0 = sample.iy0.ravel()
    ix0 = sample.ix0.ravel()
    for dy, dx, cw in (
        (0, 0, sample.w00),
        (0, 1, sample.w10),
        (1, 0, sample.w01),
        (1, 1, sample.w11),
    ):
        idx = (iy0 + dy) * w + (ix0 + dx)
        out += np.bincount(idx, weights=(weight_grid * cw).ravel(), minlength=h * w)
    return out.reshape(h, w)


def _consistency_one(primary: FlowField, other: FlowField, params: LossParams):
    """One direction of the cycle error rho(F_p + F_o(x + F_p)), elementwise
    per component. Sample positions x + F_p that leave the grid are clamped to
    the nearest boundary point, so the sampled field is extrapolated by its
    edge value; the position gradient is zeroed on any axis where the clamp
    engages (pushing the sample further out no longer moves it). This keeps
    the penalty continuous in the flow and leaves no border pixel free to
    escape its cycle constraint by overshooting the grid."""
    h, w = primary.shape
    xs, ys = pixel_grid(w, h)
    sx = xs + primary.u
    sy = ys + primary.v
    free_x = ((sx >= 0.0) & (sx <= w - 1.0)).astype(float)
    free_y = ((sy >= 0.0) & (sy <= h - 1.0)).astype(float)
    su = sample_bilinear(other.u, np.clip(sx, 0.0, w - 1.0), np.clip(sy, 0.0, h - 1.0))
    sv = sample_bilinear(other.v, np.clip(sx, 0.0, w - 1.0), np.clip(sy, 0.0, h - 1.0))

    sum_u = primary.u + su.value
    sum_v = primary.v + sv.value
    value = float(np.sum(charbonnier(sum_u, params)) + np.sum(charbonnier(sum_v, params)))

    gu = charbonnier_deriv(sum_u, params)
    gv = charbonnier_deriv(sum_v, params)
    d_primary_u = gu * (1.0 + su.d_dx * free_x) + gv * sv.d_dx * free_x
    d_primary_v = gu * su.d_dy * free_y + gv * (1.0 + sv.d_dy * free_y)
    d_other_u = _scatter_corners(other.shape, su, gu)
    d_other_v = _scatter_corners(other.shape, sv, gv)
    return value, d_primary_u, d_primary_v, d_other_u, d_other_v


def consistency_loss(flow_f: FlowField, flow_b: FlowField, params: LossParams) -> LossValueGrad:
    """Forward-backward cycle error in both directions.

    A perfect inverse pair (F_b(x + F_f(x)) = -F_f(x) and vice versa) sits at
    the minimum 2 * 2 * N * rho(0) with N the pixel count, and has an exactly
    zero gradient there; exact-inverse constant pairs reach it for any offset
    because boundary-clamped sampling of a constant field is still exact.
    """
    _check_pair(flow_f, flow_b)
    vf, dfu, dfv, dbu_s, dbv_s = _consistency_one(flow_f, flow_b, params)
    vb, dbu, dbv, dfu_s, dfv_s = _consistency_one(flow_b, flow_f, params)
    return LossValueGrad(
        vf + vb,
        FlowField(dfu + dfu_s, dfv + dfv_s),
        FlowField(dbu + dbu_s, dbv + dbv_s),
    )


def total_loss(
    i1: GrayImage, i2: GrayImage, flow_f: FlowField, flow_b: FlowField, params: LossParams
) -> LossValueGrad:
    """Weighted sum of the three terms; zero-weight terms are not evaluated."""
    _check_pair(flow_f, flow_b)
    h, w = flow_f.shape
    value = 0.0
    gfu = np.zeros((h, w))
    gfv = np.zeros((h, w))
    gbu = np.zeros((h, w))
    gbv = np.zeros((h, w))
    terms = {}
    parts = (
        ("photometric", params.lambda_p, lambda: photometric_loss(i1, i2, flow_f, flow_b, params)),
        ("smoothness", params.lambda_s, lambda: smoothness_loss(flow_f, flow_b, params)),
        ("consistency", params.lambda_c, lambda: consistency_loss(flow_f, flow_b, params)),
    )
    for name, lam, compute in parts:
        if lam == 0.0:
            continue
        part = compute()
        terms[name] = part.value
        value += lam * part.value
        gfu += lam * part.grad_forward.u
        gfv += lam * part.grad_forward.v
        gbu += lam * part.grad_backward.u
        gbv += lam * part.grad_backward.v
    return LossValueGrad(value, FlowField(gfu, gfv), FlowField(gbu, gbv), terms)


def weighted_level_total(level_values, weights) -> float:
    """Combine per-level loss values with per-level weights (plain ordered sum)."""
    if len(level_values) > len(weights):
        raise InvalidInputError(
            f"{len(level_values)} levels but only {len(weights)} layer weights"
        )
    total = 0.0
    for value, weight in zip(level_values, weights):
        total += weight * value
    return total


@dataclass(frozen=True, eq=False)
class MultiscaleLoss:
    total: float
    levels: tuple  # one LossValueGrad per pyramid level, index 0 = full res


def multiscale_loss(
    i1: GrayImage, i2: GrayImage, pyr_f: Pyramid, pyr_b: Pyramid, params: LossParams
) -> MultiscaleLoss:
    """Evaluate total_loss on every pyramid level and combine with layer_weights.

    Image pyramids are built here to the depth of the flow pyramids; level 0
    is full resolution and gets layer_weights[0].
    """
    if len(pyr_f) != len(pyr_b):
        raise DimensionMismatchError(
            f"flow pyramids disagree in depth: {len(pyr_f)} vs {len(pyr_b)}"
        )
    depth = len(pyr_f)
    if i1.shape != i2.shape or i1.shape != pyr_f[0].shape:
        raise DimensionMismatchError(
            f"images {i1.shape}/{i2.shape} vs flow level 0 {pyr_f[0].shape}"
        )
    pyr_i1 = build_pyramid(i1, depth)
    pyr_i2 = build_pyramid(i2, depth)
    levels = tuple(
        total_loss(pyr_i1[i], pyr_i2[i], pyr_f[i], pyr_b[i], params)
        for i in range(depth)
    )
    total = weighted_level_total([lv.value for lv in levels], params.layer_weights)
    return MultiscaleLoss(total, levels)


def ablation_params(base: LossParams):
    """The standard term-ablation ladder: full objective, then dropping the
    consistency and smoothness terms in turn."""
    return (
        ("P+S+C", base),
        ("P+S", replace(base, lambda_c=0.0)),
        ("P+C", replace(base, lambda_s=0.0)),
    )
