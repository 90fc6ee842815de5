"""Dense particle image velocimetry by direct minimization of an unsupervised
flow objective, with Horn-Schunck and window-correlation baselines."""

from .errors import (
    ConfigError,
    DimensionMismatchError,
    EstimationFailedError,
    FlowFileError,
    GridTooSmallError,
    InvalidInputError,
    UnpivError,
)
from .evalbench import (
    BenchmarkMethod,
    DatasetEntry,
    EvalReport,
    aee,
    aee_per100px,
    error_to_color,
    flow_to_color,
    load_dataset_dir,
    run_benchmark,
)
from .fields import (
    FlowField,
    GrayImage,
    MAX_PYRAMID_LEVELS,
    Pyramid,
    build_pyramid,
    constant_flow,
    downsample2x,
    normalize,
    upsample2x_flow,
    zero_flow,
)
from .fileio import read_flo, read_image, write_flo, write_image
from .losses import (
    DEFAULT_LAYER_WEIGHTS,
    LossParams,
    LossValueGrad,
    MultiscaleLoss,
    ablation_params,
    charbonnier,
    charbonnier_deriv,
    consistency_loss,
    multiscale_loss,
    photometric_loss,
    smoothness_loss,
    smoothness_term_count,
    total_loss,
    weighted_level_total,
)
from .synth import (
    AnalyticFlow,
    LambOseenVortex,
    ParticleConfig,
    ShearFlow,
    SinusoidFlow,
    SolidRotation,
    UniformFlow,
    flow_stats,
    parse_flow_spec,
    render_pair,
)
from .variational import (
    HsConfig,
    SolveTrace,
    SolverConfig,
    estimate_horn_schunck,
    estimate_unsupervised,
    solve_trace_report,
)
from .warp import backwarp, photometric_residual, sample_bilinear
from .xcorr import SparseFlow, XcorrConfig, correlate_window, estimate_multipass

__version__ = "0.1.0"
