"""dftk: a desk-scale dual-level (local window + global pyramid) video
transformer, with an analytic cost model and brute-force oracles."""

from .numerics import (
    ConfigError,
    ConvKernel3D,
    NumericError,
    ShapeError,
    depthwise_conv3d,
    finite_diff_grad,
    gelu,
    layer_norm,
    linear,
    matmul,
    softmax_rows,
)
from .attention import (
    WHOLE,
    AttentionParams,
    GlobalPriors,
    PegParams,
    PyramidKernels,
    PyramidSpec,
    WindowGrid,
    gp_msa_sublayer,
    lw_msa_sublayer,
    multi_head_attention,
    peg,
    pyramid_downsample,
    window_partition,
    window_reverse,
)
from .model import (
    ModelConfig,
    ModelState,
    StageConfig,
    forward,
    inflate_2d,
    inflate_2d_depthwise,
    init_random,
    micro_config,
    preset,
)
from .analysis import (
    CostReport,
    CostTerm,
    compare_report,
    cost_full,
    cost_gp,
    cost_lw,
    count_macs,
    count_params,
    instrument_forward,
)

__version__ = "0.1.0"
