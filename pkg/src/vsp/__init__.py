"""Spatial-token visual projector with a self-contained autodiff core.

Turns a square grid of vision-encoder patch features into a short sequence
of spatial tokens (multi-scale pyramid plus full-cover convolutions),
enriches them with cross-attended detail features, and projects both the
spatial and the raw patch paths into a language embedding space. Everything
runs on a small numpy-backed tensor engine with reverse-mode gradients so
the whole pipeline is trainable and checkable at desk scale.
"""

from .tensor import (
    Tensor,
    Parameter,
    TensorError,
    NumericsError,
    no_grad,
    gradients,
    finite_diff_check,
    conv2d_valid,
    adaptive_avg_pool2d,
    center_crop,
    linear,
    layer_norm,
    softmax_rows,
    concat,
    gelu,
    matmul,
)
from .spatial import (
    ScalePyramid,
    ConvGroup,
    SpatialTokenSet,
    scale_schedule,
    build_crop_pyramid,
    build_pool_pyramid,
    build_pyramid,
    extract_spatial_tokens,
    extract_big_map,
    sliding_window_tokens,
)
from .fusion import FusionWeights, FusionResult, fuse_detail, export_attention
from .projector import (
    ProjectorConfig,
    StageError,
    ProjectorOutput,
    TokenSequence,
    init_params,
    projector_forward,
    project_spatial,
    project_patch,
    assemble_sequence,
    token_counts,
)
from .vspf import FormatError, save_features, load_features
from .synth import gen_synthetic_features
from .train import ToyTask, TrainResult, DivergenceError, make_toy_task, toy_train
from .bench import prefill_flops, prefill_ratio, measure_projector
from .checks import run_invariant_suite, format_report
from .rng import StreamRng

__version__ = "0.1.0"
