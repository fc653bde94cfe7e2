"""
RefPaint: Reference-Based Painterly Inpainting

A desk-scale diffusion inpainting library. A hole in an artwork is filled
with an object taken from a separate reference image, while the result
follows the artwork's style. The pieces are a variance-preserving noise
schedule, a free-form mask generator, a patch-token embedder with a PCA
semantic/style split, a UNet denoiser with a ladder-side background branch
and masked fusion, a self-supervised trainer, a guided sampler with
background blending, and embedding-distance evaluation.
"""

# Package metadata
__version__ = "2.0.0"
__author__ = "Team Class Tracker (Kayla Fuentes, Rhea Vyragaram, Jocelyn DeHenzel, Vinindi Withanage)"
__description__ = "Reference-based painterly inpainting with diffusion"
__license__ = "MIT"

from config import (
    RunConfig,
    ScheduleConfig,
    DenoiserConfig,
    StrokeParams,
    TrainConfig,
    DataConfig,
    load_run_config,
)
from errors import (
    RefPaintError,
    ParameterError,
    ShapeError,
    ConfigurationError,
    DegenerateInputError,
    MaskGenerationError,
    CheckpointError,
    NonFiniteLossError,
    UsageError,
)
from diffusion_schedule import (
    NoiseSchedule,
    build_schedule,
    forward_sample,
    predict_x0,
    reverse_step,
)
from mask_engine import (
    Quadruplet,
    generate_freeform,
    maybe_full_hole,
    make_quadruplet,
    downsample_mask,
)
from embedder import (
    PatchTokens,
    PatchEmbedder,
    PcaBasis,
    fit_pca,
    decompose,
)
from denoiser import (
    RefPaintModel,
    masked_fuse,
    cross_attend,
    init_params,
)
from trainer import (
    Trainer,
    compute_loss,
    run_training,
)
from sampler import (
    GuidanceParams,
    InpaintEngine,
    guided_epsilon,
    blend_step,
    inpaint,
    sweep_gamma,
)
from evaluator import (
    EvalReport,
    copy_paste,
    embed_distance,
    eval_pair,
    hole_mse,
    evaluate_manifest,
)
from dataset import (
    ImageDataset,
    load_dir,
    procedural_corpus,
)
from checkpoint import (
    Checkpoint,
    save_checkpoint,
    load_checkpoint,
)

__all__ = [
    # Configuration and errors
    'RunConfig', 'ScheduleConfig', 'DenoiserConfig', 'StrokeParams', 'TrainConfig', 'DataConfig',
    'load_run_config',
    'RefPaintError', 'ParameterError', 'ShapeError', 'ConfigurationError', 'DegenerateInputError',
    'MaskGenerationError', 'CheckpointError', 'NonFiniteLossError', 'UsageError',

    # Diffusion core
    'NoiseSchedule', 'build_schedule', 'forward_sample', 'predict_x0', 'reverse_step',

    # Masks and embeddings
    'Quadruplet', 'generate_freeform', 'maybe_full_hole', 'make_quadruplet', 'downsample_mask',
    'PatchTokens', 'PatchEmbedder', 'PcaBasis', 'fit_pca', 'decompose',

    # Model, training, sampling
    'RefPaintModel', 'masked_fuse', 'cross_attend', 'init_params',
    'Trainer', 'compute_loss', 'run_training',
    'GuidanceParams', 'InpaintEngine', 'guided_epsilon', 'blend_step', 'inpaint', 'sweep_gamma',

    # Evaluation, data, persistence
    'EvalReport', 'copy_paste', 'embed_distance', 'eval_pair', 'hole_mse', 'evaluate_manifest',
    'ImageDataset', 'load_dir', 'procedural_corpus',
    'Checkpoint', 'save_checkpoint', 'load_checkpoint',
]

# Convenience groupings
DIFFUSION_FUNCTIONS = [
    'build_schedule',
    'forward_sample',
    'predict_x0',
    'reverse_step',
]

MASK_FUNCTIONS = [
    'generate_freeform',
    'maybe_full_hole',
    'make_quadruplet',
    'downsample_mask',
]

GUIDANCE_FUNCTIONS = [
    'guided_epsilon',
    'blend_step',
    'inpaint',
    'sweep_gamma',
]

EVALUATION_FUNCTIONS = [
    'copy_paste',
    'embed_distance',
    'eval_pair',
    'hole_mse',
    'evaluate_manifest',
]
