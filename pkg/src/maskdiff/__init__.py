"""Mask-conditioned denoising diffusion toolkit.

Train an epsilon-predicting conditional U-Net on paired image/mask data,
generate images for given binary masks, and score the results with
distributional (FID/KID/IS) and overlap (IoU/F1/accuracy/precision) metrics.
"""

from maskdiff.denoiser import (
    ConditionalUNet,
    DenoiserConfig,
    build_denoiser,
    denoiser_forward,
    init_params,
    sinusoidal_embedding,
)
from maskdiff.diffusion import (
    concat_condition,
    invert_q_sample,
    p_sample_step,
    q_sample,
    sample,
    sample_batch,
    training_loss,
)
from maskdiff.schedule import NoiseSchedule, build_schedule, cosine_alpha_bar

__version__ = "0.1.0"

__all__ = [
    "ConditionalUNet",
    "DenoiserConfig",
    "NoiseSchedule",
    "build_denoiser",
    "build_schedule",
    "concat_condition",
    "cosine_alpha_bar",
    "denoiser_forward",
    "init_params",
    "invert_q_sample",
    "p_sample_step",
    "q_sample",
    "sample",
    "sample_batch",
    "sinusoidal_embedding",
    "training_loss",
    "__version__",
]
