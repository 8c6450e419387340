"""Few-view CT reconstruction: analytic FBP, learned point-wise backprojection and WGAN-GP refinement."""

from .backprojection import PointwiseBackprojection, bp_param_count, fbp_reconstruct, pointwise_backproject
from .estimators import DNAReconstructor, FBPReconstructor, RadonProjector
from .filtration import FilterStack, learned_filter, ramp_filter
from .geometry import GeometryConfig, circle_mask, radon_adjoint, radon_forward
from .losses import (
    LossWeights,
    MetricsReport,
    adversarial_loss_g,
    critic_objective,
    generator_objective,
    gradient_penalty,
    mse_loss,
    psnr,
    rmse,
    sinogram_consistency_loss,
    ssim,
    structural_loss,
)
from .networks import DNA, Critic, DNAConfig, UNet, critic_forward, g1_forward, g2_forward, load_checkpoint, save_checkpoint
from .training import AdamState, TrainConfig, adam_step, pretrain_then_finetune, train_loop

__version__ = "0.1.0"
