"""softgs: differentiable CPU Gaussian splatting with softmax-weighted
compositing, order-invariant overlap handling, and controllable boundary
sharpness."""

from .compositor import (ContractViolationError, PixelTape, RayState,
                         StepRecord, composite_ray, composite_ray_vanilla,
                         composite_step, decay_interpolate, exponent,
                         gef_absorbance, order_invariance_correct,
                         softmax_weight, transmittance_scale)
from .gradients import BackwardAux, GradientBuffer, backward_image, backward_pixel
from .optimizer import (Adam, FitDivergence, LearningRates, OptimizerConfig,
                        adam_step, densify_and_prune, fit, loss,
                        variance_regularizer)
from .patterns import make_pattern, psnr, ssim
from .plyio import load_ply, save_ply
from .projection import Culled, Splat, SplatBatch, gef_cull_radius, project, project_batch
from .rasterizer import RenderOptions, RenderOutput, bin_tiles, render
from .scene import (ActivatedGaussian, Camera, Gaussian, GaussianCloud,
                    activate, initialize_synthetic)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
