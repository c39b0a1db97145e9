"""vqkit: a small, dependency-light toolkit for discrete-latent autoencoders.

Everything runs on a from-scratch float32 tape autodiff engine over numpy:
encoder/decoder convnets, a vector-quantization bottleneck with
straight-through gradients and optional moving-average codebook updates, a
masked-convolution autoregressive prior over the latent grid, deterministic
training with binary checkpoints, and a CLI.
"""

from .autodiff import (
    DTYPE,
    GradientError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
    set_debug,
)
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_prior,
    load_vqvae,
    save_checkpoint,
    save_prior,
    save_vqvae,
)
from .config import Config, ConfigError, load_config
from .data import DataError, Dataset, load_dataset, load_idx, load_image, save_idx, save_image
from .nets import ModelSpec, VqVae, reconstruction_nll
from .prior import PriorNet, PriorSpec, elbo_bound, prior_nll, sample_prior
from .quantizer import (
    Codebook,
    LatentGrid,
    QuantizerError,
    ema_update,
    kl_to_uniform_prior,
    quantize,
    total_loss,
    vq_loss_terms,
)
from .trainer import (
    Adam,
    TrainAbort,
    TrainConfig,
    TrainerError,
    encode_dataset,
    evaluate,
    train_prior,
    train_vqvae,
)

__version__ = "0.1.0"
