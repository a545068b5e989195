"""Desk-scale medical image autoencoders: numpy autodiff, two-stage training, evaluation."""

from .ndtensor import Tensor
from .vae import VAEConfig, VAEModel, latent_shape

__all__ = ["Tensor", "VAEConfig", "VAEModel", "latent_shape"]
__version__ = "0.1.0"
