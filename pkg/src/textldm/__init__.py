"""Latent diffusion for text at desk scale.

A per-token Gaussian VAE (aligned to a frozen teacher) maps words to
continuous latents; a flow-matching transformer generates continuations in
that space and an Euler sampler with classifier-free guidance decodes them.
"""

from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"
__all__ = ["Tensor", "backward", "no_grad", "precision", "__version__"]
