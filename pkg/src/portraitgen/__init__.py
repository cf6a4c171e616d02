"""Toy identity- and expression-conditioned portrait diffusion.

Modules: ``toyfaces`` (procedural corpus), ``schedule`` (noising and one-step
reversal), ``conditioning`` (text encoder, face embedder, token augmentation),
``denoiser`` (UNet with cross-attention), ``losses``, ``trainer``, ``sampler``,
``evalkit`` and ``cli``.
"""

__version__ = "0.1.0"
