"""Skeleton generation for 3D meshes: tokenized skeletons, an autoregressive
auto-encoder, mesh-conditioned latent diffusion, plus skinning, evaluation and
motion transfer utilities."""

__version__ = "0.1.0"
