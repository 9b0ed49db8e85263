"""Multi-identity audio-driven deformation of 3D Gaussian faces.

A numpy-only reverse-mode autodiff engine, a differentiable splat renderer,
identity-audio disentanglement, spatial-audio cross-attention and a two-stage
training pipeline, exercised on a procedural multi-identity corpus.
"""

__version__ = "0.1.0"
