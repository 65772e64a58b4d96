"""vmixlab: a desk-scale diffusion laboratory for disentangled
content/aesthetic conditioning via value-mixed cross-attention."""

__version__ = "0.1.0"
