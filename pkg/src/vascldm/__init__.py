"""Shape- and anatomy-guided latent diffusion for Circle-of-Willis vessel phantoms."""

__version__ = "0.1.0"
