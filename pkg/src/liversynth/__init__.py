"""Two-stage latent diffusion synthesis of paired liver volumes and label maps."""

__all__ = ["__version__"]

__version__ = "0.1.0"
