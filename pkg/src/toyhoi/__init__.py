"""Zero-shot human-object interaction editing on a toy diffusion backbone."""

__version__ = "0.1.0"
