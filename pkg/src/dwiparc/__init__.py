"""Two-stage diffusion-MRI brain parcellation toolkit."""

__version__ = "0.1.0"
