"""Per-stage prompt conditioning on a small pixel-space diffusion model."""

__version__ = "0.1.0"
