"""Three-stage one-step generator pipeline: low-resolution diffusion, inversion-based
distillation with an adversarial term, and progressive growing; plus a theory lab."""

__version__ = "0.1.0"
