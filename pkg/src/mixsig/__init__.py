"""Weighted-sum Gaussian process latent variable models for signal separation."""
import jax

# The collapsed bound subtracts large terms; single precision breaks it.
jax.config.update("jax_enable_x64", True)

from .errors import *  # noqa: E402,F401,F403

__version__ = "0.1.0"
