"""Semiparametric Cormack-Jolly-Seber models fitted by penalized likelihood."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
