"""Numerical toolkit for twisted-Wasserstein contraction of the kinetic Fokker-Planck equation."""
import os as _os

for _k in ("POT_BACKEND_DISABLE_TENSORFLOW", "POT_BACKEND_DISABLE_PYTORCH", "POT_BACKEND_DISABLE_JAX", "POT_BACKEND_DISABLE_CUPY"):
    _os.environ.setdefault(_k, "1")

__version__ = "0.1.0"
