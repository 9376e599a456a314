"""Post-training quantization toolkit for a desk-scale diffusion transformer.

Symmetric fake quantization (per-tensor / per-channel / group-wise),
single-step vs multi-step activation calibration, a deterministic DDIM
sampler over a toy transformer denoiser, and per-layer / per-step SQNR
reporting.
"""

__version__ = "0.1.0"

from .backend import backend_name
from .errors import (
    ConfigError,
    ContractError,
    DitquantError,
    ShapeError,
    SignalError,
)

__all__ = [
    "__version__",
    "backend_name",
    "ConfigError",
    "ContractError",
    "DitquantError",
    "ShapeError",
    "SignalError",
]
