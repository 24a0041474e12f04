"""Dynamic residual transfer for multi-source domain adaptation, on a small numpy autodiff core."""

from .dynamic import BasisLayout, DynamicConv2d, ResidualMode, aggregate_kernel, compute_coefficients
from .models import AdaptationModel, Architecture, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdaptationModel", "Architecture", "BasisLayout", "DynamicConv2d", "ResidualMode",
    "aggregate_kernel", "compute_coefficients", "load_checkpoint", "save_checkpoint",
]
