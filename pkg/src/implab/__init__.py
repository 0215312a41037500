"""Iterative magnitude pruning and error-landscape geometry at desk scale."""

from implab.model import Batch, ModelSpec, Network, ParamVector
from implab.masks import Mask

__version__ = "0.1.0"

__all__ = ["Batch", "Mask", "ModelSpec", "Network", "ParamVector", "__version__"]
