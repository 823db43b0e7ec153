"""Residual multi-task learning engine.

Joint training of four classification heads and three regression heads on
fused feature vectors: shared trunk with a residual block, label-smoothing
cross-entropy / BCE-with-logits / MSE losses, a weighted total loss, Adam,
and size-stratified evaluation reports.
"""

from .backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
