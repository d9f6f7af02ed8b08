"""Gradient-based class activation maps for small numpy CNNs.

Correlation (Grad-CAM), counterfactual and contrastive maps, their sum,
and deletion/insertion, pointing-game and masked-accuracy evaluation.
"""
from ._backend import NAME as BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
