"""Spatial multi-task learning for breast-cancer biomarkers on 3D volumes.

Pure numpy: a small reverse-mode autograd, a 3D CNN with multi-scale
spatial attention and zone-gated pooling, training, statistics and a CLI.
"""

__version__ = "0.1.0"
