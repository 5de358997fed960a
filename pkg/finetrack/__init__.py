"""finetrack: coarse-to-fine single-object tracking.

A multi-channel correlation filter gives a coarse target state; Gaussian
proposals around it are ranked by a template-attentive GIoU scorer.
"""

__version__ = "0.1.0"
