"""Tracking representations from single-point annotations.

Pipeline: per-frame target-objectness prior maps built from one annotated
point, soft positive/negative sample generation on top of a small learned
convolutional embedding, a contrastive training loop, and a Siamese
cross-correlation tracker with pseudo-bounding-box labeling.
"""

__version__ = "0.1.0"
