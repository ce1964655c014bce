"""Sparse training by soft-thresholded dual averaging, with desk-scale checks that
it prunes along the flat directions of the loss.
"""

__version__ = "0.1.0"
