"""Sorting pyrolyzed smartphone components by image classification.

Dataset construction from polygon annotations, a transfer-learning
classifier with early stopping, and confusion-matrix metrics read as
recycling-stream purity and recovery.
"""

__version__ = "0.1.0"
