"""Crop biomass from point clouds or multi-view imagery.

Two trainable pieces: a feature field that turns posed images into a
feature-carrying surface point cloud, and a sparse-convolution + transformer
network that regresses plot biomass from any point cloud.
"""

__version__ = "0.1.0"
