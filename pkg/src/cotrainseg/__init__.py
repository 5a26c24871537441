"""Semi-supervised 3D segmentation via dual-network co-training with
confidence-gated cross pseudo-supervision and text-knowledge injection."""

__version__ = "0.1.0"
