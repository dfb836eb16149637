"""Cartilage segmentation workbench: autodiff engine, U-Net variants,
phantom data pipeline, training loop and evaluation statistics."""

__version__ = "0.1.0"
