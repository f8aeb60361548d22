"""Precipitation post-processing: masked pre-training, frozen-encoder
segmentation with continuous rainfall labels, and forecast verification."""

__version__ = "0.1.0"
