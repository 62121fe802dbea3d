"""Spine morphology maps, segmentation and Cobb angle regression."""
from .landmarks import AngleTriple, LandmarkSet

__version__ = "0.1.0"
