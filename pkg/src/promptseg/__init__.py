"""Robust text-promptable instrument segmentation with existence gating."""

__version__ = "0.1.0"
