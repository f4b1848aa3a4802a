"""Text embedding maps for multimodal document segmentation."""
__version__ = "0.1.0"
