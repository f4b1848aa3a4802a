"""Desk-scale per-pixel classifier with early (channel-axis) fusion of image and text maps."""
from .model import PixelModel, bce_with_logits, load_model, loss_and_grads, save_model
from .training import TrainConfig, TrainLog, predict, split_dev, train
from .transforms import (
    PIXEL_BUDGET,
    Modality,
    Sample,
    augment,
    augment_with,
    budget_scale,
    budget_shape,
    make_fused_input,
    reduce_map_channels,
    resize_sample,
    resize_to_budget,
    sample_input,
    scale_boxes,
)

__all__ = [
    "PIXEL_BUDGET", "Modality", "PixelModel", "Sample", "TrainConfig", "TrainLog", "augment", "augment_with",
    "bce_with_logits", "budget_scale", "budget_shape", "load_model", "loss_and_grads", "make_fused_input", "predict",
    "reduce_map_channels", "resize_sample", "resize_to_budget", "sample_input", "save_model", "scale_boxes",
    "split_dev", "train",
]
