"""Geometry (resize, augmentation) and channel-axis fusion of image and text maps."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from ..embedmap import PCAModel, TextEmbeddingMap, gather, owner_grid, project_vectors
from ..errors import DataError

PIXEL_BUDGET = 500_000


class Modality(enum.Enum):
    IMAGE = "image"
    TEXT = "text"
    IMAGE_TEXT = "image+text"

    @classmethod
    def parse(cls, value: Union[str, "Modality"]) -> "Modality":
        if isinstance(value, Modality):
            return value
        v = value.lower().replace("_", "+").replace("-", "+")
        for m in cls:
            if m.value == v:
                return m
        raise DataError(f"unknown modality {value!r}; expected image, text or image+text")

    @property
    def uses_text(self) -> bool:
        return self is not Modality.IMAGE

    @property
    def label(self) -> str:
        return {"image": "Image", "text": "Text", "image+text": "Image+Text"}[self.value]


@dataclass
class Sample:
    """One training/evaluation page: image, token boxes with (reduced) vectors, labels."""

    image: np.ndarray  # H×W×C float32
    boxes: np.ndarray  # T×4 int, half-open
    vectors: np.ndarray  # T×N' float32
    mask: Optional[np.ndarray] = None  # H×W uint8
    page_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def text_map(self) -> np.ndarray:
        h, w = self.shape
        return gather(owner_grid(self.boxes, h, w), self.vectors)


def budget_scale(height: int, width: int, budget: int = PIXEL_BUDGET) -> float:
    if height <= 0 or width <= 0:
        raise DataError("image must be non-empty")
    if height * width <= budget:
        return 1.0
    return math.sqrt(budget / (height * width))


def budget_shape(height: int, width: int, budget: int = PIXEL_BUDGET) -> tuple[int, int]:
    """Output (H, W) of :func:`resize_to_budget`."""
    s = budget_scale(height, width, budget)
    if s == 1.0:
        return height, width
    return max(1, math.floor(height * s)), max(1, math.floor(width * s))


def scale_boxes(boxes, s: float, height: int, width: int) -> np.ndarray:
    """Scale boxes by ``s``: floor on minimum edges, ceil on maximum edges, then clip."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty(boxes.shape, dtype=np.int64)
    out[:, 0] = np.floor(boxes[:, 0] * s)
    out[:, 1] = np.floor(boxes[:, 1] * s)
    out[:, 2] = np.ceil(boxes[:, 2] * s)
    out[:, 3] = np.ceil(boxes[:, 3] * s)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def _warp(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray, out_shape, order: int, mode: str) -> np.ndarray:
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset, output_shape=out_shape, order=order, mode=mode, cval=0)
    chans = [
        ndimage.affine_transform(arr[:, :, c], matrix, offset, output_shape=out_shape, order=order, mode=mode)
        for c in range(arr.shape[2])
    ]
    return np.stack(chans, axis=2)


def _scale_warp(arr, s: float, out_shape, order: int, mode: str):
    # output pixel center (i + .5) maps to input (i + .5) / s
    matrix = np.diag([1.0 / s, 1.0 / s])
    offset = np.full(2, 0.5 / s - 0.5)
    return _warp(arr, matrix, offset, out_shape, order, mode)


@dataclass
class Resized:
    image: np.ndarray
    scale: float
    boxes: Optional[np.ndarray] = None
    text_map: Optional[TextEmbeddingMap] = None
    mask: Optional[np.ndarray] = None


def resize_to_budget(image: np.ndarray, budget: int = PIXEL_BUDGET, boxes=None, vectors=None, mask=None) -> Resized:
    """Bilinear downscale so that H·W fits in ``budget``; unchanged when it already fits.

    With ``boxes`` (and ``vectors``) the text map is rebuilt from scaled boxes
    instead of being resampled.
    """
    h, w = image.shape[:2]
    s = budget_scale(h, w, budget)
    if s == 1.0:
        out_boxes = None if boxes is None else np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
        tem = None
        if out_boxes is not None and vectors is not None:
            tem = TextEmbeddingMap(owner_grid(out_boxes, h, w), vectors)
        return Resized(image, 1.0, out_boxes, tem, mask)
    nh, nw = budget_shape(h, w, budget)
    img = _scale_warp(image.astype(np.float32), s, (nh, nw), order=1, mode="nearest")
    out = Resized(img, s)
    if mask is not None:
        out.mask = _scale_warp(mask, s, (nh, nw), order=0, mode="nearest")
    if boxes is not None:
        out.boxes = scale_boxes(boxes, s, nh, nw)
        if vectors is not None:
            out.text_map = TextEmbeddingMap(owner_grid(out.boxes, nh, nw), vectors)
    return out


def resize_sample(sample: Sample, budget: int = PIXEL_BUDGET) -> Sample:
    r = resize_to_budget(sample.image, budget, boxes=sample.boxes, mask=sample.mask)
    if r.scale == 1.0:
        return sample
    return replace(sample, image=r.image, boxes=r.boxes, mask=r.mask)


# ---------------------------------------------------------------------------
# augmentation

def affine_about_center(height: int, width: int, s: float, r: float):
    """Inverse (output -> input) matrix/offset in (row, col) coordinates."""
    c = np.array([height / 2.0, width / 2.0])
    cos, sin = math.cos(r), math.sin(r)
    # forward rotation in (x, y) image coordinates, expressed in (row, col)
    fwd = s * np.array([[cos, sin], [-sin, cos]])
    inv = np.linalg.inv(fwd)
    # pixel centers: p_in = inv @ (p_out + .5 - c) + c - .5
    offset = c - 0.5 - inv @ (c - 0.5)
    return inv, offset, fwd, c


def transform_boxes(boxes, height: int, width: int, s: float, r: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if s == 1.0 and r == 0.0:
        return boxes.astype(np.int64)
    _, _, fwd, c = affine_about_center(height, width, s, r)
    x0, y0, x1, y1 = boxes.T
    corners = np.stack(
        [np.stack([y0, x0], 1), np.stack([y0, x1], 1), np.stack([y1, x0], 1), np.stack([y1, x1], 1)], axis=1
    )  # T×4×2 (row, col)
    moved = (corners - c) @ fwd.T + c
    rows, cols = moved[..., 0], moved[..., 1]
    out = np.stack(
        [np.floor(cols.min(1)), np.floor(rows.min(1)), np.ceil(cols.max(1)), np.ceil(rows.max(1))], axis=1
    ).astype(np.int64)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def augment_with(sample: Sample, s: float, r: float) -> Sample:
    h, w = sample.shape
    if s == 1.0 and r == 0.0:
        return sample
    inv, offset, _, _ = affine_about_center(h, w, s, r)
    image = _warp(sample.image, inv, offset, (h, w), order=1, mode="nearest").astype(np.float32)
    mask = None if sample.mask is None else _warp(sample.mask, inv, offset, (h, w), order=0, mode="constant")
    boxes = transform_boxes(sample.boxes, h, w, s, r)
    return replace(sample, image=image, mask=mask, boxes=boxes)


def sample_transform(rng: np.random.Generator, scale_range=(0.8, 1.2), rotation_range=(-0.01, 0.01)):
    s = float(rng.uniform(*scale_range))
    r = float(rng.uniform(*rotation_range))
    return s, r


def augment(sample: Sample, rng: np.random.Generator, scale_range=(0.8, 1.2), rotation_range=(-0.01, 0.01)) -> Sample:
    """Random scale and rotation about the page center, applied alike to image, labels and token boxes."""
    s, r = sample_transform(rng, scale_range, rotation_range)
    return augment_with(sample, s, r)


# ---------------------------------------------------------------------------
# fusion

def reduce_map_channels(text_map: Union[np.ndarray, TextEmbeddingMap], pca: PCAModel, k: int) -> np.ndarray:
    """Project embedding channels onto the first ``k`` principal axes (zero stays zero)."""
    if k > pca.k:
        raise DataError(f"PCA model has {pca.k} axes, {k} requested")
    data = text_map.data if isinstance(text_map, TextEmbeddingMap) else np.asarray(text_map)
    return project_vectors(data, pca.truncated(k)).astype(np.float32)


def make_fused_input(image: np.ndarray, text_map, modality) -> np.ndarray:
    """H×W×(C + N') input: image channels first, then embedding channels."""
    modality = Modality.parse(modality)
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    if modality is Modality.IMAGE:
        return image
    if isinstance(text_map, TextEmbeddingMap):
        text_map = text_map.data
    text_map = np.asarray(text_map, dtype=np.float32)
    if text_map.shape[:2] != image.shape[:2]:
        raise DataError(f"map {text_map.shape[:2]} and image {image.shape[:2]} differ in size")
    if modality is Modality.TEXT:
        image = np.zeros_like(image)
    return np.concatenate([image, text_map], axis=2)


def sample_input(sample: Sample, modality: Modality) -> np.ndarray:
    if modality is Modality.IMAGE:
        return make_fused_input(sample.image, None, modality)
    return make_fused_input(sample.image, sample.text_map(), modality)
