"""Probability maps -> class masks: background thresholding and small-component removal."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, FormatError

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class Component:
    class_id: int
    pixels: np.ndarray  # (n, 2) row, col
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 half-open

    @property
    def area(self) -> int:
        return len(self.pixels)


def argmax_with_background(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Class mask from an H×W×K probability map (channel k is class k + 1).

    A pixel is background when every class probability is below
    ``threshold``; otherwise it takes the most probable class, lowest id on ties.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    prob_map = np.asarray(prob_map)
    if prob_map.ndim != 3:
        raise DataError("probability map must be H×W×K")
    if prob_map.shape[2] == 0:
        return np.zeros(prob_map.shape[:2], dtype=np.uint8)
    best = np.argmax(prob_map, axis=2)  # first max wins ties
    fg = np.any(prob_map >= threshold, axis=2)
    return np.where(fg, best + 1, 0).astype(np.uint8)


def connected_components(mask: np.ndarray, class_id: int, connectivity: int = 8) -> list[Component]:
    if connectivity not in (4, 8):
        raise DataError("connectivity must be 4 or 8")
    labels, n = ndimage.label(mask == class_id, structure=_EIGHT if connectivity == 8 else _FOUR)
    comps = []
    for sl_idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == sl_idx)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        comps.append(
            Component(class_id, np.stack([rows, cols], axis=1), (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop))
        )
    return comps


def filter_small_components(mask: np.ndarray, min_area_ratio: float = 0.05, connectivity: int = 8) -> np.ndarray:
    """Set components with area strictly below ``min_area_ratio * H * W`` to background."""
    if not 0.0 <= min_area_ratio <= 1.0:
        raise DataError(f"min_area_ratio must be in [0, 1], got {min_area_ratio}")
    mask = np.asarray(mask)
    out = mask.copy()
    # exact: an integer area is below ratio·H·W iff it is below the ceiling
    limit = math.ceil(Fraction(repr(float(min_area_ratio))) * mask.shape[0] * mask.shape[1])
    structure = _EIGHT if connectivity == 8 else _FOUR
    for c in np.unique(mask):
        if c == 0:
            continue
        labels, n = ndimage.label(mask == c, structure=structure)
        if n == 0:
            continue
        areas = np.bincount(labels.ravel())
        small = areas < limit
        small[0] = False
        out[small[labels]] = 0
    return out


def postprocess(prob_map: np.ndarray, threshold: float = 0.5, min_area_ratio: float = 0.05) -> np.ndarray:
    return filter_small_components(argmax_with_background(prob_map, threshold), min_area_ratio)


_PRB_MAGIC = b"PRB1"


def save_probability_map(path, prob_map: np.ndarray) -> None:
    h, w, k = prob_map.shape
    with open(path, "wb") as f:
        f.write(_PRB_MAGIC + struct.pack("<III", h, w, k))
        f.write(np.ascontiguousarray(prob_map, dtype="<f4").tobytes())


def load_probability_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _PRB_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated")
    h, w, k = struct.unpack_from("<III", raw, 4)
    if len(raw) != 16 + 4 * h * w * k:
        raise FormatError(f"{path}: size does not match header")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, k).astype(np.float32)
