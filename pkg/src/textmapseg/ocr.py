"""OCR token files, VIA-style region annotations and pixel-level label masks.

Token file layout (UTF-8, one file may hold many pages)::

    PAGE <id> <W> <H>
    <text> <x_min> <y_min> <x_max> <y_max>
    ...

Spaces inside token text are written as ``\\s`` and backslashes as ``\\\\``.
Boxes are half-open: a box covers pixels with ``x_min <= x < x_max`` and
``y_min <= y < y_max``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ParseError

logger = logging.getLogger(__name__)

BACKGROUND = 0


@dataclass(frozen=True)
class Token:
    text: str
    box: tuple[int, int, int, int]
    index: int

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str


@dataclass
class Page:
    id: str
    width: int
    height: int
    tokens: list[Token] = field(default_factory=list)
    image: Optional[np.ndarray] = None
    label_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.image is not None and self.image.shape[:2] != (self.height, self.width):
            raise DataError(
                f"page {self.id}: image shape {self.image.shape[:2]} != ({self.height}, {self.width})"
            )
        if self.label_mask is not None and self.label_mask.shape != (self.height, self.width):
            raise DataError(f"page {self.id}: label mask shape mismatch")


@dataclass
class TokenPage:
    """One page block of a token file."""

    page_id: str
    tokens: list[Token]
    width: int
    height: int
    dropped: int = 0


@dataclass(frozen=True)
class Region:
    shape: str  # "rect" or "polygon"
    coords: tuple
    class_id: int
    class_name: str


@dataclass
class AnnotatedPage:
    page_id: str
    regions: list[Region]

    @property
    def annotated(self) -> bool:
        return bool(self.regions)


def class_roster(names: Sequence[str]) -> list[ClassLabel]:
    """Class labels with background at id 0 followed by ``names`` in order."""
    names = list(names)
    if "background" in names:
        names.remove("background")
    if len(set(names)) != len(names):
        raise DataError(f"duplicate class names in {names}")
    return [ClassLabel(0, "background")] + [ClassLabel(i + 1, n) for i, n in enumerate(names)]


def class_map(names: Sequence[str]) -> dict[str, ClassLabel]:
    return {c.name: c for c in class_roster(names)}


# ---------------------------------------------------------------------------
# token files

def escape_text(text: str) -> str:
    return text.replace("\\", "\\\\").replace(" ", "\\s")


def unescape_text(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"s": " ", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def clip_box(box, width: int, height: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = box
    return (
        min(max(x0, 0), width),
        min(max(y0, 0), height),
        min(max(x1, 0), width),
        min(max(y1, 0), height),
    )


def _int_fields(fields, path, lineno):
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise ParseError(f"expected integers, got {' '.join(fields)!r}", path, lineno) from None


def parse_token_lines(lines, path=None) -> list[TokenPage]:
    pages: list[TokenPage] = []
    seen: set[str] = set()
    current: Optional[TokenPage] = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "PAGE":
            if len(fields) != 4:
                raise ParseError("PAGE header needs <id> <W> <H>", path, lineno)
            page_id = fields[1]
            width, height = _int_fields(fields[2:], path, lineno)
            if width <= 0 or height <= 0:
                raise ParseError(f"invalid page dimensions {width}x{height}", path, lineno)
            if page_id in seen:
                raise ParseError(f"duplicate page id {page_id!r}", path, lineno)
            seen.add(page_id)
            current = TokenPage(page_id, [], width, height)
            pages.append(current)
            continue
        if current is None:
            raise ParseError("token line before any PAGE header", path, lineno)
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", path, lineno)
        text = unescape_text(fields[0])
        x0, y0, x1, y1 = _int_fields(fields[1:], path, lineno)
        box = clip_box((x0, y0, x1, y1), current.width, current.height)
        if box[0] >= box[2] or box[1] >= box[3] or not text.strip():
            current.dropped += 1
            continue
        current.tokens.append(Token(text, box, len(current.tokens)))
    for p in pages:
        if p.dropped:
            logger.warning("page %s: dropped %d empty token(s)", p.page_id, p.dropped)
    return pages


def parse_token_file(path) -> list[TokenPage]:
    """Parse a token file into per-page token lists (file order, clipped boxes)."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_token_lines(f, path=path)


def write_token_file(path, pages: Sequence) -> None:
    """Write pages (``Page`` or ``TokenPage``) in the token-file format."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pages:
            pid = getattr(p, "page_id", None) or p.id
            f.write(f"PAGE {pid} {p.width} {p.height}\n")
            for t in p.tokens:
                x0, y0, x1, y1 = t.box
                f.write(f"{escape_text(t.text)} {x0} {y0} {x1} {y1}\n")


# ---------------------------------------------------------------------------
# annotations

def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_segment(p1, p2, p3))
        or (o2 == 0 and on_segment(p1, p2, p4))
        or (o3 == 0 and on_segment(p3, p4, p1))
        or (o4 == 0 and on_segment(p3, p4, p2))
    )


def polygon_is_simple(points) -> bool:
    n = len(points)
    if n < 3:
        return False
    edges = [(points[i], points[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def _region_from_simple(raw) -> tuple[str, tuple, str]:
    shape = raw["shape"]
    coords = raw["coords"]
    if shape == "rect":
        return shape, tuple(coords), raw["class"]
    if coords and not isinstance(coords[0], (list, tuple)):
        coords = list(zip(coords[0::2], coords[1::2]))
    return shape, tuple(tuple(p) for p in coords), raw["class"]


def _region_from_via(raw) -> tuple[str, tuple, str]:
    sa = raw["shape_attributes"]
    attrs = raw.get("region_attributes", {})
    name = attrs.get("class")
    if name is None and len(attrs) == 1:
        name = next(iter(attrs.values()))
    if sa["name"] == "rect":
        x, y, w, h = sa["x"], sa["y"], sa["width"], sa["height"]
        return "rect", (x, y, x + w, y + h), name
    if sa["name"] == "polygon":
        return "polygon", tuple(zip(sa["all_points_x"], sa["all_points_y"])), name
    raise DataError(f"unsupported VIA shape {sa['name']!r}")


def parse_annotation_document(doc, classes: dict[str, ClassLabel], path=None) -> list[AnnotatedPage]:
    if "_via_img_metadata" in doc:
        doc = doc["_via_img_metadata"]
    parsed = []
    unknown: set[str] = set()
    for key, entry in doc.items():
        if isinstance(entry, dict) and "filename" in entry:
            page_id = Path(entry["filename"]).stem
        else:
            page_id = key
        raw_regions = entry.get("regions", []) if isinstance(entry, dict) else entry
        regions = []
        for raw in raw_regions:
            try:
                if "shape_attributes" in raw:
                    shape, coords, name = _region_from_via(raw)
                else:
                    shape, coords, name = _region_from_simple(raw)
            except (KeyError, TypeError) as e:
                raise ParseError(f"page {page_id}: malformed region {raw!r} ({e})", path) from None
            if shape not in ("rect", "polygon"):
                raise ParseError(f"page {page_id}: unknown shape {shape!r}", path)
            if shape == "rect" and len(coords) != 4:
                raise ParseError(f"page {page_id}: rect needs 4 coordinates", path)
            if shape == "polygon" and not polygon_is_simple(coords):
                raise ParseError(f"page {page_id}: polygon is degenerate or self-intersecting", path)
            if name not in classes or name == "background":
                unknown.add(str(name))
                continue
            regions.append(Region(shape, coords, classes[name].id, name))
        parsed.append(AnnotatedPage(page_id, regions))
    if unknown:
        raise DataError(f"unknown class name(s): {', '.join(sorted(unknown))}")
    return parsed


def parse_annotations(path, classes: dict[str, ClassLabel]) -> list[AnnotatedPage]:
    """Parse a VIA-style JSON export into labelled regions per page."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(str(e), path, e.lineno) from None
    return parse_annotation_document(doc, classes, path)


def write_annotations(path, pages: Sequence[AnnotatedPage]) -> None:
    doc = {}
    for p in pages:
        doc[p.page_id] = {
            "regions": [
                {
                    "shape": r.shape,
                    "coords": list(r.coords) if r.shape == "rect" else [list(pt) for pt in r.coords],
                    "class": r.class_name,
                }
                for r in p.regions
            ]
        }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# rasterization

def _points_in_polygon(xs: np.ndarray, ys: np.ndarray, poly) -> np.ndarray:
    # even-odd rule
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i - 1) % n]
        crosses = (ya > ys) != (yb > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (xb - xa) * (ys - ya) / (yb - ya) + xa
        inside ^= crosses & (xs < x_at)
    return inside


def region_mask(region: Region, height: int, width: int) -> np.ndarray:
    """Pixels whose centers fall inside the region."""
    cy = np.arange(height) + 0.5
    cx = np.arange(width) + 0.5
    if region.shape == "rect":
        x0, y0, x1, y1 = region.coords
        rows = (cy >= y0) & (cy < y1)
        cols = (cx >= x0) & (cx < x1)
        return rows[:, None] & cols[None, :]
    xs, ys = np.meshgrid(cx, cy)
    return _points_in_polygon(xs, ys, region.coords)


def rasterize_labels(regions: Sequence[Region], height: int, width: int) -> np.ndarray:
    """Scan-convert regions into a class mask; later regions win on overlap."""
    if height <= 0 or width <= 0:
        raise DataError("mask dimensions must be positive")
    mask = np.zeros((height, width), dtype=np.uint8)
    for r in regions:
        mask[region_mask(r, height, width)] = r.class_id
    return mask


# ---------------------------------------------------------------------------
# PNG helpers

def write_mask_png(path, mask: np.ndarray) -> None:
    if mask.ndim != 2 or mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise DataError("mask must be 2-D with values in [0, 255]")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: expected 8-bit single-channel PNG, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def write_image_png(path, image: np.ndarray) -> None:
    """Save a float image in [0, 1] (H×W or H×W×C) as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image_png(path) -> np.ndarray:
    """Load a PNG as float32 H×W×C in [0, 1] (C = 1 or 3)."""
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "P", "1", "I;16", "I") else im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr

