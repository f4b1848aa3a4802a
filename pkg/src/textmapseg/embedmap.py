"""Pixel-aligned text embedding maps and their PCA false-color rendering."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import DataError, FormatError

NONE = -1
DEFAULT_MEMORY_BUDGET = 2 * 1024**3  # bytes for a dense float32 map


class TextEmbeddingMap:
    """H×W grid of token ownership plus one vector per token.

    ``data`` (H×W×N float32) is materialized from ``owner`` and
    ``token_vectors`` on first access, so large maps can stay sparse.
    """

    def __init__(self, owner: np.ndarray, token_vectors: np.ndarray):
        owner = np.asarray(owner, dtype=np.int32)
        token_vectors = np.asarray(token_vectors, dtype=np.float32)
        if owner.ndim != 2 or token_vectors.ndim != 2:
            raise DataError("owner must be 2-D and token_vectors (T, N)")
        if token_vectors.shape[1] == 0:
            raise DataError("embedding dimension N must be positive")
        if owner.size and owner.max() >= len(token_vectors):
            raise DataError("owner grid references a missing token")
        self.owner = owner
        self.token_vectors = token_vectors
        self._data: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.owner.shape[0]

    @property
    def width(self) -> int:
        return self.owner.shape[1]

    @property
    def dim(self) -> int:
        return self.token_vectors.shape[1]

    @property
    def dense_nbytes(self) -> int:
        return self.height * self.width * self.dim * 4

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            self._data = gather(self.owner, self.token_vectors)
        return self._data

    def __eq__(self, other):
        if not isinstance(other, TextEmbeddingMap):
            return NotImplemented
        return np.array_equal(self.owner, other.owner) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"TextEmbeddingMap(H={self.height}, W={self.width}, N={self.dim}, tokens={len(self.token_vectors)})"


def gather(owner: np.ndarray, token_vectors: np.ndarray) -> np.ndarray:
    """Dense H×W×N array: owning token's vector, zero where unowned."""
    table = np.concatenate([token_vectors, np.zeros((1, token_vectors.shape[1]), token_vectors.dtype)])
    return table[np.where(owner >= 0, owner, len(token_vectors))]


def owner_grid(boxes, height: int, width: int) -> np.ndarray:
    """Assign each pixel to the covering box with the nearest center.

    Boxes are half-open ``(x0, y0, x1, y1)`` rows; exact distance ties go to
    the lowest box index. Uncovered pixels get ``NONE``.
    """
    owner = np.full((height, width), NONE, dtype=np.int32)
    best = np.full((height, width), np.inf)
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    for k, (x0, y0, x1, y1) in enumerate(boxes):
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, width), min(y1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        cx = (boxes[k, 0] + boxes[k, 2]) / 2.0
        cy = (boxes[k, 1] + boxes[k, 3]) / 2.0
        dx = np.arange(x0, x1) + 0.5 - cx
        dy = np.arange(y0, y1) + 0.5 - cy
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        view_best = best[y0:y1, x0:x1]
        win = d2 < view_best
        view_best[win] = d2[win]
        owner[y0:y1, x0:x1][win] = k
    return owner


def build_map_from_vectors(boxes, vectors, height: int, width: int) -> TextEmbeddingMap:
    return TextEmbeddingMap(owner_grid(boxes, height, width), vectors)


def build_map(page, store, memory_budget: Optional[int] = DEFAULT_MEMORY_BUDGET, dense: bool = True) -> TextEmbeddingMap:
    """Text embedding map of ``page`` using ``store`` lookups.

    With ``dense=True`` the H×W×N array is materialized and must fit in
    ``memory_budget`` bytes; pass ``dense=False`` for the sparse form.
    """
    if store.dim <= 0:
        raise DataError("embedding dimension N must be positive")
    nbytes = page.height * page.width * store.dim * 4
    if dense and memory_budget is not None and nbytes > memory_budget:
        raise DataError(
            f"dense map needs {nbytes} bytes (> budget {memory_budget}); use dense=False (sparse mode)"
        )
    boxes = [t.box for t in page.tokens]
    vectors = store.lookup_many(t.text for t in page.tokens)
    tem = build_map_from_vectors(boxes, vectors.reshape(-1, store.dim), page.height, page.width)
    if dense:
        tem.data  # noqa: B018 - materialize now so the budget check is meaningful
    return tem


# ---------------------------------------------------------------------------
# PCA

@dataclass
class PCAModel:
    mean: np.ndarray  # (N,)
    axes: np.ndarray  # (k, N), orthonormal rows
    lo: np.ndarray  # (k,) projection minimum over the fitted vectors
    hi: np.ndarray  # (k,)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.axes.shape[0]

    def truncated(self, k: int) -> "PCAModel":
        return PCAModel(self.mean, self.axes[:k], self.lo[:k], self.hi[:k])


def _distinct_nonzero(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    vectors = vectors[np.any(vectors != 0, axis=1)]
    if len(vectors) == 0:
        return vectors
    return np.unique(vectors, axis=0)


def fit_pca(source: Union[np.ndarray, Sequence[TextEmbeddingMap]], k: int = 3) -> PCAModel:
    """Top-``k`` principal axes of the distinct nonzero token vectors.

    Each axis is oriented so its largest-magnitude component is positive.
    """
    if isinstance(source, np.ndarray):
        vectors = source
    else:
        vectors = np.concatenate([m.token_vectors for m in source]) if len(source) else np.zeros((0, 0))
    x = _distinct_nonzero(vectors)
    if len(x) < k:
        raise DataError(f"PCA needs at least {k} distinct nonzero vectors, got {len(x)}")
    if k > x.shape[1]:
        raise DataError(f"cannot extract {k} axes from dimension {x.shape[1]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    axes = evecs[:, order].T.copy()
    for a in axes:
        if a[np.argmax(np.abs(a))] < 0:
            a *= -1
    proj = x @ axes.T
    return PCAModel(mean, axes, proj.min(axis=0), proj.max(axis=0))


def project_vectors(vectors: np.ndarray, pca: PCAModel) -> np.ndarray:
    """Linear projection onto the principal axes (zero maps to zero)."""
    vectors = np.asarray(vectors)
    if vectors.shape[-1] != pca.dim:
        raise DataError(f"vector dimension {vectors.shape[-1]} != PCA dimension {pca.dim}")
    return vectors @ pca.axes.T


def project_map(tem: TextEmbeddingMap, pca: PCAModel) -> np.ndarray:
    """H×W×3 uint8 false-color image; text-free pixels are white."""
    if pca.k < 3:
        raise DataError("false-color rendering needs a PCA model with 3 axes")
    p3 = pca.truncated(3)
    proj = project_vectors(tem.token_vectors.astype(np.float64), p3)
    span = p3.hi - p3.lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (proj - p3.lo) / safe, 0.5)
    colors = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    zero_vec = ~np.any(tem.token_vectors != 0, axis=1)
    colors[zero_vec] = 255
    table = np.concatenate([colors, np.full((1, 3), 255, np.uint8)])
    return table[np.where(tem.owner >= 0, tem.owner, len(colors))]


def save_visualization(path, tem: TextEmbeddingMap, pca: PCAModel) -> None:
    Image.fromarray(project_map(tem, pca), mode="RGB").save(path)


_PCA_MAGIC = b"PCA1"


def save_pca(path, pca: PCAModel) -> None:
    with open(path, "wb") as f:
        f.write(_PCA_MAGIC)
        f.write(struct.pack("<II", pca.dim, pca.k))
        for arr in (pca.mean, pca.axes, pca.lo, pca.hi):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_pca(path) -> PCAModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _PCA_MAGIC:
        raise FormatError(f"{path}: bad magic")
    n, k = struct.unpack_from("<II", raw, 4)
    need = 12 + 8 * (n + k * n + 2 * k)
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, got {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=12).astype(np.float64)
    mean, rest = vals[:n], vals[n:]
    axes, rest = rest[: k * n].reshape(k, n), rest[k * n :]
    return PCAModel(mean.copy(), axes.copy(), rest[:k].copy(), rest[k:].copy())


# ---------------------------------------------------------------------------
# TEM1 codec: run-length owner grid + token vector dictionary

_MAP_MAGIC = b"TEM1"
_MAP_VERSION = 1


def _runs(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if flat.size == 0:
        return np.zeros(0, np.int32), np.zeros(0, np.uint32)
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return flat[starts].astype(np.int32), lengths.astype(np.uint32)


def encode_map(tem: TextEmbeddingMap) -> bytes:
    values, lengths = _runs(tem.owner.ravel())
    used = np.arange(len(tem.token_vectors))
    runs = np.empty(len(values), dtype=[("v", "<i4"), ("n", "<u4")])
    runs["v"], runs["n"] = values, lengths
    recs = np.empty(len(used), dtype=[("i", "<i4"), ("vec", "<f4", (tem.dim,))])
    recs["i"] = used
    recs["vec"] = tem.token_vectors[used]
    head = _MAP_MAGIC + struct.pack("<HIII", _MAP_VERSION, tem.height, tem.width, tem.dim)
    return b"".join([
        head,
        struct.pack("<I", len(runs)), runs.tobytes(),
        struct.pack("<II", len(recs), len(tem.token_vectors)), recs.tobytes(),
    ])


def decode_map(raw: bytes) -> TextEmbeddingMap:
    if raw[:4] != _MAP_MAGIC:
        raise FormatError("bad map magic")
    try:
        version, h, w, n = struct.unpack_from("<HIII", raw, 4)
        if version != _MAP_VERSION:
            raise FormatError(f"unsupported map version {version}")
        off = 4 + 14
        (nruns,) = struct.unpack_from("<I", raw, off)
        off += 4
        runs = np.frombuffer(raw, dtype=[("v", "<i4"), ("n", "<u4")], count=nruns, offset=off)
        off += runs.nbytes
        nrec, ntok = struct.unpack_from("<II", raw, off)
        off += 8
        recs = np.frombuffer(raw, dtype=[("i", "<i4"), ("vec", "<f4", (n,))], count=nrec, offset=off)
        off += recs.nbytes
    except (struct.error, ValueError):
        raise FormatError("truncated map file") from None
    if off != len(raw):
        raise FormatError("trailing bytes in map file")
    if int(runs["n"].sum()) != h * w:
        raise FormatError("run lengths do not cover the grid")
    owner = np.repeat(runs["v"], runs["n"]).astype(np.int32).reshape(h, w)
    vectors = np.zeros((ntok, n), dtype=np.float32)
    vectors[recs["i"]] = recs["vec"]
    return TextEmbeddingMap(owner, vectors)


def serialize_map(tem: TextEmbeddingMap, path) -> None:
    Path(path).write_bytes(encode_map(tem))


def deserialize_map(path) -> TextEmbeddingMap:
    return decode_map(Path(path).read_bytes())
