"""Synthetic newspaper-like pages with controllable visual/textual confusability and layout drift.

Each class has a layout *archetype* (how its region looks) and a vocabulary
*cluster* (which words it contains). Two classes sharing an archetype but not
a cluster are visually confusable and textually distinct; changing archetypes
per period while keeping clusters models diachronic layout drift.
"""
from __future__ import annotations

import copy
import hashlib
import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embeddings import EmbeddingStore, load_vectors, save_vectors
from .errors import DataError
from .ocr import (
    AnnotatedPage,
    Page,
    Region,
    Token,
    class_map,
    parse_annotations,
    parse_token_file,
    rasterize_labels,
    read_image_png,
    read_mask_png,
    write_annotations,
    write_image_png,
    write_mask_png,
    write_token_file,
)

ARCHETYPES = ("framed box", "bottom strip", "table grid", "plain column")

DEFAULT_LAYOUT = {
    "framed box": {"frame": 1, "fill": 0.72},
    "bottom strip": {"rule": 1, "fill": 0.92, "rule_every": 3},
    "table grid": {"grid_every": 4, "line": 0.45, "fill": 0.92},
    "plain column": {"fill": 0.92},
}

NEWSPRINT = 0.92
INK = 0.25


@dataclass
class ClassSpec:
    name: str
    archetype: str
    cluster: str
    frequency: float
    layout: dict = field(default_factory=dict)  # overrides of DEFAULT_LAYOUT[archetype]


@dataclass
class ClusterSpec:
    name: str
    n_words: int = 40
    seed: int = 0
    spread: float = 0.35  # isotropic std around the centroid


@dataclass
class CorpusSpec:
    height: int = 32
    width: int = 32
    classes: list[ClassSpec] = field(default_factory=list)
    clusters: list[ClusterSpec] = field(default_factory=lambda: [ClusterSpec("filler")])
    filler_cluster: str = "filler"
    embedding_dim: int = 16
    region_size: tuple[float, float] = (0.3, 0.45)  # fraction of page side
    blank_fraction: float = 0.1
    noise: float = 0.03
    ocr_noise: float = 0.0
    token_height: int = 2
    line_gap: int = 1
    token_width: tuple[int, int] = (2, 5)
    drift: dict = field(default_factory=dict)  # period -> overrides
    seed: int = 0

    def __post_init__(self):
        self.region_size = tuple(self.region_size)
        self.token_width = tuple(self.token_width)
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        self.clusters = [c if isinstance(c, ClusterSpec) else ClusterSpec(**c) for c in self.clusters]
        self.drift = {str(k): v for k, v in self.drift.items()}
        self.validate()

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise DataError("page dimensions must be positive")
        total = sum(c.frequency for c in self.classes)
        if total > 1.0 + 1e-12 or any(c.frequency < 0 for c in self.classes):
            raise DataError(f"class frequencies must be non-negative and sum to at most 1 (got {total})")
        if any(c.frequency > 1.0 - self.blank_fraction for c in self.classes):
            raise DataError("a class frequency cannot exceed the share of non-blank pages")
        names = {c.name for c in self.clusters}
        if len(names) != len(self.clusters):
            raise DataError("duplicate cluster names")
        if self.filler_cluster not in names:
            raise DataError(f"filler cluster {self.filler_cluster!r} is not defined")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise DataError("duplicate class names")
        for c in self.classes:
            if c.cluster not in names:
                raise DataError(f"class {c.name!r} references unknown cluster {c.cluster!r}")
            if c.archetype not in ARCHETYPES:
                raise DataError(f"class {c.name!r}: unknown archetype {c.archetype!r}")
        if not 0.0 <= self.blank_fraction <= 1.0:
            raise DataError("blank_fraction must be in [0, 1]")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**copy.deepcopy(d))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def default_spec(seed: int = 0) -> CorpusSpec:
    """Four content types; weather and death notices share the framed-box look."""
    return CorpusSpec(
        classes=[
            ClassSpec("serial", "bottom strip", "fiction", 0.15),
            ClassSpec("weather", "framed box", "weather", 0.15),
            ClassSpec("death_notice", "framed box", "obituary", 0.15),
            ClassSpec("stocks", "table grid", "finance", 0.15),
        ],
        clusters=[ClusterSpec(n) for n in ("filler", "fiction", "weather", "obituary", "finance")],
        height=48,
        width=48,
        region_size=(0.25, 0.4),
        seed=seed,
    )


def load_spec(path) -> CorpusSpec:
    with open(path, encoding="utf-8") as f:
        return CorpusSpec.from_dict(json.load(f))


def save_spec(path, spec: CorpusSpec) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def apply_drift(spec: CorpusSpec, period) -> CorpusSpec:
    """Spec with the overrides scheduled for ``period``.

    An override looks like ``{"classes": {"serial": {"archetype": "plain column"}},
    "clusters": {...}}``; vocabulary clusters stay as they are unless overridden.
    """
    over = spec.drift.get(str(period))
    if not over:
        return spec
    d = spec.to_dict()
    unknown = set(over) - {"classes", "clusters"}
    if unknown:
        raise DataError(f"unsupported drift keys: {sorted(unknown)}")
    by_name = {c["name"]: c for c in d["classes"]}
    for name, changes in over.get("classes", {}).items():
        if name not in by_name:
            raise DataError(f"drift references unknown class {name!r}")
        changes = dict(changes)
        if "layout" in changes:
            by_name[name]["layout"] = {**by_name[name]["layout"], **changes.pop("layout")}
        if "archetype" in changes and changes["archetype"] != by_name[name]["archetype"]:
            by_name[name]["layout"] = {}
        by_name[name].update(changes)
    cl_by_name = {c["name"]: c for c in d["clusters"]}
    for name, changes in over.get("clusters", {}).items():
        if name not in cl_by_name:
            raise DataError(f"drift references unknown cluster {name!r}")
        cl_by_name[name].update(changes)
    d["drift"] = {}
    return CorpusSpec.from_dict(d)


# ---------------------------------------------------------------------------
# vocabulary and embeddings

def cluster_words(spec: CorpusSpec) -> dict[str, list[str]]:
    """Disjoint word inventories per cluster (deterministic in cluster seeds)."""
    taken: set[str] = set()
    out = {}
    for ci, cl in enumerate(spec.clusters):
        rng = np.random.default_rng([spec.seed, ci, cl.seed, 0x70C])
        words = []
        while len(words) < cl.n_words:
            n = int(rng.integers(3, 9))
            w = "".join(rng.choice(list(string.ascii_lowercase), size=n))
            if w not in taken:
                taken.add(w)
                words.append(w)
        out[cl.name] = words
    return out


def embedding_store(spec: CorpusSpec, oov_policy: str = "subword-hash") -> EmbeddingStore:
    """Per-cluster Gaussian word vectors around well-separated centroids."""
    words = cluster_words(spec)
    vocab = {}
    for ci, cl in enumerate(spec.clusters):
        rng = np.random.default_rng([spec.seed, ci, cl.seed, 0xE3B])
        centroid = rng.standard_normal(spec.embedding_dim)
        centroid *= 2.0 / np.linalg.norm(centroid)
        for w in words[cl.name]:
            vocab[w] = centroid + cl.spread * rng.standard_normal(spec.embedding_dim) / np.sqrt(spec.embedding_dim)
    return EmbeddingStore(vocab, spec.embedding_dim, oov_policy, source="synthetic")


# ---------------------------------------------------------------------------
# page generation

@dataclass
class SyntheticPage:
    page: Page
    regions: list[Region]
    period: str = "0"
    spec_hash: str = ""
    seed: tuple = ()

    @property
    def annotation(self) -> AnnotatedPage:
        return AnnotatedPage(self.page.id, list(self.regions))


def _overlaps(a, b, margin=1) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _layout(rng, spec: CorpusSpec, chosen: Sequence[ClassSpec], attempts: int = 20):
    """Non-overlapping boxes for ``chosen``; each attempt redraws sizes and positions."""
    h, w = spec.height, spec.width
    lo, hi = spec.region_size
    for _ in range(attempts):
        placed = []
        for cls in chosen:
            rh = max(1, int(round(rng.uniform(lo, hi) * h)))
            if cls.archetype == "bottom strip":
                candidates = [(0, h - rh, w, h)]
            else:
                rw = max(1, int(round(rng.uniform(lo, hi) * w)))
                candidates = [(x, y, x + rw, y + rh) for y in range(h - rh + 1) for x in range(w - rw + 1)]
            free = [b for b in candidates if not any(_overlaps(b, p) for p in placed)]
            if not free:
                break
            placed.append(free[int(rng.integers(len(free)))])
        else:
            return placed
    return None


def _token_rows(rng, spec: CorpusSpec, area, words, blocked=()):
    """Lines of tokens filling ``area`` (x0, y0, x1, y1), skipping ``blocked`` rectangles."""
    x0, y0, x1, y1 = area
    th, gap = spec.token_height, spec.line_gap
    tw_lo, tw_hi = spec.token_width
    out = []
    y = y0
    while y + th <= y1:
        x = x0 + int(rng.integers(0, 2))
        while True:
            tw = int(rng.integers(tw_lo, tw_hi + 1))
            if x + tw > x1:
                break
            box = (x, y, x + tw, y + th)
            if not any(_overlaps(box, b, margin=1) for b in blocked):
                out.append((str(rng.choice(words)), box))
            x += tw + 1
        y += th + gap
    return out


def _noisy(rng, text: str, p: float) -> str:
    if p <= 0 or rng.random() >= p:
        return text
    i = int(rng.integers(len(text)))
    return text[:i] + str(rng.choice(list(string.ascii_lowercase + "0123456789"))) + text[i + 1 :]


def _render_archetype(img, box, archetype, params):
    x0, y0, x1, y1 = box
    img[y0:y1, x0:x1] = params.get("fill", NEWSPRINT)
    inner = box
    if archetype == "framed box":
        t = int(params.get("frame", 1))
        if t > 0:
            img[y0 : y0 + t, x0:x1] = 0.05
            img[y1 - t : y1, x0:x1] = 0.05
            img[y0:y1, x0 : x0 + t] = 0.05
            img[y0:y1, x1 - t : x1] = 0.05
        inner = (x0 + t + 1, y0 + t + 1, x1 - t - 1, y1 - t - 1)
    elif archetype == "bottom strip":
        t = int(params.get("rule", 1))
        img[y0 : y0 + t, x0:x1] = 0.05
        every = int(params.get("rule_every", 0))
        if every > 0:
            img[y0 + t + every : y1 : every + 1, x0:x1] = 0.6
        inner = (x0, y0 + t + 1, x1, y1)
    elif archetype == "table grid":
        g = int(params.get("grid_every", 4))
        line = params.get("line", 0.45)
        img[y0:y1:g, x0:x1] = line
        img[y0:y1, x0:x1:g] = line
        inner = (x0, y0, x1, y1)
    return inner


def generate_page(spec: CorpusSpec, index: int, period="0", words=None) -> SyntheticPage:
    period = str(period)
    pspec = apply_drift(spec, period)
    words = words or cluster_words(pspec)
    seed = (pspec.seed, period, index)
    rng = np.random.default_rng([pspec.seed, int(hashlib.sha256(period.encode()).hexdigest()[:8], 16), index])
    h, w = pspec.height, pspec.width
    img = np.full((h, w), NEWSPRINT, dtype=np.float64)
    cmap = class_map(pspec.class_names)

    chosen: list[ClassSpec] = []
    if pspec.classes and rng.random() >= pspec.blank_fraction:
        # frequency is the share of all pages showing the class, blank pages included
        keep = 1.0 - pspec.blank_fraction
        draws = rng.random(len(pspec.classes))
        chosen = [c for c, u in zip(pspec.classes, draws) if u < c.frequency / keep]
        order = rng.permutation(len(chosen))
        # full-width strips first, boxes fill the remaining space
        chosen = sorted((chosen[i] for i in order), key=lambda c: c.archetype != "bottom strip")
    placed = _layout(rng, pspec, chosen) if chosen else []
    if placed is None:
        names = ", ".join(c.name for c in chosen)
        raise DataError(f"page {index}: could not place regions for {names}; lower class frequencies or region_size")
    regions = [Region("rect", box, cmap[c.name].id, c.name) for c, box in zip(chosen, placed)]

    texts_boxes = []
    for cls, box in zip(chosen, placed):
        params = {**DEFAULT_LAYOUT[cls.archetype], **cls.layout}
        inner = _render_archetype(img, box, cls.archetype, params)
        if inner[2] > inner[0] and inner[3] > inner[1]:
            texts_boxes += _token_rows(rng, pspec, inner, words[cls.cluster])
    texts_boxes += _token_rows(rng, pspec, (0, 0, w, h), words[pspec.filler_cluster], blocked=placed)
    texts_boxes.sort(key=lambda tb: (tb[1][1], tb[1][0]))

    tokens = []
    for text, box in texts_boxes:
        x0, y0, x1, y1 = box
        img[y0:y1, x0:x1] = INK + 0.05 * rng.standard_normal()
        tokens.append(Token(_noisy(rng, text, pspec.ocr_noise), box, len(tokens)))
    img += pspec.noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]
    mask = rasterize_labels(regions, h, w)
    page = Page(f"p{period}-{index:05d}", w, h, tokens, img, mask)
    return SyntheticPage(page, regions, period, spec.digest(), seed)


def generate_corpus(spec: CorpusSpec, n_pages: int, period="0", start: int = 0) -> list[SyntheticPage]:
    """Deterministic synthetic pages; page ``i`` depends only on (spec, period, i)."""
    words = cluster_words(apply_drift(spec, period))
    return [generate_page(spec, i, period, words) for i in range(start, start + n_pages)]


# ---------------------------------------------------------------------------
# on-disk corpus: token file + annotations + PNGs

def write_corpus(directory, pages: Sequence[SyntheticPage], spec: CorpusSpec, store: Optional[EmbeddingStore] = None) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(exist_ok=True)
    write_token_file(d / "tokens.txt", [p.page for p in pages])
    write_annotations(d / "annotations.json", [p.annotation for p in pages])
    for p in pages:
        write_image_png(d / "images" / f"{p.page.id}.png", p.page.image)
        write_mask_png(d / "masks" / f"{p.page.id}.png", p.page.label_mask)
    save_spec(d / "spec.json", spec)
    save_vectors(d / "vectors.vec", store or embedding_store(spec))
    meta = {
        "classes": spec.class_names,
        "pages": {p.page.id: {"period": p.period, "seed": list(p.seed)} for p in pages},
        "spec_hash": spec.digest(),
    }
    with open(d / "corpus.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")


@dataclass
class Corpus:
    pages: list[Page]
    class_names: list[str]
    tags: dict[str, dict]
    store: Optional[EmbeddingStore] = None


def load_corpus(directory, oov_policy: str = "subword-hash") -> Corpus:
    """Read a corpus directory (token file, annotations, images; masks rebuilt from annotations)."""
    d = Path(directory)
    with open(d / "corpus.json", encoding="utf-8") as f:
        meta = json.load(f)
    classes = class_map(meta["classes"])
    annotated = {a.page_id: a for a in parse_annotations(d / "annotations.json", classes)}
    pages = []
    for tp in parse_token_file(d / "tokens.txt"):
        img_path = d / "images" / f"{tp.page_id}.png"
        image = read_image_png(img_path) if img_path.exists() else None
        ann = annotated.get(tp.page_id)
        mask = rasterize_labels(ann.regions, tp.height, tp.width) if ann else None
        pages.append(Page(tp.page_id, tp.width, tp.height, tp.tokens, image, mask))
    store = load_vectors(d / "vectors.vec", oov_policy) if (d / "vectors.vec").exists() else None
    return Corpus(pages, list(meta["classes"]), meta.get("pages", {}), store)


def read_masks(directory) -> dict[str, np.ndarray]:
    return {p.stem: read_mask_png(p) for p in sorted(Path(directory).glob("*.png"))}
