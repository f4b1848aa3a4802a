"""Experiment orchestration: splits, modality x run training cells, evaluation and reports.

Every reported number is recomputed from the per-page record files written
under ``<out_dir>/records``; timestamps live only in ``meta.json``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import segmetrics
from .embedmap import PCAModel, fit_pca, project_vectors
from .errors import DataError
from .fusionnet import Modality, Sample, TrainConfig, predict, resize_sample, sample_input, train
from .ocr import Page
from .postproc import postprocess
from .segmetrics import PageRecord, ThresholdRange

logger = logging.getLogger(__name__)

SPLIT_POLICIES = ("random", "period", "source", "fraction-of-train")


@dataclass
class ExperimentConfig:
    corpus: dict  # {"synth": spec-dict, "pages": n, "periods": {...}} or {"dir": path}
    split: dict = field(default_factory=lambda: {"policy": "random", "test_fraction": 0.2})
    modalities: list[str] = field(default_factory=lambda: ["image", "text", "image+text"])
    runs: int = 10
    train: dict = field(default_factory=dict)
    embed_k: int = 8
    threshold: float = 0.5
    min_area_ratio: float = 0.05
    threshold_range: str = "50:5:95"
    seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.runs < 1:
            raise DataError("run count must be at least 1")
        policy = self.split.get("policy", "random")
        if policy not in SPLIT_POLICIES:
            raise DataError(f"unknown split policy {policy!r}")
        for key in ("test_fraction", "heldout_fraction"):
            if key in self.split and not 0.0 < self.split[key] < 1.0:
                raise DataError(f"split {key} must be in (0, 1)")
        for frac in self.split.get("train_fractions", []):
            if not 0.0 < frac <= 1.0:
                raise DataError("train fractions must be in (0, 1]")
        self.modalities = [Modality.parse(m).value for m in self.modalities]
        ThresholdRange.parse(self.threshold_range)
        TrainConfig.from_dict(self.train)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown experiment option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# data preparation

@dataclass
class Dataset:
    pages: list[Page]
    tags: dict[str, dict]
    class_names: list[str]
    store: object


def load_dataset(corpus_cfg: dict) -> Dataset:
    from . import synthgen

    if "dir" in corpus_cfg:
        c = synthgen.load_corpus(corpus_cfg["dir"], corpus_cfg.get("oov_policy", "subword-hash"))
        if c.store is None:
            raise DataError("corpus directory has no vectors.vec")
        return Dataset(c.pages, c.tags, c.class_names, c.store)
    if "synth" not in corpus_cfg:
        raise DataError("corpus needs either 'dir' or 'synth'")
    spec = synthgen.CorpusSpec.from_dict(corpus_cfg["synth"])
    periods = corpus_cfg.get("periods") or {"0": corpus_cfg.get("pages", 100)}
    pages, tags = [], {}
    for period, n in periods.items():
        for sp in synthgen.generate_corpus(spec, int(n), period):
            pages.append(sp.page)
            tags[sp.page.id] = {"period": sp.period, "source": corpus_cfg.get("source", "synthetic")}
    return Dataset(pages, tags, spec.class_names, synthgen.embedding_store(spec))


def fit_corpus_pca(pages: Sequence[Page], store, k: int) -> Optional[PCAModel]:
    """PCA over the distinct token vectors of ``pages`` (``None`` when k >= N: no reduction)."""
    if k >= store.dim:
        return None
    texts = sorted({t.text for p in pages for t in p.tokens})
    return fit_pca(store.lookup_many(texts), k=k)


def to_samples(pages: Sequence[Page], store, pca: Optional[PCAModel], budget: int = 500_000) -> list[Sample]:
    out = []
    for p in pages:
        if p.image is None:
            raise DataError(f"page {p.id} has no image")
        vecs = store.lookup_many(t.text for t in p.tokens).reshape(-1, store.dim)
        if pca is not None:
            vecs = project_vectors(vecs.astype(np.float64), pca)
        boxes = np.array([t.box for t in p.tokens], dtype=np.int64).reshape(-1, 4)
        s = Sample(p.image.astype(np.float32), boxes, vecs.astype(np.float32), p.label_mask, p.id)
        out.append(resize_sample(s, budget))
    return out


def split_pages(pages: Sequence[Page], tags: dict, split: dict, seed: int) -> tuple[list[Page], dict[str, list[Page]]]:
    """Return (train pages, named test sets) for the configured policy."""
    policy = split.get("policy", "random")
    rng = np.random.default_rng([seed, 0x5B17])
    if policy in ("random", "fraction-of-train"):
        frac = split.get("test_fraction", 0.2)
        perm = rng.permutation(len(pages))
        n_test = int(math.floor(len(pages) * frac + 0.5))
        test = [pages[i] for i in sorted(perm[:n_test])]
        train_ = [pages[i] for i in sorted(perm[n_test:])]
        return train_, {"test": test}
    key = "period" if policy == "period" else "source"
    train_vals = {str(v) for v in split[f"train_{key}s"]}
    test_vals = {str(v) for v in split[f"test_{key}s"]}
    if train_vals & test_vals:
        raise DataError(f"train and test {key}s overlap")
    inside = [p for p in pages if str(tags[p.id][key]) in train_vals]
    outside = [p for p in pages if str(tags[p.id][key]) in test_vals]
    tests = {key: outside}
    if split.get("heldout_fraction"):
        perm = rng.permutation(len(inside))
        n_h = int(math.floor(len(inside) * split["heldout_fraction"] + 0.5))
        tests = {"heldout": [inside[i] for i in sorted(perm[:n_h])], key: outside}
        inside = [inside[i] for i in sorted(perm[n_h:])]
    return inside, tests


def train_subset(pages: Sequence[Page], fraction: float, seed: int) -> list[Page]:
    if fraction >= 1.0:
        return list(pages)
    perm = np.random.default_rng([seed, 0xF5A]).permutation(len(pages))
    n = max(1, int(math.floor(len(pages) * fraction + 0.5)))
    return [pages[i] for i in sorted(perm[:n])]


# ---------------------------------------------------------------------------
# running

def evaluate_model(model, samples: Sequence[Sample], modality, class_ids, threshold=0.5, min_area_ratio=0.05):
    """Per-page/per-class IoU records for ``samples`` after post-processing."""
    modality = Modality.parse(modality)
    records = []
    for s in samples:
        prob = predict(model, sample_input(s, modality))
        pred = postprocess(prob, threshold, min_area_ratio)
        for c in class_ids:
            records.append(PageRecord(s.page_id, c, segmetrics.iou(pred == c, s.mask == c)))
    return records


def run_cell(train_samples, test_sets: dict, modality, n_classes: int, config: TrainConfig,
             threshold=0.5, min_area_ratio=0.05):
    model, log = train(train_samples, modality, n_classes, config)
    class_ids = list(range(1, n_classes + 1))
    results = {name: evaluate_model(model, samples, modality, class_ids, threshold, min_area_ratio)
               for name, samples in test_sets.items()}
    return model, log, results


def run_seed(seed: int, run: int) -> int:
    return seed * 1000 + run


@dataclass
class ExperimentResult:
    reports: dict[str, str]  # test set -> report text
    comparisons: dict[str, dict]
    counts: dict[str, int]
    out_dir: Optional[Path] = None


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    started = time.time()
    data = load_dataset(config.corpus)
    train_pages, test_sets = split_pages(data.pages, data.tags, config.split, config.seed)
    if not train_pages or not all(test_sets.values()):
        raise DataError("split produced an empty train or test set")
    n_classes = len(data.class_names)
    pca = fit_corpus_pca(train_pages, data.store, config.embed_k)
    test_samples = {k: to_samples(v, data.store, pca) for k, v in test_sets.items()}
    base_train = TrainConfig.from_dict(config.train)

    fractions = config.split.get("train_fractions", [1.0]) if config.split.get("policy") == "fraction-of-train" else [1.0]
    out = Path(config.out_dir) if config.out_dir else None
    records: dict[str, dict[str, list[list[PageRecord]]]] = {k: {} for k in test_sets}
    counts = {"train": len(train_pages), **{f"test:{k}": len(v) for k, v in test_sets.items()}}
    for frac in fractions:
        subset = train_subset(train_pages, frac, config.seed)
        counts[f"train@{frac:g}"] = len(subset)
        samples = to_samples(subset, data.store, pca)
        for mod in config.modalities:
            row = Modality.parse(mod).label + ("" if len(fractions) == 1 else f" ({frac:.0%})")
            for run in range(config.runs):
                tcfg = TrainConfig.from_dict({**base_train.to_dict(), "seed": run_seed(config.seed, run)})
                model, log, res = run_cell(samples, test_samples, mod, n_classes, tcfg,
                                           config.threshold, config.min_area_ratio)
                logger.info("%s run %d: best dev loss %.4f at step %d", row, run, log.best_dev_loss, log.best_step)
                for name, recs in res.items():
                    records[name].setdefault(row, []).append(recs)
                if out is not None:
                    tag = _tag(row)
                    rdir = out / "runs" / tag
                    rdir.mkdir(parents=True, exist_ok=True)
                    log.write(rdir / f"run{run}.log")
                    for name, recs in res.items():
                        (out / "records" / name / tag).mkdir(parents=True, exist_ok=True)
                        segmetrics.write_records(out / "records" / name / tag / f"run{run}.txt", recs)

    trange = ThresholdRange.parse(config.threshold_range)
    names = {i + 1: n for i, n in enumerate(data.class_names)}
    baseline = Modality.IMAGE.label if Modality.IMAGE.value in config.modalities and len(fractions) == 1 else None
    reports, comparisons = {}, {}
    for name, by_row in records.items():
        if out is not None:
            # recompute from the persisted files, never from memory
            by_row = {
                row: [segmetrics.read_records(out / "records" / name / _tag(row) / f"run{r}.txt") for r in range(len(recs))]
                for row, recs in by_row.items()
            }
        summaries = {row: [segmetrics.summarize(recs, names, trange) for recs in runs] for row, runs in by_row.items()}
        comp = segmetrics.compare_runs(summaries, baseline)
        comparisons[name] = comp
        reports[name] = segmetrics.format_report(comp, trange, baseline)
        if out is not None:
            segmetrics.write_report(out / f"report_{name}.txt", comp, trange, baseline)
    if out is not None:
        with open(out / "counts.json", "w", encoding="utf-8") as f:
            json.dump(counts, f, indent=1, sort_keys=True)
            f.write("\n")
        with open(out / "meta.json", "w", encoding="utf-8") as f:
            json.dump({"started": started, "finished": time.time()}, f)
    return ExperimentResult(reports, comparisons, counts, out)


def _tag(row: str) -> str:
    return row.replace(" ", "_").replace("(", "").replace(")", "").replace("%", "pct").replace("+", "-")
