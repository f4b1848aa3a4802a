"""Command-line entry point: ``textmapseg <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, embedmap, segmetrics, synthgen
from .embeddings import OOV_POLICIES, load_vectors, stack
from .errors import DataError, NumericError
from .experiment import (
    ExperimentConfig,
    _tag,
    evaluate_model,
    fit_corpus_pca,
    run_experiment,
    run_seed,
    split_pages,
    to_samples,
)
from .fusionnet import Modality, TrainConfig, load_model, predict, sample_input, save_model, train
from .ocr import (
    class_map,
    parse_annotations,
    parse_token_file,
    rasterize_labels,
    write_annotations,
    write_mask_png,
    write_token_file,
)
from .postproc import postprocess, save_probability_map

logger = logging.getLogger("textmapseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _class_names(arg: str) -> list[str]:
    """``4`` -> class1..class4; ``a,b`` -> names; a corpus.json path -> its class list."""
    if arg.isdigit():
        return [f"class{i}" for i in range(1, int(arg) + 1)]
    p = Path(arg)
    if p.is_file():
        with open(p, encoding="utf-8") as f:
            return list(json.load(f)["classes"])
    return [n for n in arg.split(",") if n]


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_corpus(directory) -> synthgen.Corpus:
    _need(Path(directory) / "corpus.json", "corpus description")
    return synthgen.load_corpus(directory)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    spec = synthgen.load_spec(_need(args.spec, "corpus spec")) if args.spec else synthgen.default_spec()
    if args.seed is not None:
        spec = synthgen.CorpusSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    pages = []
    for period in args.period:
        pages += synthgen.generate_corpus(spec, args.pages, period, args.start)
    synthgen.write_corpus(args.out, pages, spec)
    print(f"wrote {len(pages)} pages to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    names = _class_names(args.classes)
    token_pages = parse_token_file(_need(args.tokens, "token file"))
    annotated = parse_annotations(_need(args.annotations, "annotation file"), class_map(names))
    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    known = {tp.page_id: tp for tp in token_pages}
    for a in annotated:
        if a.page_id not in known:
            raise DataError(f"annotations reference page {a.page_id!r} which has no tokens")
        tp = known[a.page_id]
        write_mask_png(out / "masks" / f"{a.page_id}.png", rasterize_labels(a.regions, tp.height, tp.width))
    write_token_file(out / "tokens.txt", token_pages)
    write_annotations(out / "annotations.json", annotated)
    if args.images:
        (out / "images").mkdir(exist_ok=True)
        for tp in token_pages:
            src = Path(args.images) / f"{tp.page_id}.png"
            if src.exists():
                shutil.copyfile(src, out / "images" / src.name)
            else:
                logger.warning("no image for page %s", tp.page_id)
    if args.vectors:
        shutil.copyfile(_need(args.vectors, "vector file"), out / "vectors.vec")
    tags = {tp.page_id: {"period": args.period, "source": args.source} for tp in token_pages}
    _write_json(out / "corpus.json", {"classes": names, "pages": tags})
    dropped = sum(tp.dropped for tp in token_pages)
    print(f"ingested {len(token_pages)} pages ({len(annotated)} annotated, {dropped} tokens dropped)")
    return EXIT_OK


def cmd_build_maps(args) -> int:
    corpus = _load_corpus(args.corpus)
    paths = args.vectors or [Path(args.corpus) / "vectors.vec"]
    stores = [load_vectors(_need(p, "vector file"), args.oov) for p in paths]
    store = stores[0] if len(stores) == 1 else stack(stores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps = []
    for page in corpus.pages:
        tem = embedmap.build_map(page, store, dense=not args.sparse)
        embedmap.serialize_map(tem, out / f"{page.id}.tem")
        maps.append(tem)
    if args.pca_out:
        pca = embedmap.fit_pca(maps, k=args.pca_k)
        embedmap.save_pca(args.pca_out, pca)
    print(f"wrote {len(maps)} maps (N={store.dim}) to {out}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    tem = embedmap.deserialize_map(_need(args.map, "map file"))
    pca = embedmap.load_pca(_need(args.pca, "PCA file"))
    if pca.mean.shape[0] != tem.token_vectors.shape[1]:
        raise DataError(f"PCA expects N={pca.mean.shape[0]} but the map has N={tem.token_vectors.shape[1]}")
    embedmap.save_visualization(args.out, tem, pca)
    print(f"wrote {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = {}
    if args.config:
        with open(_need(args.config, "training config"), encoding="utf-8") as f:
            cfg = json.load(f)
    for key in ("steps", "learning_rate"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    if corpus.store is None:
        raise DataError("corpus has no vectors.vec")
    modality = Modality.parse(args.modality)
    seed = 0 if args.seed is None else args.seed
    train_pages, tests = split_pages(corpus.pages, corpus.tags, {"policy": "random", "test_fraction": args.test_fraction}, seed)
    pca = fit_corpus_pca(train_pages, corpus.store, args.embed_k)
    samples = to_samples(train_pages, corpus.store, pca)
    test_samples = to_samples(tests["test"], corpus.store, pca)
    base = _train_config(args)
    out = Path(args.out)
    tag = _tag(modality.label)
    for d in ("models", "runs", "records"):
        (out / d / tag).mkdir(parents=True, exist_ok=True)
    if pca is not None:
        embedmap.save_pca(out / "pca.pca", pca)
    _write_json(out / "split.json", {"train": [p.id for p in train_pages], "test": [p.id for p in tests["test"]],
                                     "classes": corpus.class_names})
    n_classes = len(corpus.class_names)
    for run in range(args.runs):
        cfg = TrainConfig.from_dict({**base.to_dict(), "seed": run_seed(seed, run)})
        model, log = train(samples, modality, n_classes, cfg)
        save_model(out / "models" / tag / f"run{run}.pxm", model)
        log.write(out / "runs" / tag / f"run{run}.log")
        recs = evaluate_model(model, test_samples, modality, range(1, n_classes + 1), args.threshold, args.min_area)
        segmetrics.write_records(out / "records" / tag / f"run{run}.txt", recs)
        print(f"{modality.label} run {run}: best dev loss {log.best_dev_loss:.4f} at step {log.best_step}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(_need(args.model, "model file"))
    corpus = _load_corpus(args.corpus)
    if corpus.store is None:
        raise DataError("corpus has no vectors.vec")
    pca = embedmap.load_pca(_need(args.pca, "PCA file")) if args.pca else None
    modality = Modality.parse(model.meta.get("modality", "image+text"))
    samples = to_samples(corpus.pages, corpus.store, pca)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        x = sample_input(s, modality)
        if x.shape[-1] != model.in_channels:
            raise DataError(f"model expects {model.in_channels} input channels, page {s.page_id} gives {x.shape[-1]}"
                            " (check --pca)")
        prob = predict(model, x)
        write_mask_png(out / f"{s.page_id}.png", postprocess(prob, args.threshold, args.min_area))
        if args.save_probs:
            save_probability_map(out / f"{s.page_id}.prb", prob)
    print(f"wrote {len(samples)} predicted masks to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    names = _class_names(args.classes)
    trange = segmetrics.ThresholdRange.parse(args.range)
    gt = synthgen.read_masks(_need(args.gt, "ground-truth directory"))
    pred = synthgen.read_masks(_need(args.pred, "prediction directory"))
    if not gt:
        raise DataError(f"no ground-truth masks in {args.gt}")
    for pid, m in gt.items():
        if pid in pred and pred[pid].shape != m.shape:
            raise DataError(f"page {pid}: prediction {pred[pid].shape} and ground truth {m.shape} differ in size")
    records = segmetrics.evaluate_masks(pred, gt, range(1, len(names) + 1))
    summary = segmetrics.summarize(records, dict(enumerate(names, start=1)), trange)
    comp = segmetrics.compare_runs({args.name: [summary]}, None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    segmetrics.write_records(out.with_suffix(".records.txt"), records)
    segmetrics.write_report(out, comp, trange)
    print(segmetrics.format_report(comp, trange))
    return EXIT_OK


def cmd_report(args) -> int:
    root = _need(args.records, "records directory")
    names = _class_names(args.classes)
    trange = segmetrics.ThresholdRange.parse(args.range)
    labels = {_tag(m.label): m.label for m in Modality}
    order = list(labels)
    runs = {}
    dirs = sorted((p for p in root.iterdir() if p.is_dir()),
                  key=lambda p: (order.index(p.name) if p.name in order else len(order), p.name))
    for d in dirs:
        files = sorted(d.glob("run*.txt"), key=lambda p: int(p.stem[3:]))
        if files:
            runs[labels.get(d.name, d.name)] = [
                segmetrics.summarize(segmetrics.read_records(f), dict(enumerate(names, start=1)), trange) for f in files
            ]
    if not runs:
        raise DataError(f"no run records under {root}")
    baseline = args.baseline if args.baseline in runs else None
    comp = segmetrics.compare_runs(runs, baseline)
    segmetrics.write_report(args.out, comp, trange, baseline)
    print(segmetrics.format_report(comp, trange, baseline))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = json.loads(_need(args.config, "experiment config").read_text(encoding="utf-8"))
    if args.out:
        cfg["out_dir"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.runs is not None:
        cfg["runs"] = args.runs
    result = run_experiment(ExperimentConfig.from_dict(cfg))
    for name, text in result.reports.items():
        print(f"== {name} ==")
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="textmapseg", description="Text embedding maps for newspaper page segmentation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--spec", help="corpus spec JSON (default: built-in spec)")
    s.add_argument("--pages", type=int, default=100)
    s.add_argument("--period", action="append", help="period tag (repeatable)")
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="parse OCR tokens and annotations into a corpus directory")
    s.add_argument("--tokens", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--classes", required=True, help="count, comma list or corpus.json")
    s.add_argument("--images", help="directory of <page_id>.png scans")
    s.add_argument("--vectors", help="word vector file to copy alongside")
    s.add_argument("--period", default="0")
    s.add_argument("--source", default="ingested")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build-maps", help="write a text embedding map per page")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vectors", action="append", help="vector file (repeat to stack)")
    s.add_argument("--oov", choices=OOV_POLICIES, default="zero")
    s.add_argument("--sparse", action="store_true", help="do not materialize dense maps")
    s.add_argument("--pca-out", help="fit a PCA over the maps and save it here")
    s.add_argument("--pca-k", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_maps)

    s = sub.add_parser("visualize", help="false-color PNG of a map")
    s.add_argument("--map", required=True)
    s.add_argument("--pca", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("train", help="train and evaluate one modality over several runs")
    s.add_argument("--corpus", required=True)
    s.add_argument("--modality", default="image+text")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--config", help="training options JSON")
    s.add_argument("--steps", type=int)
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--embed-k", type=int, default=8)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--min-area", type=float, default=0.05)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict label masks with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--pca")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--min-area", type=float, default=0.05)
    s.add_argument("--save-probs", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--classes", required=True, help="count, comma list or corpus.json")
    s.add_argument("--range", default="50:5:95")
    s.add_argument("--name", default="model")
    s.add_argument("--out", default="report.txt")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="mean/std table with Welch tests from per-run records")
    s.add_argument("--records", required=True, help="directory with one sub-directory per modality")
    s.add_argument("--classes", required=True)
    s.add_argument("--range", default="50:5:95")
    s.add_argument("--baseline", default="Image")
    s.add_argument("--out", default="report.txt")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("experiment", help="run a full experiment from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--runs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "period", None) is None and args.command == "synth":
            args.period = ["0"]
        return args.func(args)
    except UsageError as e:
        print(f"textmapseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"textmapseg: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as e:
        print(f"textmapseg: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
