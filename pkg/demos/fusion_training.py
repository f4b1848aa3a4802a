"""Train the pixel classifier on image channels alone and on image plus text map, then compare.

Two classes share the framed-box look and differ only in vocabulary, so the
image-only model cannot tell them apart. Takes about a minute.

Run: python3 demos/fusion_training.py [steps]
"""
import sys

from textmapseg import segmetrics, synthgen
from textmapseg.experiment import evaluate_model, fit_corpus_pca, to_samples
from textmapseg.fusionnet import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600

spec = synthgen.CorpusSpec(
    classes=[
        synthgen.ClassSpec("death_notice", "framed box", "obituary", 0.3),
        synthgen.ClassSpec("advert", "framed box", "shopping", 0.3),
    ],
    clusters=[synthgen.ClusterSpec(n) for n in ("filler", "obituary", "shopping")],
    seed=5,
)
pages = [p.page for p in synthgen.generate_corpus(spec, 150)]
store = synthgen.embedding_store(spec)
train_pages, test_pages = pages[:120], pages[120:]

# 16-d word vectors reduced to 8 map channels with a PCA fitted on training tokens
pca = fit_corpus_pca(train_pages, store, k=8)
train_set, test_set = to_samples(train_pages, store, pca), to_samples(test_pages, store, pca)

config = TrainConfig(steps=steps, learning_rate=3e-3, hidden=(16, 16, 16, 16), dilations=(1, 2, 4, 8, 1), seed=1)
names = {1: "death_notice", 2: "advert"}
for modality in ("image", "image+text"):
    model, log = train(train_set, modality, 2, config)
    records = evaluate_model(model, test_set, modality, [1, 2])
    summary = segmetrics.summarize(records, names)
    scores = ", ".join(f"{row} {100 * cols['mIoU']:.1f}" for row, cols in summary.items() if cols["mIoU"] is not None)
    print(f"{modality:>10}: best dev loss {log.best_dev_loss:.4f} at step {log.best_step}; mIoU {scores}")
