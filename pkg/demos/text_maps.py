"""Turn OCR tokens into a pixel-aligned text embedding map and a false-color preview.

Run: python3 demos/text_maps.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from textmapseg import embedmap, synthgen

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/maps")
out.mkdir(parents=True, exist_ok=True)

# a small synthetic corpus on disk: token file, annotations, PNG scans, word vectors
spec = synthgen.default_spec(seed=1)
synthgen.write_corpus(out / "corpus", synthgen.generate_corpus(spec, 4), spec)

# read it back the way a real OCR corpus would be read
corpus = synthgen.load_corpus(out / "corpus")
maps = []
for page in corpus.pages:
    tem = embedmap.build_map(page, corpus.store)
    embedmap.serialize_map(tem, out / f"{page.id}.tem")
    maps.append(tem)
    covered = np.count_nonzero(tem.owner >= 0)
    print(f"{page.id}: {len(page.tokens)} tokens cover {covered}/{page.height * page.width} pixels")

pca = embedmap.fit_pca(maps, k=3)
for page, tem in zip(corpus.pages, maps):
    embedmap.save_visualization(out / f"{page.id}.png", tem, pca)
print(f"false-color previews in {out}; tokens from the same vocabulary share a hue")
