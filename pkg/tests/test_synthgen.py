import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textmapseg.errors import DataError
from textmapseg.synthgen import (
    ClassSpec,
    ClusterSpec,
    CorpusSpec,
    apply_drift,
    cluster_words,
    default_spec,
    embedding_store,
    generate_corpus,
    generate_page,
    load_corpus,
    load_spec,
    read_masks,
    save_spec,
    write_corpus,
)


def pair_spec(**kw):
    base = dict(
        classes=[ClassSpec("death_notice", "framed box", "obituary", 0.3),
                 ClassSpec("advert", "framed box", "shopping", 0.3)],
        clusters=[ClusterSpec("filler"), ClusterSpec("obituary"), ClusterSpec("shopping")],
        height=40, width=40, seed=3,
    )
    base.update(kw)
    return CorpusSpec(**base)


def test_zero_classes_gives_blank_pages_with_filler():
    pages = generate_corpus(CorpusSpec(), 20)
    for p in pages:
        assert not p.regions and not p.page.label_mask.any()
        assert p.page.tokens


def test_class_frequency_binomial_bound():
    spec = CorpusSpec(classes=[ClassSpec("a", "framed box", "filler", 0.1)], seed=11)
    pages = generate_corpus(spec, 1000)
    shown = sum(any(r.class_name == "a" for r in p.regions) for p in pages)
    assert 70 <= shown <= 130


def test_blank_fraction_is_respected():
    spec = pair_spec(blank_fraction=0.3)
    pages = generate_corpus(spec, 400)
    blank = sum(not p.regions for p in pages)
    # blank pages plus non-blank pages that drew no class
    expected = 400 * (0.3 + 0.7 * (1 - 0.3 / 0.7) ** 2)
    assert abs(blank - expected) < 4 * np.sqrt(400 * 0.5 * 0.5)


def test_spec_validation():
    with pytest.raises(DataError):
        CorpusSpec(classes=[ClassSpec("a", "framed box", "filler", 0.6), ClassSpec("b", "framed box", "filler", 0.6)])
    with pytest.raises(DataError, match="unknown cluster"):
        CorpusSpec(classes=[ClassSpec("a", "framed box", "nowhere", 0.1)])
    with pytest.raises(DataError, match="archetype"):
        CorpusSpec(classes=[ClassSpec("a", "hexagon", "filler", 0.1)])


def test_placement_overflow_suggests_lower_frequency():
    spec = CorpusSpec(
        classes=[ClassSpec("a", "framed box", "filler", 0.5), ClassSpec("b", "framed box", "filler", 0.5)],
        region_size=(0.9, 0.95), blank_fraction=0.0,
    )
    with pytest.raises(DataError, match="lower class frequencies"):
        generate_corpus(spec, 5)


def test_corpus_is_byte_identical(tmp_path):
    spec = default_spec(seed=4)
    for d in ("a", "b"):
        write_corpus(tmp_path / d, generate_corpus(spec, 6), spec)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    for sub in ("images", "masks"):
        assert not filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub).diff_files


def test_page_depends_only_on_its_index():
    spec = default_spec()
    a = generate_corpus(spec, 5, start=3)[2]
    b = generate_page(spec, 5)
    assert a.page.id == b.page.id and np.array_equal(a.page.image, b.page.image)


def test_vocabularies_are_disjoint():
    words = cluster_words(default_spec())
    seen = set()
    for ws in words.values():
        assert not seen & set(ws)
        seen |= set(ws)


def test_cluster_embeddings_are_separated():
    spec = pair_spec()
    store = embedding_store(spec)
    words = cluster_words(spec)
    a = np.array([store.lookup(w) for w in words["obituary"]])
    b = np.array([store.lookup(w) for w in words["shopping"]])
    intra = np.linalg.norm(a[:, None] - a[None], axis=2).mean()
    inter = np.linalg.norm(a[:, None] - b[None], axis=2).mean()
    assert inter > 2 * intra


def test_tokens_lie_inside_their_region_masks():
    spec = default_spec(seed=2)
    words = cluster_words(spec)
    cluster_of = {c.name: c.cluster for c in spec.classes}
    for p in generate_corpus(spec, 40):
        mask = p.page.label_mask
        for r in p.regions:
            vocab = set(words[cluster_of[r.class_name]])
            for t in p.page.tokens:
                if t.text in vocab:
                    x0, y0, x1, y1 = t.box
                    assert (mask[y0:y1, x0:x1] == r.class_id).all()
        filler = set(words[spec.filler_cluster])
        for t in p.page.tokens:
            if t.text in filler:
                x0, y0, x1, y1 = t.box
                assert not mask[y0:y1, x0:x1].any()


def test_mask_matches_regions():
    for p in generate_corpus(default_spec(seed=1), 30):
        expected = np.zeros_like(p.page.label_mask)
        for r in p.regions:
            x0, y0, x1, y1 = r.coords
            expected[y0:y1, x0:x1] = r.class_id
        assert np.array_equal(expected, p.page.label_mask)


def test_confusable_pair_shares_frame_statistics():
    spec = pair_spec(noise=0.0)
    stats = {}
    for p in generate_corpus(spec, 60):
        img = p.page.image[..., 0]
        covered = np.zeros(img.shape, bool)
        for t in p.page.tokens:
            x0, y0, x1, y1 = t.box
            covered[y0:y1, x0:x1] = True
        for r in p.regions:
            x0, y0, x1, y1 = r.coords
            frame = np.concatenate([img[y0, x0:x1], img[y1 - 1, x0:x1], img[y0:y1, x0], img[y0:y1, x1 - 1]])
            inner = img[y0 + 1:y1 - 1, x0 + 1:x1 - 1][~covered[y0 + 1:y1 - 1, x0 + 1:x1 - 1]]
            stats.setdefault(r.class_name, set()).update({("frame", float(v)) for v in frame})
            stats[r.class_name].update({("fill", float(v)) for v in inner})
    assert stats["death_notice"] == stats["advert"]


def test_empty_drift_is_identity():
    spec = default_spec()
    assert apply_drift(spec, "1") is spec
    spec.drift = {"2": {}}
    assert apply_drift(spec, "2") is spec


def test_drift_to_plain_column_removes_strips():
    spec = default_spec(seed=5)
    spec.drift = {"2": {"classes": {"serial": {"archetype": "plain column"}}}}
    drifted = apply_drift(spec, "2")
    assert {c.name: c.archetype for c in drifted.classes}["serial"] == "plain column"
    assert [c.cluster for c in drifted.classes] == [c.cluster for c in spec.classes]
    h = spec.height
    for p in generate_corpus(spec, 60, period="2"):
        for r in p.regions:
            if r.class_name == "serial":
                assert r.coords[3] < h or r.coords[2] - r.coords[0] < spec.width
    # period 1 still has full-width bottom strips
    strips = [r for p in generate_corpus(spec, 60, period="1") for r in p.regions if r.class_name == "serial"]
    assert strips and all(r.coords[2] - r.coords[0] == spec.width and r.coords[3] == h for r in strips)


def test_drift_rejects_unknown_names():
    spec = default_spec()
    spec.drift = {"2": {"classes": {"ghost": {"archetype": "plain column"}}}}
    with pytest.raises(DataError):
        apply_drift(spec, "2")


def test_write_and_load_round_trip(tmp_path):
    spec = default_spec(seed=7)
    pages = generate_corpus(spec, 8)
    write_corpus(tmp_path, pages, spec)
    corpus = load_corpus(tmp_path)
    assert corpus.class_names == spec.class_names
    masks = read_masks(tmp_path / "masks")
    for orig, back in zip(pages, corpus.pages):
        assert orig.page.id == back.id
        assert [t.text for t in orig.page.tokens] == [t.text for t in back.tokens]
        assert np.array_equal(orig.page.label_mask, back.label_mask)
        assert np.array_equal(masks[back.id], orig.page.label_mask)
        assert np.abs(back.image - orig.page.image).max() <= 1 / 255 + 1e-6
    assert load_spec(tmp_path / "spec.json").digest() == spec.digest()


def test_spec_file_round_trip(tmp_path):
    spec = pair_spec(drift={"2": {"classes": {"advert": {"layout": {"frame": 2}}}}})
    save_spec(tmp_path / "s.json", spec)
    assert load_spec(tmp_path / "s.json") == spec


@settings(max_examples=15)
@given(st.integers(0, 2**16), st.floats(0.0, 0.5))
def test_ocr_noise_only_touches_token_text(seed, p):
    clean = generate_page(pair_spec(seed=seed), 0)
    noisy = generate_page(pair_spec(seed=seed, ocr_noise=p), 0)
    assert [t.box for t in clean.page.tokens] == [t.box for t in noisy.page.tokens]
    assert np.array_equal(clean.page.label_mask, noisy.page.label_mask)
