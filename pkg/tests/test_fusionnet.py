import numpy as np
import pytest

from textmapseg.embedmap import build_map_from_vectors, fit_pca, project_map, project_vectors
from textmapseg.errors import DataError, FormatError, NumericError
from textmapseg.fusionnet import (
    Modality,
    PixelModel,
    Sample,
    TrainConfig,
    augment,
    augment_with,
    budget_shape,
    load_model,
    loss_and_grads,
    make_fused_input,
    predict,
    reduce_map_channels,
    resize_sample,
    resize_to_budget,
    sample_input,
    save_model,
    scale_boxes,
    split_dev,
    train,
)
from textmapseg.fusionnet.transforms import sample_transform
from textmapseg.postproc import postprocess
from textmapseg.segmetrics import iou


def toy_sample(rng, h=24, w=24, n=3):
    boxes = np.array([[2, 2, 10, 6], [12, 4, 20, 9], [4, 14, 18, 20]])
    mask = np.zeros((h, w), np.uint8)
    mask[2:10, 2:12] = 1
    return Sample(rng.random((h, w, 1)).astype(np.float32), boxes, rng.standard_normal((3, n)).astype(np.float32),
                  mask, "toy")


# ---------------------------------------------------------------------------
# geometry

def test_resize_large_square():
    img = np.zeros((1000, 1000, 1), np.float32)
    r = resize_to_budget(img)
    assert r.image.shape[:2] == (707, 707)
    assert r.scale == pytest.approx(0.70710678, abs=1e-8)
    assert 707 * 707 == 499_849


def test_small_image_is_unchanged():
    img = np.random.default_rng(0).random((100, 100, 3)).astype(np.float32)
    r = resize_to_budget(img)
    assert r.scale == 1.0 and r.image is img


def test_box_rounding_rule():
    # floor on minima, ceil on maxima: 195 * 0.5 = 97.5 -> 97
    assert scale_boxes([(10, 195, 40, 300)], 0.5, 200, 300).tolist() == [[5, 97, 20, 150]]


def test_resize_rebuilds_map_from_boxes(rng):
    img = rng.random((800, 900, 1)).astype(np.float32)
    vecs = rng.standard_normal((2, 4)).astype(np.float32)
    r = resize_to_budget(img, budget=10_000, boxes=[(0, 0, 100, 100), (450, 300, 900, 800)], vectors=vecs)
    assert r.image.shape[:2] == r.text_map.owner.shape == budget_shape(800, 900, 10_000)
    assert set(np.unique(r.text_map.owner)) == {-1, 0, 1}
    assert set(map(tuple, r.text_map.data.reshape(-1, 4))) <= {tuple(v) for v in vecs} | {(0.0,) * 4}


def test_resize_sample_keeps_labels_nearest(rng):
    s = toy_sample(rng, 60, 80)
    r = resize_sample(s, budget=1200)
    assert r.image.shape[:2] == r.mask.shape == budget_shape(60, 80, 1200)
    assert set(np.unique(r.mask)) <= {0, 1}


def test_transform_ranges(rng):
    for _ in range(200):
        s, r = sample_transform(rng)
        assert 0.8 <= s <= 1.2 and -0.01 <= r <= 0.01


def test_augment_is_deterministic(rng):
    s = toy_sample(rng)
    a = augment(s, np.random.default_rng(7))
    b = augment(s, np.random.default_rng(7))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes() and np.array_equal(a.boxes, b.boxes)


def test_identity_transform_keeps_label_counts(rng):
    s = toy_sample(rng)
    out = augment_with(s, 1.0, 0.0)
    assert np.array_equal(np.bincount(out.mask.ravel()), np.bincount(s.mask.ravel()))


def test_augment_moves_image_labels_and_boxes_together():
    img = np.zeros((40, 40, 1), np.float32)
    img[10:20, 10:20] = 1.0
    mask = (img[..., 0] > 0).astype(np.uint8)
    s = Sample(img, np.array([[10, 10, 20, 20]]), np.ones((1, 2), np.float32), mask)
    out = augment_with(s, 1.2, 0.0)
    x0, y0, x1, y1 = out.boxes[0]
    assert (x0, y0, x1, y1) == (8, 8, 20, 20)  # (v - 20) * 1.2 + 20
    assert out.mask[9:19, 9:19].all() and out.image[9:19, 9:19].min() > 0.5
    assert not out.mask[:7].any()


# ---------------------------------------------------------------------------
# fusion

def test_fused_channel_counts(rng):
    img = rng.random((5, 6, 3)).astype(np.float32)
    tmap = rng.standard_normal((5, 6, 8)).astype(np.float32)
    assert make_fused_input(img, tmap, Modality.IMAGE_TEXT).shape == (5, 6, 11)
    assert make_fused_input(img, tmap, Modality.IMAGE).shape == (5, 6, 3)
    text = make_fused_input(img, tmap, "text")
    assert not text[..., :3].any() and np.array_equal(text[..., 3:], tmap)
    with pytest.raises(DataError):
        make_fused_input(img, tmap[:4], "image+text")


def test_modality_parsing():
    assert Modality.parse("IMAGE_TEXT") is Modality.IMAGE_TEXT
    assert Modality.parse("image-text").label == "Image+Text"
    with pytest.raises(DataError):
        Modality.parse("audio")


def test_reduce_channels(rng):
    vecs = rng.standard_normal((6, 5))
    tem = build_map_from_vectors([(0, 0, 2, 2), (2, 0, 4, 2), (0, 2, 2, 4), (2, 2, 4, 4), (4, 0, 5, 1), (4, 1, 5, 2)],
                                 vecs, 5, 5)
    full = reduce_map_channels(tem, fit_pca(vecs, 5), 5).reshape(-1, 5).astype(np.float64)
    orig = tem.data.reshape(-1, 5).astype(np.float64)
    d0 = np.linalg.norm(orig[:, None] - orig[None], axis=2)
    d1 = np.linalg.norm(full[:, None] - full[None], axis=2)
    assert np.allclose(d0, d1, atol=1e-5)
    pca3 = fit_pca(vecs, 3)
    r3 = reduce_map_channels(tem, pca3, 3)
    assert np.allclose(r3[0, 0], project_vectors(vecs[0].astype(np.float32).astype(np.float64), pca3), atol=1e-6)
    assert not r3[4, 4].any() and tem.owner[4, 4] == -1
    assert project_map(tem, pca3).shape == (5, 5, 3)


# ---------------------------------------------------------------------------
# model

def test_zero_parameters_give_one_half():
    m = PixelModel.zeros(3, (4, 2))
    p = predict(m, np.random.default_rng(0).random((5, 5, 3)))
    assert p.shape == (5, 5, 2) and np.all(p == 0.5)


def _numeric_grad_check(model, x, masks, wd, h=1e-5):
    loss, grads = loss_and_grads(model, x, masks, wd)
    worst = 0.0
    for p, g in zip(model.params, grads):
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_and_grads(model, x, masks, wd)
            flat[i] = old - h
            lm, _ = loss_and_grads(model, x, masks, wd)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            a = g.reshape(-1)[i]
            denom = max(abs(a), abs(fd))
            if denom > 1e-10:
                worst = max(worst, abs(a - fd) / denom)
    return worst


@pytest.mark.parametrize("dilations", [(), (1, 2, 1)])
def test_gradient_check(dilations):
    rng = np.random.default_rng(3)
    widths = (3, 3, 2) if dilations else (3, 2)
    model = PixelModel.initialize(5, widths, rng, dtype=np.float64, dilations=dilations)
    for b in model.biases:
        b += rng.normal(0, 0.1, b.shape)
    x = rng.standard_normal((2, 6, 6, 5))
    masks = rng.integers(0, 3, (2, 6, 6))
    assert _numeric_grad_check(model, x, masks, 1e-2) < 1e-4


def separable_set(n=40, seed=0):
    """Two classes told apart by a single pixel channel each; 16x16 quadrants."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = np.zeros((32, 32), np.uint8)
        for qy in (0, 16):
            for qx in (0, 16):
                mask[qy:qy + 16, qx:qx + 16] = rng.integers(0, 3)
        img = np.stack([(mask == 1), (mask == 2)], axis=2).astype(np.float32)
        img += 0.05 * rng.standard_normal(img.shape).astype(np.float32)
        out.append(Sample(img, np.zeros((0, 4), np.int64), np.zeros((0, 2), np.float32), mask, f"s{i}"))
    return out


def quick_config(**kw):
    base = dict(steps=500, learning_rate=1e-2, augment=False, eval_every=50, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_separable_convergence_and_iou():
    data = separable_set()
    model, log = train(data, "image", 2, quick_config())
    assert log.best_dev_loss < 0.1
    for s in separable_set(5, seed=99):
        pred = postprocess(predict(model, sample_input(s, Modality.IMAGE)))
        for c in (1, 2):
            r = iou(pred == c, s.mask == c)
            if r.defined:
                assert r.value >= 0.95


def test_loss_trend_over_200_step_windows():
    _, log = train(separable_set(), "image", 2, quick_config(steps=600, eval_every=600))
    # per-step minibatch noise dominates once the loss is near zero; judge the 20-step running mean
    losses = np.convolve(log.losses, np.ones(20) / 20, mode="valid")
    worse = losses[200:] >= losses[:-200]
    assert worse.mean() <= 0.05


def test_training_is_deterministic_and_prefetch_neutral():
    data = separable_set(12)
    cfg = quick_config(steps=30, augment=True, eval_every=10)
    m1, l1 = train(data, "image", 2, cfg)
    m2, l2 = train(data, "image", 2, cfg)
    m3, l3 = train(data, "image", 2, TrainConfig.from_dict({**cfg.to_dict(), "prefetch": True}))
    for a, b, c in zip(m1.params, m2.params, m3.params):
        assert a.tobytes() == b.tobytes() == c.tobytes()
    assert l1.lines() == l2.lines() == l3.lines()


def test_best_dev_snapshot_is_returned():
    data = separable_set(12)
    model, log = train(data, "image", 2, quick_config(steps=40, eval_every=10))
    assert log.best_dev_loss == min(log.dev.values())
    assert model.meta["best_step"] == log.best_step and model.meta["reference_steps"] == 17_000


def test_modality_independence(rng):
    s = toy_sample(rng)
    other = Sample(s.image, s.boxes, s.vectors * 7 + 1, s.mask)
    img_model = PixelModel.initialize(1, (4, 1), rng)
    assert np.array_equal(predict(img_model, sample_input(s, Modality.IMAGE)),
                          predict(img_model, sample_input(other, Modality.IMAGE)))
    txt_model = PixelModel.initialize(4, (4, 1), rng)
    changed = Sample(rng.random(s.image.shape).astype(np.float32), s.boxes, s.vectors, s.mask)
    assert np.array_equal(predict(txt_model, sample_input(s, Modality.TEXT)),
                          predict(txt_model, sample_input(changed, Modality.TEXT)))


def test_training_errors():
    data = separable_set(3)
    with pytest.raises(DataError, match="empty"):
        train(data, "image", 2, quick_config(steps=2))
    with pytest.raises(DataError):
        split_dev(10, 1.0, 0)
    bad = separable_set(12)
    bad[4].image[0, 0, 0] = np.nan
    bad[5].image[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train(bad, "image", 2, quick_config(steps=50, dev_fraction=0.5))
    with pytest.raises(DataError):
        TrainConfig.from_dict({"stepz": 3})


def test_dev_split_is_ten_percent_and_seeded():
    tr, dev = split_dev(50, 0.1, 3)
    assert len(dev) == 5 and len(tr) == 45 and not set(tr) & set(dev)
    assert np.array_equal(dev, split_dev(50, 0.1, 3)[1])


def test_model_file_round_trip(tmp_path, rng):
    m = PixelModel.initialize(3, (4, 2), rng, dilations=(2, 1), modality="image+text")
    save_model(tmp_path / "m.pxm", m)
    again = load_model(tmp_path / "m.pxm")
    assert again.dilations == (2, 1) and again.meta["modality"] == "image+text"
    for a, b in zip(m.params, again.params):
        assert np.array_equal(a, b)
    raw = (tmp_path / "m.pxm").read_bytes()
    assert raw[:4] == b"PXM1"
    (tmp_path / "t.pxm").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_model(tmp_path / "t.pxm")


def test_train_log_format(tmp_path):
    _, log = train(separable_set(12), "image", 2, quick_config(steps=20, eval_every=10))
    log.write(tmp_path / "run.log")
    lines = (tmp_path / "run.log").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 21
    assert len(lines[10].split()) == 3 and len(lines[1].split()) == 2
