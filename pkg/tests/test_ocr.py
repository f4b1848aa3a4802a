import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from textmapseg.errors import DataError, ParseError
from textmapseg.ocr import (
    Region,
    Token,
    class_map,
    clip_box,
    parse_annotation_document,
    parse_annotations,
    parse_token_file,
    parse_token_lines,
    rasterize_labels,
    read_mask_png,
    write_annotations,
    write_mask_png,
    write_token_file,
)

CLASSES = class_map(["serial", "weather", "death_notice", "stocks"])


def test_token_line_keeps_box_and_index():
    pages = parse_token_lines(["PAGE p1 600 400", "temps 10 195 40 300"])
    assert pages[0].tokens == [Token("temps", (10, 195, 40, 300), 0)]
    assert (pages[0].width, pages[0].height) == (600, 400)


def test_empty_file_and_empty_page():
    assert parse_token_lines([]) == []
    pages = parse_token_lines(["PAGE blank 10 10"])
    assert pages[0].page_id == "blank" and pages[0].tokens == []


def test_negative_min_is_clipped():
    pages = parse_token_lines(["PAGE p 100 100", "a -5 10 20 30"])
    assert pages[0].tokens[0].box == (0, 10, 20, 30)


def test_empty_boxes_are_dropped_and_counted():
    pages = parse_token_lines(["PAGE p 10 10", "a 0 0 5 5", "b 20 20 30 30", "c 3 3 3 9", "d 1 1 2 2"])
    p = pages[0]
    assert [t.text for t in p.tokens] == ["a", "d"]
    assert [t.index for t in p.tokens] == [0, 1]
    assert p.dropped == 2


@pytest.mark.parametrize(
    "lines, fragment",
    [
        (["PAGE p 10 10", "a 1 2 3"], "expected 5 fields"),
        (["PAGE p 10 10", "a 1 2 x 4"], "expected integers"),
        (["PAGE p -4 10"], "invalid page dimensions"),
        (["PAGE p 10 10", "PAGE p 5 5"], "duplicate page id"),
        (["a 1 2 3 4"], "before any PAGE"),
    ],
)
def test_token_file_errors_name_the_line(lines, fragment):
    with pytest.raises(ParseError) as e:
        parse_token_lines(lines, path="f.txt")
    assert fragment in str(e.value)
    assert f"f.txt:{len(lines)}:" in str(e.value)


def test_escaped_text_round_trip(tmp_path):
    pages = parse_token_lines(["PAGE p 50 50", r"le\sdit 1 1 5 5", r"a\\b 6 6 9 9"])
    assert [t.text for t in pages[0].tokens] == ["le dit", "a\\b"]
    write_token_file(tmp_path / "t.txt", pages)
    again = parse_token_file(tmp_path / "t.txt")
    assert again[0].tokens == pages[0].tokens


def test_parsing_is_deterministic(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("PAGE a 20 20\nx 0 0 4 4\ny 2 2 9 9\nPAGE b 5 5\n", encoding="utf-8")
    assert parse_token_file(path) == parse_token_file(path)


coord = st.integers(-50, 150)


@given(coord, coord, coord, coord, st.integers(1, 100), st.integers(1, 100))
def test_clip_matches_scalar_clamp(x0, y0, x1, y1, w, h):
    def clamp(v, hi):
        return hi if v > hi else 0 if v < 0 else v

    assert clip_box((x0, y0, x1, y1), w, h) == (clamp(x0, w), clamp(y0, h), clamp(x1, w), clamp(y1, h))


@given(st.integers(0, 60), st.integers(0, 60), st.integers(1, 30), st.integers(1, 30), st.integers(1, 100), st.integers(1, 100))
def test_clipping_never_grows_area(x0, y0, bw, bh, w, h):
    box = (x0 - 20, y0 - 20, x0 - 20 + bw, y0 - 20 + bh)
    c = clip_box(box, w, h)
    area = max(0, c[2] - c[0]) * max(0, c[3] - c[1])
    assert area <= bw * bh


@given(st.lists(st.tuples(coord, coord, st.integers(0, 40), st.integers(0, 40)), max_size=12))
def test_kept_plus_dropped_equals_input(boxes):
    lines = ["PAGE p 64 48"] + [f"t {x} {y} {x + w} {y + h}" for x, y, w, h in boxes]
    p = parse_token_lines(lines)[0]
    assert len(p.tokens) + p.dropped == len(boxes)


def test_rect_annotation_maps_to_class_id():
    pages = parse_annotation_document(
        {"p": {"regions": [{"shape": "rect", "coords": [10, 10, 50, 50], "class": "death_notice"}]}}, CLASSES
    )
    (r,) = pages[0].regions
    assert r.class_id == CLASSES["death_notice"].id == 3
    assert r.coords == (10, 10, 50, 50)


def test_page_without_regions_is_not_annotated():
    pages = parse_annotation_document({"p": {"regions": []}}, CLASSES)
    assert not pages[0].annotated


def test_overlapping_regions_are_kept():
    doc = {"p": [{"shape": "rect", "coords": [0, 0, 4, 4], "class": "serial"},
                 {"shape": "rect", "coords": [2, 2, 6, 6], "class": "stocks"}]}
    assert len(parse_annotation_document(doc, CLASSES)[0].regions) == 2


def test_unknown_classes_are_listed():
    doc = {"p": [{"shape": "rect", "coords": [0, 0, 4, 4], "class": "comics"},
                 {"shape": "rect", "coords": [0, 0, 4, 4], "class": "ads"}]}
    with pytest.raises(DataError, match="ads, comics"):
        parse_annotation_document(doc, CLASSES)


def test_self_intersecting_polygon_is_rejected():
    bowtie = [[0, 0], [10, 10], [10, 0], [0, 10]]
    with pytest.raises(ParseError, match="self-intersecting"):
        parse_annotation_document({"p": [{"shape": "polygon", "coords": bowtie, "class": "serial"}]}, CLASSES)


def test_via_export_is_understood(tmp_path):
    doc = {"_via_img_metadata": {"scan.png123": {
        "filename": "scan.png", "size": 123,
        "regions": [
            {"shape_attributes": {"name": "rect", "x": 1, "y": 2, "width": 3, "height": 4},
             "region_attributes": {"class": "weather"}},
            {"shape_attributes": {"name": "polygon", "all_points_x": [0, 8, 8], "all_points_y": [0, 0, 8]},
             "region_attributes": {"type": "stocks"}},
        ]}}}
    path = tmp_path / "via.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    (page,) = parse_annotations(path, CLASSES)
    assert page.page_id == "scan"
    assert page.regions[0].coords == (1, 2, 4, 6)
    assert page.regions[1].coords == ((0, 0), (8, 0), (8, 8))


def test_annotation_round_trip(tmp_path):
    doc = {"p": [{"shape": "rect", "coords": [0, 0, 4, 4], "class": "serial"},
                 {"shape": "polygon", "coords": [[0, 0], [6, 0], [0, 6]], "class": "stocks"}]}
    pages = parse_annotation_document(doc, CLASSES)
    write_annotations(tmp_path / "a.json", pages)
    assert parse_annotations(tmp_path / "a.json", CLASSES) == pages


def test_rasterize_small_rect():
    m = rasterize_labels([Region("rect", (0, 0, 2, 2), 3, "x")], 4, 4)
    assert (m == 3).sum() == 4 and (m == 0).sum() == 12


def test_rasterize_no_regions_and_last_wins():
    assert not rasterize_labels([], 3, 5).any()
    m = rasterize_labels([Region("rect", (0, 0, 2, 2), 1, "a"), Region("rect", (1, 1, 3, 3), 2, "b")], 4, 4)
    assert m[1, 1] == 2 and m[0, 0] == 1


def test_polygon_uses_pixel_centers():
    # hypotenuse y = 0.75 x passes through no pixel center
    m = rasterize_labels([Region("polygon", ((0, 0), (4, 0), (4, 3)), 1, "t")], 4, 4)
    cy, cx = np.mgrid[0:4, 0:4] + 0.5
    assert np.array_equal(m == 1, cy < 0.75 * cx)


@given(st.integers(1, 64), st.integers(1, 64), st.data())
def test_rect_raster_area_round_trip(h, w, data):
    x0 = data.draw(st.integers(0, w - 1))
    y0 = data.draw(st.integers(0, h - 1))
    x1 = data.draw(st.integers(x0 + 1, w))
    y1 = data.draw(st.integers(y0 + 1, h))
    m = rasterize_labels([Region("rect", (x0, y0, x1, y1), 1, "r")], h, w)
    assert int((m == 1).sum()) == (x1 - x0) * (y1 - y0)


def test_mask_png_round_trip(tmp_path, rng):
    m = rng.integers(0, 5, size=(7, 9)).astype(np.uint8)
    write_mask_png(tmp_path / "m.png", m)
    assert np.array_equal(read_mask_png(tmp_path / "m.png"), m)
