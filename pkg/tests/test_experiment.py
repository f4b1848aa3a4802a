import pytest

from textmapseg import segmetrics
from textmapseg.errors import DataError
from textmapseg.experiment import ExperimentConfig, load_dataset, run_experiment, split_pages, train_subset

SYNTH = {
    "classes": [{"name": "a", "archetype": "framed box", "cluster": "x", "frequency": 0.4}],
    "clusters": [{"name": "filler"}, {"name": "x"}],
    "height": 24, "width": 24,
}


def test_period_split_counts_are_exact():
    data = load_dataset({"synth": SYNTH, "periods": {"1": 30, "2": 10}})
    tr, tests = split_pages(data.pages, data.tags,
                            {"policy": "period", "train_periods": [1], "test_periods": [2], "heldout_fraction": 0.2}, 0)
    assert len(tr) == 24 and len(tests["heldout"]) == 6 and len(tests["period"]) == 10
    assert all(data.tags[p.id]["period"] == "2" for p in tests["period"])
    assert not {p.id for p in tr} & {p.id for p in tests["heldout"]}


def test_random_split_counts():
    data = load_dataset({"synth": SYNTH, "pages": 25})
    tr, tests = split_pages(data.pages, data.tags, {"policy": "random", "test_fraction": 0.2}, 4)
    assert len(tr) == 20 and len(tests["test"]) == 5


def test_overlapping_periods_rejected():
    data = load_dataset({"synth": SYNTH, "pages": 5})
    with pytest.raises(DataError):
        split_pages(data.pages, data.tags, {"policy": "period", "train_periods": [0], "test_periods": [0]}, 0)


def test_train_subsets_are_nested_in_size():
    pages = list(range(40))
    sizes = [len(train_subset(pages, f, 1)) for f in (0.25, 0.5, 1.0)]
    assert sizes == [10, 20, 40]


@pytest.mark.parametrize("bad", [
    {"runs": 0},
    {"split": {"policy": "random", "test_fraction": 1.0}},
    {"split": {"policy": "shuffle"}},
    {"modalities": ["audio"]},
    {"colour": 1},
])
def test_config_validation(bad):
    with pytest.raises(DataError):
        ExperimentConfig.from_dict({"corpus": {"synth": SYNTH}, **bad})


def test_fraction_of_train_rows_and_recomputation(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "corpus": {"synth": SYNTH, "pages": 40},
        "split": {"policy": "fraction-of-train", "test_fraction": 0.25, "train_fractions": [0.25, 0.5, 1.0]},
        "modalities": ["image+text"],
        "runs": 2,
        "train": {"steps": 4, "eval_every": 2},
        "out_dir": str(tmp_path),
    })
    res = run_experiment(cfg)
    rows = list(res.comparisons["test"])
    assert rows == ["Image+Text (25%)", "Image+Text (50%)", "Image+Text (100%)"]
    assert [res.counts[f"train@{f:g}"] for f in (0.25, 0.5, 1.0)] == [8, 15, 30]
    # the report equals a fresh computation from the record files
    names = {1: "a"}
    again = {
        row: [segmetrics.summarize(segmetrics.read_records(tmp_path / "records" / "test" / tag / f"run{r}.txt"), names)
              for r in range(2)]
        for row, tag in zip(rows, ("Image-Text_25pct", "Image-Text_50pct", "Image-Text_100pct"))
    }
    assert segmetrics.format_report(segmetrics.compare_runs(again, None)) == (tmp_path / "report_test.txt").read_text()


def test_modality_ablation_has_three_rows():
    cfg = ExperimentConfig.from_dict({
        "corpus": {"synth": SYNTH, "pages": 10}, "runs": 2, "train": {"steps": 3, "eval_every": 3},
    })
    res = run_experiment(cfg)
    assert list(res.comparisons["test"]) == ["Image", "Text", "Image+Text"]
    assert "Welch" in res.reports["test"]
