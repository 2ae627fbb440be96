import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twinspeech.data import (DatasetManifest, FeatureSet, ManifestEntry, class_quota, round_half_up,
                             stratified_indices, subsample)
from twinspeech.exceptions import DataError
from twinspeech.harness import BASELINE, EvalReport, GridCell, top1_accuracy


class ConstantModel:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=float)

    def decision_function(self, X):
        return np.tile(self.logits, (len(X), 1))


class OracleModel:
    def __init__(self, y, k):
        self.y, self.k = y, k

    def decision_function(self, X):
        return np.eye(self.k)[self.y]


def wluc_like():
    # 5 classes x 1,500 train items plus a test split
    entries = [ManifestEntry(f"c{c}/{i}.wav", f"c{c}", "train") for c in range(5) for i in range(1500)]
    entries += [ManifestEntry(f"c{c}/t{i}.wav", f"c{c}", "test") for c in range(5) for i in range(10)]
    return DatasetManifest(tuple(entries))


def test_wluc_fraction_counts():
    sub = subsample(wluc_like(), 0.05, seed=0)
    train = [e for e in sub.entries if e.split == "train"]
    assert len(train) == 375
    assert {c: sum(e.label == c for e in train) for c in sub.classes} == {f"c{c}": 75 for c in range(5)}
    assert sum(e.split == "test" for e in sub.entries) == 50


def test_fraction_one_is_identity():
    m = wluc_like()
    assert subsample(m, 1.0, seed=3).entries == m.entries


def test_subsample_deterministic():
    m = wluc_like()
    assert subsample(m, 0.1, seed=4).entries == subsample(m, 0.1, seed=4).entries
    assert subsample(m, 0.1, seed=4).entries != subsample(m, 0.1, seed=5).entries


def test_rounding_rule():
    assert round_half_up(2.5) == 3 and round_half_up(3.5) == 4 and round_half_up(0.49) == 0
    assert class_quota(0.05, 10) == 1   # 0.5 rounds up
    assert class_quota(0.05, 9) == 1    # 0.45 rounds to 0, minimum rule lifts it
    assert class_quota(0.05, 30) == 2   # 1.5 -> 2
    assert class_quota(0.05, 75) == 4   # 3.75 -> 4
    assert class_quota(0.5, 1) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=5), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_stratification(counts, fraction, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    idx = stratified_indices(labels, fraction, seed)
    assert len(set(idx.tolist())) == len(idx)
    for c, n in enumerate(counts):
        got = int(np.sum(labels[idx] == c))
        assert got == class_quota(fraction, n)
        assert abs(got - fraction * n) <= 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.floats(0.01, 1.0), st.floats(0.01, 1.0),
       st.integers(0, 1000))
def test_nested_monotone(counts, f1, f2, seed):
    f1, f2 = min(f1, f2), max(f1, f2)
    labels = np.repeat(np.arange(len(counts)), counts)
    small = set(stratified_indices(labels, f1, seed, nested=True).tolist())
    large = set(stratified_indices(labels, f2, seed, nested=True).tolist())
    assert small <= large


def test_empty_manifest_subsample():
    with pytest.raises(DataError):
        stratified_indices(np.array([], dtype=int), 0.5, 0)


def test_manifest_validation(tmp_path):
    with pytest.raises(DataError):
        DatasetManifest((ManifestEntry("a", "x", "dev"),))
    with pytest.raises(DataError):
        DatasetManifest((ManifestEntry("a", "x", "train"), ManifestEntry("a", "x", "train")))
    with pytest.raises(DataError):
        DatasetManifest((ManifestEntry("a", "x", "train"),), role="downstream")
    with pytest.raises(DataError):
        DatasetManifest((ManifestEntry("a", "y", "test"),), classes={"x": 0})


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_manifest_roundtrip(tmp_path, suffix):
    m = DatasetManifest((ManifestEntry("a.wav", "x", "train"), ManifestEntry("b.wav", "y", "test")))
    m.write(tmp_path / f"m{suffix}")
    back = DatasetManifest.read(tmp_path / f"m{suffix}")
    assert back.entries == m.entries and back.classes == m.classes


def test_top1_constant_model():
    y = np.repeat(np.arange(4), 25)
    assert top1_accuracy(ConstantModel([0, 0, 0, 0]), (np.zeros((100, 1)), y)) == 25.0


def test_top1_oracle():
    y = np.repeat(np.arange(4), 25)
    assert top1_accuracy(OracleModel(y, 4), (np.zeros((100, 1)), y)) == 100.0


def test_top1_tie_lowest_index():
    y = np.array([1, 3])
    assert top1_accuracy(ConstantModel([0, 5, 0, 5]), (np.zeros((2, 1)), y)) == 50.0


def test_top1_empty():
    with pytest.raises(DataError):
        top1_accuracy(ConstantModel([0, 1]), (np.zeros((0, 1)), np.array([], dtype=int)))


def test_top1_class_count_mismatch():
    with pytest.raises(DataError):
        top1_accuracy(ConstantModel([0, 1]), (np.zeros((2, 1)), np.array([0, 4])))


def test_random_predictor_near_chance():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 250)

    class Random:
        def decision_function(self, X):
            return rng.normal(size=(len(X), 4))

    acc = top1_accuracy(Random(), (np.zeros((1000, 1)), y))
    sigma = 100 * np.sqrt(0.25 * 0.75 / 1000)
    assert abs(acc - 25.0) <= 3 * sigma


def sample_report():
    cells = [GridCell(BASELINE, "scratch", 0.05, 0, 50.0, "aa", 16),
             GridCell("synth", "bt", 0.05, 0, 60.0, "bb", 16),
             GridCell("synth", "mbt", 0.05, 0, 65.0, "cc", 16),
             GridCell("synth", "mbt", 1.0, 0, None, "dd", 0, "SubsampleError: boom")]
    return EvalReport(cells, {"note": "x"})


def test_report_roundtrips():
    r = sample_report()
    assert EvalReport.from_json(r.to_json()) == r
    assert EvalReport.from_csv(r.to_csv(), r.meta) == r


def test_report_markdown():
    md = sample_report().to_markdown()
    lines = [l for l in md.splitlines() if l.startswith("| ")]
    assert lines[0] == "| Fraction (%) | Baseline | synth BT | synth MBT |"
    assert len(lines) == 1 + 2   # header plus one row per fraction
    assert "Failed cells:" in md and "boom" in md


def test_feature_set_subsample_keeps_test():
    X = np.zeros((12, 2, 2))
    y = np.array([0, 1] * 6)
    split = np.array(["train"] * 8 + ["test"] * 4)
    sub = subsample(FeatureSet(X, y, split), 0.25, seed=0)
    assert (sub.split == "test").sum() == 4 and (sub.split == "train").sum() == 2
