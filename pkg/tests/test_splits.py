import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poolbench.errors import ClassTooSmall, DegenerateGeography, InvalidSplit, MalformedLine, MissingCell, OverlappingIds, UnknownId
from poolbench.splits import gap_report, load_external_split, random_split, save_split, spatial_split
from poolbench.tiles import DatasetManifest, PatchRecord


def manifest(labels, lons=None):
    lons = lons if lons is not None else [float(i) for i in range(len(labels))]
    recs = [PatchRecord(f"r{i:03d}", f"t{i}.emb", int(y), float(lon), 0.0, "s") for i, (y, lon) in enumerate(zip(labels, lons))]
    return DatasetManifest(recs, [f"c{k}" for k in range(max(labels) + 1)], 2, ".")


# ------------------------------------------------------------------ random


def test_random_split_per_class_counts():
    m = manifest([k for k in range(10) for _ in range(10)])
    split = random_split(m, 0.2, seed=0)
    labels = {r.id: r.label for r in m.records}
    per_class = np.bincount([labels[i] for i in split.test_ids], minlength=10)
    assert per_class.tolist() == [2] * 10
    assert len(split.train_ids) == 80


def test_random_split_deterministic_and_seed_sensitive():
    m = manifest([k for k in range(3) for _ in range(20)])
    a, b = random_split(m, 0.2, 5), random_split(m, 0.2, 5)
    assert a.train_ids == b.train_ids and a.test_ids == b.test_ids
    assert random_split(m, 0.2, 6).test_ids != a.test_ids


def test_random_split_small_classes_keep_both_sides():
    m = manifest([0, 0, 1, 1])
    split = random_split(m, 0.2, 0)
    assert len(split.train_ids) == 2 and len(split.test_ids) == 2


def test_random_split_class_too_small():
    with pytest.raises(ClassTooSmall):
        random_split(manifest([0, 0, 0, 1]), 0.2, 0)


@given(st.lists(st.integers(2, 12), min_size=2, max_size=5), st.floats(0.05, 0.95), st.integers(0, 100))
def test_random_split_partitions(counts, frac, seed):
    m = manifest([k for k, c in enumerate(counts) for _ in range(c)])
    split = random_split(m, frac, seed)
    assert sorted(split.train_ids + split.test_ids) == sorted(m.ids)
    labels = {r.id: r.label for r in m.records}
    for side in (split.train_ids, split.test_ids):
        assert {labels[i] for i in side} == set(range(len(counts)))


# ----------------------------------------------------------------- spatial


def test_spatial_split_five_points():
    m = manifest([0, 1, 0, 1, 0], lons=[0.0, 1.0, 2.0, 3.0, 4.0])
    split = spatial_split(m, 0.2)
    assert split.test_ids == ("r004",)
    assert split.params["threshold"] == pytest.approx(3.2)


def test_spatial_split_ties_go_to_train():
    m = manifest([0, 1, 0, 1, 0], lons=[0.0, 1.0, 1.0, 1.0, 5.0])
    split = spatial_split(m, 0.4)  # threshold = quantile(0.6) = 1.0
    assert split.test_ids == ("r004",)


def test_spatial_split_degenerate():
    with pytest.raises(DegenerateGeography):
        spatial_split(manifest([0, 1, 0], lons=[2.0, 2.0, 2.0]))


@given(st.lists(st.floats(-180, 180), min_size=3, max_size=40, unique=True), st.floats(0.05, 0.5))
def test_spatial_split_is_a_longitude_cut(lons, frac):
    m = manifest([i % 2 for i in range(len(lons))], lons)
    split = spatial_split(m, frac)
    by_id = {r.id: r.lon for r in m.records}
    assert max(by_id[i] for i in split.train_ids) < min(by_id[i] for i in split.test_ids)


# ---------------------------------------------------------------- external


def test_split_file_round_trip(tmp_path):
    m = manifest([0, 1] * 5)
    split = random_split(m, 0.2, 3)
    save_split(split, tmp_path / "s.tsv")
    back = load_external_split(tmp_path / "s.tsv", m)
    assert back.kind == "external" and back.seed == 3
    assert back.train_ids == split.train_ids and back.test_ids == split.test_ids


def test_split_file_errors(tmp_path):
    m = manifest([0, 1, 0, 1])
    path = tmp_path / "s.tsv"
    path.write_text("r000\ttrain\nghost\ttest\n")
    with pytest.raises(UnknownId):
        load_external_split(path, m)
    path.write_text("r000\ttrain\nr001\ttrain\n")
    with pytest.raises(InvalidSplit):
        load_external_split(path, m)
    path.write_text("r000\ttrain\nr000\ttest\n")
    with pytest.raises(OverlappingIds):
        load_external_split(path, m)
    path.write_text("r000\ttrain\nr001 test\n")
    with pytest.raises(MalformedLine) as info:
        load_external_split(path, m)
    assert info.value.line_no == 2


# --------------------------------------------------------------------- gap


def cell(source, method, probe, split, acc):
    return {"source": source, "method": method, "probe": probe, "split": split, "accuracy": acc}


def test_gap_single_source():
    (entry,) = gap_report([cell("a", "mean", "knn", "random", 0.960), cell("a", "mean", "knn", "spatial", 0.873)])
    assert entry.gap == pytest.approx(8.7, abs=1e-9)


def test_gap_zero_when_equal():
    (entry,) = gap_report([cell("a", "m", "p", "random", 0.5), cell("a", "m", "p", "spatial", 0.5)])
    assert entry.gap == 0.0


def test_gap_three_sources_hand_computed():
    rnd = {"a": 0.9, "b": 0.8, "c": 0.7}
    spa = {"a": 0.6, "b": 0.75, "c": 0.5}
    cells = [cell(s, "stats", "linear", "random", v) for s, v in rnd.items()]
    cells += [cell(s, "stats", "linear", "spatial", v) for s, v in spa.items()]
    cells += [cell(s, "mean", "linear", sp, 0.5) for s in rnd for sp in ("random", "spatial")]
    entries = gap_report(cells)
    assert [(e.method, e.probe) for e in entries] == [("mean", "linear"), ("stats", "linear")]
    stats = entries[1]
    r = (0.9 + 0.8 + 0.7) / 3
    s = (0.6 + 0.75 + 0.5) / 3
    assert stats.random_avg == r and stats.spatial_avg == s and stats.gap == 100.0 * (r - s)


def test_gap_missing_cell():
    cells = [cell("a", "m", "p", "random", 0.9), cell("b", "m", "p", "random", 0.9), cell("a", "m", "p", "spatial", 0.8)]
    with pytest.raises(MissingCell):
        gap_report(cells)


def test_gap_ignores_external_cells():
    cells = [cell("a", "m", "p", sp, 0.5) for sp in ("random", "spatial")] + [cell("a", "x", "p", "external", 0.1)]
    assert len(gap_report(cells)) == 1
