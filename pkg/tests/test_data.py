import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from neurossm import data as D
from neurossm.data import BoldSequence, SyntheticSpec
from neurossm.errors import ContractError, DataError, ParseError


def write_csv(path, arr, header=True):
    lines = []
    if header:
        lines.append(",".join(f"r{j}" for j in range(arr.shape[1])))
    lines += [",".join(repr(float(v)) for v in row) for row in arr]
    path.write_text("\n".join(lines) + "\n")


def write_manifest(path, rows, group=True):
    head = "path,label,subject_id,group_id" if group else "path,label,subject_id"
    path.write_text(head + "\n" + "\n".join(",".join(r) for r in rows) + "\n")


def test_ingest_two_subjects(tmp_path):
    rng = np.random.default_rng(0)
    write_csv(tmp_path / "a.csv", rng.standard_normal((10, 3)))
    write_csv(tmp_path / "b.csv", rng.standard_normal((10, 3)), header=False)
    write_manifest(tmp_path / "m.csv", [["a.csv", "hc", "s1"], ["b.csv", "pd", "s2"]], group=False)
    seqs = D.ingest_csv(tmp_path / "m.csv")
    assert len(seqs) == 2
    assert all(s.series.shape == (10, 3) for s in seqs)
    assert [s.label for s in seqs] == [0, 1]
    assert seqs[0].group_id == "s1"


def test_zscore_hand_example():
    out = D.zscore(np.array([[1.0], [2.0], [3.0]]))[:, 0]
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=5e-5)
    np.testing.assert_allclose(out[2], math.sqrt(1.5), rtol=1e-14)


def test_constant_column_becomes_zero(tmp_path):
    x = np.random.default_rng(1).standard_normal((8, 3))
    x[:, 1] = 7.25
    out = D.zscore(x)
    assert np.all(out[:, 1] == 0)
    assert np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_zscore_moments_and_idempotence(steps, n, loc, scale):
    x = loc + scale * np.random.default_rng(steps * 7 + n).standard_normal((steps, n))
    z = D.zscore(x)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-8
    assert np.max(np.abs(z.std(axis=0) - 1)) < 1e-6
    assert np.max(np.abs(D.zscore(z) - z)) < 1e-10


def test_numeric_labels_sort_numerically(tmp_path):
    rng = np.random.default_rng(2)
    rows = []
    for i, lab in enumerate(["10", "2", "10"]):
        write_csv(tmp_path / f"{i}.csv", rng.standard_normal((5, 2)))
        rows.append([f"{i}.csv", lab, f"s{i}", ""])
    write_manifest(tmp_path / "m.csv", rows)
    assert [s.label for s in D.ingest_csv(tmp_path / "m.csv")] == [1, 0, 1]


def test_ingest_errors(tmp_path):
    rng = np.random.default_rng(3)
    write_csv(tmp_path / "a.csv", rng.standard_normal((6, 3)))
    write_csv(tmp_path / "b.csv", rng.standard_normal((6, 4)))
    write_manifest(tmp_path / "m.csv", [["a.csv", "0", "s1", ""], ["b.csv", "1", "s2", ""]])
    with pytest.raises(DataError, match="b.csv"):
        D.ingest_csv(tmp_path / "m.csv")

    (tmp_path / "c.csv").write_text("r0,r1\n1.0,2.0\n3.0,oops\n")
    write_manifest(tmp_path / "m2.csv", [["c.csv", "0", "s1", ""]])
    with pytest.raises(ParseError) as info:
        D.ingest_csv(tmp_path / "m2.csv")
    assert (info.value.row, info.value.col) == (3, 2)

    write_manifest(tmp_path / "m3.csv", [["missing.csv", "0", "s1", ""]])
    with pytest.raises(FileNotFoundError):
        D.ingest_csv(tmp_path / "m3.csv")


def test_write_and_reingest_round_trip(tmp_path):
    seqs = D.make_synthetic(D.preset("joint", n_rois=4, length=30), 3)
    D.write_dataset(seqs, tmp_path)
    back = D.ingest_csv(tmp_path / "manifest.csv")
    assert [s.label for s in back] == [s.label for s in seqs]
    for a, b in zip(seqs, back):
        assert np.max(np.abs(a.series - b.series)) < 1e-10


# ---------------------------------------------------------------- synthetic

def test_synthetic_is_deterministic():
    spec = D.preset("joint", n_rois=5, length=50, seed=4)
    a = D.make_synthetic(spec, 3)
    b = D.make_synthetic(spec, 3)
    assert all(x.series.tobytes() == y.series.tobytes() for x, y in zip(a, b))
    c = D.make_synthetic(spec.replace(seed=5), 3)
    assert a[0].series.tobytes() != c[0].series.tobytes()


def test_trend_only_classes_separated_by_fft_peak():
    freqs = (2.0, 5.0, 9.0)
    spec = SyntheticSpec(n_classes=3, n_rois=6, length=120, trend_freqs=freqs,
                         transient_rate=(0.0, 0.0, 0.0), noise_sd=0.0, seed=1)
    seqs = D.make_synthetic(spec, 10)
    correct = 0
    for s in seqs:
        power = (np.abs(np.fft.rfft(s.series, axis=0)) ** 2).sum(axis=1)
        correct += int(np.argmax(power)) == int(freqs[s.label])
    assert correct == len(seqs)


def test_transient_only_classes_differ_in_mean_abs_difference():
    spec = D.preset("fast")
    assert spec.trend_freqs[0] == spec.trend_freqs[1]
    seqs = D.make_synthetic(spec, 30)
    stat = np.array([np.abs(np.diff(s.series, axis=0)).mean() for s in seqs])
    y = np.array([s.label for s in seqs])
    a, b = stat[y == 0], stat[y == 1]
    pooled = math.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)
    assert abs(a.mean() - b.mean()) > 3 * pooled


def test_preset_structure():
    slow, fast, joint = D.preset("slow"), D.preset("fast"), D.preset("joint")
    assert slow.trend_freqs[0] != slow.trend_freqs[1] and slow.transient_rate[0] == slow.transient_rate[1]
    assert fast.trend_freqs[0] == fast.trend_freqs[1] and fast.transient_rate[0] != fast.transient_rate[1]
    assert joint.n_classes == 3
    # 0 vs 1 differ only in trend, 0 vs 2 only in transients
    assert joint.transient_rate[0] == joint.transient_rate[1] and joint.trend_freqs[0] != joint.trend_freqs[1]
    assert joint.trend_freqs[0] == joint.trend_freqs[2] and joint.transient_rate[0] != joint.transient_rate[2]
    with pytest.raises(ContractError):
        D.preset("nope")


def test_spec_validation():
    with pytest.raises(ContractError):
        SyntheticSpec(n_classes=2, trend_freqs=(1.0,), transient_rate=(0.1, 0.1))
    with pytest.raises(ContractError):
        SyntheticSpec(noise_sd=-1.0)


def test_spec_file_round_trip(tmp_path):
    spec = D.preset("fast", n_rois=7, seed=9)
    path = tmp_path / "spec.txt"
    path.write_text("# comment\n" + "".join(f"{k} = {v}\n" for k, v in spec.to_items().items())
                    + "n_per_class = 4\n")
    back, n_per_class = D.load_synthetic_spec(path)
    assert back == spec and n_per_class == 4
    path.write_text("bogus = 1\n")
    with pytest.raises(DataError):
        D.load_synthetic_spec(path)


# ---------------------------------------------------------------- cropping

def test_crop_identity_and_slice():
    x = np.arange(30.0).reshape(10, 3)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(D.random_crop(x, 10, rng), x)
    c = D.random_crop(x, 4, rng)
    start = int(c[0, 0]) // 3
    np.testing.assert_array_equal(c, x[start:start + 4])


def test_crop_contract():
    with pytest.raises(ContractError):
        D.random_crop(np.zeros((5, 2)), 6, np.random.default_rng(0))


def test_crop_start_is_uniform():
    x = np.arange(10.0)[:, None]
    rng = np.random.default_rng(123)
    starts = [int(D.random_crop(x, 4, rng)[0, 0]) for _ in range(10_000)]
    counts = np.bincount(starts, minlength=7)
    assert counts.size == 7
    assert chisquare(counts).pvalue > 0.01


# ---------------------------------------------------------------- splitting

def dataset(n_per_class, n_classes=2, scans=None):
    out = []
    for c in range(n_classes):
        for i in range(n_per_class):
            sid = f"c{c}_{i}"
            for _ in range((scans or {}).get(sid, 1)):
                out.append(BoldSequence(np.zeros((4, 2)), c, sid))
    return out


def subjects(data, idx):
    return {data[i].subject_id for i in idx}


def assert_plan_valid(data, plan):
    dev, test = set(plan.dev_indices), set(plan.test_indices)
    assert not dev & test and dev | test == set(range(len(data)))
    assert not subjects(data, dev) & subjects(data, test)
    vals = [set(v) for _, v in plan.folds]
    assert set().union(*vals) == dev
    assert sum(len(v) for v in vals) == len(dev)
    for tr, va in plan.folds:
        assert set(tr) | set(va) == dev
        assert not subjects(data, tr) & subjects(data, va)
        assert not subjects(data, tr) & subjects(data, test)


def test_split_hundred_subjects():
    data = dataset(50)
    plan = D.make_split(data, seed=3)
    assert len(plan.dev_indices) == 80 and len(plan.test_indices) == 20
    assert sum(data[i].label == 0 for i in plan.test_indices) == 10
    assert_plan_valid(data, plan)
    # inner folds: 64% train / 16% val of the total
    assert all(len(tr) == 64 and len(va) == 16 for tr, va in plan.folds)


def test_split_keeps_subject_scans_together():
    data = dataset(10, scans={"c0_3": 7})
    plan = D.make_split(data, seed=0)
    part = [i for i, s in enumerate(data) if s.subject_id == "c0_3"]
    assert len(part) == 7
    assert set(part) <= set(plan.test_indices) or set(part) <= set(plan.dev_indices)
    assert_plan_valid(data, plan)


def test_split_too_few_subjects():
    with pytest.raises(DataError, match="at least 5"):
        D.make_split(dataset(5), seed=0)


def test_split_deterministic():
    data = dataset(12, 3)
    assert D.make_split(data, seed=8) == D.make_split(data, seed=8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(7, 25), min_size=2, max_size=4), st.integers(0, 10_000))
def test_split_properties(sizes, seed):
    data = []
    rng = np.random.default_rng(seed)
    for c, n in enumerate(sizes):
        for i in range(n):
            for _ in range(int(rng.integers(1, 4))):
                data.append(BoldSequence(np.zeros((3, 1)), c, f"c{c}_{i}"))
    plan = D.make_split(data, seed=seed)
    assert_plan_valid(data, plan)
    for c, n in enumerate(sizes):
        n_test = len({data[i].subject_id for i in plan.test_indices if data[i].label == c})
        assert abs(n_test - 0.2 * n) <= 1


def test_subsample_nested_and_repeatable():
    data = dataset(40)
    dev = list(range(len(data)))
    a = D.subsample(data, dev, 50, seed=2)
    assert a == D.subsample(data, dev, 50, seed=2)
    prev = set()
    for pct in (5, 10, 20, 50, 100):
        cur = set(D.subsample(data, dev, pct, seed=2))
        assert prev <= cur
        prev = cur
    assert prev == set(dev)


def test_subsample_empty_class():
    data = dataset(6)
    with pytest.raises(DataError):
        D.subsample(data, list(range(len(data))), 5, seed=0)


def test_holdout_disjoint():
    data = dataset(10, scans={"c1_2": 3})
    tr, va = D.holdout(data, 0.2, seed=1)
    assert not subjects(data, tr) & subjects(data, va)
    assert sorted(tr + va) == list(range(len(data)))
    assert D.holdout(data, 0.0)[1] == []
