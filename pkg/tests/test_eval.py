import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from queenwatch.errors import ClassTooSmall, LengthMismatch, SingleClass, TooSmall
from queenwatch.evaluate import (
    DEFAULT_SUBSETS,
    ENERGY_PRESETS,
    EnergyModel,
    classification_report,
    estimate_energy,
    fit_cv,
    kfold_indices,
    render_ablation,
    run_ablation,
    split_indices,
    stratified_kfold,
    stratified_split,
    subset_name,
)
from queenwatch.features import feature_matrix
from queenwatch.gbdt import TrainConfig
from queenwatch.ingest import SynthConfig, generate_synthetic


def _labels(n0, n1):
    return np.array([0] * n0 + [1] * n1)


# --- splits -------------------------------------------------------------------

def test_split_900_100():
    y = _labels(100, 900)
    tr, te = split_indices(y, 0.2, seed=0)
    assert np.bincount(y[te]).tolist() == [20, 180]
    assert np.bincount(y[tr]).tolist() == [80, 720]
    assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == y.size


def test_split_two_samples():
    y = _labels(1, 1)
    tr, te = split_indices(y, 0.5, seed=3)
    assert sorted(y[tr]) == [0] or sorted(y[te]) == [0]
    assert tr.size == 1 and te.size == 1


def test_split_errors():
    with pytest.raises(SingleClass):
        split_indices(np.ones(10, int), 0.2)
    with pytest.raises(TooSmall):
        split_indices(_labels(1, 1), 0.1)
    with pytest.raises(ValueError):
        split_indices(_labels(5, 5), 1.0)


def test_split_is_deterministic_per_seed():
    y = _labels(300, 700)
    a = split_indices(y, 0.2, 4)
    b = split_indices(y, 0.2, 4)
    c = split_indices(y, 0.2, 5)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(a[1], c[1])


def test_split_ratio_sweep_10k():
    y = generate_synthetic(SynthConfig(n_samples=10000, seed=0)).labels
    glob = y.mean()
    for seed in range(100):
        tr, te = split_indices(y, 0.2, seed)
        assert te.size == 2000
        assert abs(y[te].mean() - glob) <= 1 / te.size
        assert abs(y[tr].mean() - glob) <= 1 / tr.size


def test_stratified_split_on_dataset():
    d = generate_synthetic(SynthConfig(n_samples=500, seed=1))
    tr, te = stratified_split(d, 0.2, 0)
    assert len(tr) == 400 and len(te) == 100
    assert set(tr.samples).isdisjoint(te.samples)


def test_kfold_5_5():
    y = _labels(5, 5)
    for tr, va in kfold_indices(y, 5, 0):
        assert np.bincount(y[va], minlength=2).tolist() == [1, 1]
        assert tr.size == 8


def test_kfold_leave_one_out():
    y = _labels(4, 4)
    folds = kfold_indices(y, 8, 2)
    assert sorted(int(va[0]) for _, va in folds) == list(range(8))
    assert all(va.size == 1 and tr.size == 7 for tr, va in folds)


def test_kfold_1420_minority_counts():
    y = _labels(188, 1232)
    for seed in range(5):
        mins = [int(np.sum(y[va] == 0)) for _, va in kfold_indices(y, 5, seed)]
        assert set(mins) <= {37, 38} and sum(mins) == 188


def test_kfold_errors():
    with pytest.raises(ClassTooSmall):
        kfold_indices(_labels(3, 20), 5)
    with pytest.raises(ClassTooSmall):
        kfold_indices(_labels(3, 3), 7)
    with pytest.raises(ClassTooSmall):
        kfold_indices(_labels(3, 3), 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_kfold_partition_property(n0, n1, k, seed):
    if min(n0, n1) < k:
        return
    y = _labels(n0, n1)
    folds = kfold_indices(y, k, seed)
    vals = np.concatenate([va for _, va in folds])
    assert np.array_equal(np.sort(vals), np.arange(y.size))
    for tr, va in folds:
        assert np.intersect1d(tr, va).size == 0 and tr.size + va.size == y.size
        # per-class counts differ from the exact share by less than one sample
        for c, nc in ((0, n0), (1, n1)):
            assert abs(np.sum(y[va] == c) - nc / k) < 1


def test_stratified_kfold_on_dataset():
    d = generate_synthetic(SynthConfig(n_samples=200, seed=2))
    folds = stratified_kfold(d, 5, 0)
    assert len(folds) == 5
    assert sum(len(va) for _, va in folds) == 200


# --- reports ----------------------------------------------------------------------

def test_report_four_samples():
    r = classification_report([0, 0, 1, 1], [0, 1, 1, 1])
    assert r.accuracy == 0.75
    assert r.recall == (0.5, 1.0)
    assert r.precision[1] == pytest.approx(2 / 3)
    assert r.precision[0] == 1.0
    assert (r.tn, r.fp, r.fn, r.tp) == (1, 1, 0, 2)
    assert not r.zero_division


def test_report_perfect():
    r = classification_report([0, 1, 1, 0, 1], [0, 1, 1, 0, 1])
    assert r.accuracy == 1.0
    assert r.precision == r.recall == r.f1 == (1.0, 1.0)
    assert r.macro == r.weighted == (1.0, 1.0, 1.0)


def test_report_1410_of_1420():
    truth = _labels(188, 1232)
    pred = truth.copy()
    pred[:10] = 1  # ten queenless samples called queenright, no false negatives
    r = classification_report(truth, pred)
    assert (r.fp, r.fn) == (10, 0)
    assert r.tp + r.tn == 1410
    assert round(r.accuracy, 4) == 0.9930
    assert f"{r.accuracy:.2f}" == "0.99"
    assert r.support == (188, 1232)
    text = r.render()
    assert "accuracy" in text and "0.99" in text and "1420" in text


def test_report_zero_division_flagged():
    r = classification_report([1, 1, 1], [1, 1, 1])
    assert r.zero_division
    assert r.precision[0] == 0.0 and r.recall[0] == 0.0


def test_report_errors():
    with pytest.raises(LengthMismatch):
        classification_report([0, 1], [0])
    with pytest.raises(LengthMismatch):
        classification_report([], [])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=1000))
def test_report_matches_brute_recount(pairs):
    t = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    r = classification_report(t, p)
    cells = {(a, b): 0 for a in (0, 1) for b in (0, 1)}
    for a, b in pairs:
        cells[(a, b)] += 1
    assert (r.tn, r.fp, r.fn, r.tp) == (cells[0, 0], cells[0, 1], cells[1, 0], cells[1, 1])
    assert r.accuracy == pytest.approx((cells[0, 0] + cells[1, 1]) / len(pairs))
    lo, hi = min(r.f1), max(r.f1)
    assert lo - 1e-12 <= r.weighted[2] <= hi + 1e-12


# --- training protocol and ablation -----------------------------------------------

@pytest.fixture(scope="module")
def only_dt():
    # only the temperature differential carries class signal
    return generate_synthetic(SynthConfig(n_samples=1500, seed=5, channel_separation=(1.0, 0.0, 0.0)))


def test_fit_cv_keeps_lowest_loss_fold(only_dt):
    X = feature_matrix(only_dt)
    y = only_dt.labels
    cv = fit_cv(X, y, TrainConfig(max_rounds=30), k=3, seed=1)
    assert len(cv.fold_accuracy) == 3
    assert cv.best_fold == int(np.argmin(cv.fold_loss))
    assert 0.9 < cv.val_accuracy <= 1.0


def test_ablation_only_dt_is_informative(only_dt):
    subsets = ("t,h,p", "h", "t", "p")
    rows = run_ablation(only_dt, subsets, TrainConfig(class_weighting="none"), n_seeds=2)
    assert [r.subset for r in rows] == [(0, 1, 2), (1,), (0,), (2,)]
    full, h, t, p = rows
    majority = max(only_dt.labels.mean(), 1 - only_dt.labels.mean())
    assert abs(t.test_mean - full.test_mean) <= 0.02
    for r in (h, p):
        assert abs(r.test_mean - majority) <= 0.02
    for r in (h, t, p):
        assert full.test_mean >= r.test_mean
        assert r.n_seeds == 2 and len(r.test_runs) == 2
        assert r.val_std >= 0 and r.test_std >= 0


def test_ablation_parallel_matches_serial(only_dt):
    small = only_dt.subset(range(600))
    cfg = TrainConfig(max_rounds=20)
    a = run_ablation(small, ("t", "h"), cfg, seeds=[3, 4])
    b = run_ablation(small, ("t", "h"), cfg, seeds=[3, 4], n_jobs=2)
    assert a == b


def test_ablation_rejects_empty_subsets(only_dt):
    with pytest.raises(ValueError):
        run_ablation(only_dt, ())
    with pytest.raises(ValueError):
        run_ablation(only_dt, ("",))


def test_default_subsets_and_names():
    assert len(DEFAULT_SUBSETS) == 8
    names = [subset_name(s) for s in [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2), (0, 1, 2, 3)]]
    assert names == ["Temperature", "Humidity", "Pressure", "Temp + Humidity", "Temp + Pressure",
                     "Humidity + Pressure", "All-Environmental", "Environmental + audio"]


def test_render_ablation_formats():
    from queenwatch.evaluate import AblationRow
    rows = [AblationRow((0, 1, 2), 0.9944, 0.004, 0.99412, 0.0041, 10),
            AblationRow((1,), 0.871, 0.01, 0.868, 0.012, 10)]
    text = render_ablation(rows)
    lines = text.splitlines()
    assert "Feature Set" in lines[0] and "Val. Accuracy (%)" in lines[0] and "Test Accuracy (%)" in lines[0]
    assert "99.4 ± 0.4" in lines[2] and lines[2].startswith("All-Environmental")
    assert "86.8 ± 1.2" in lines[3]
    tsv = render_ablation(rows, "rows").splitlines()
    assert tsv[0].split("\t")[0] == "feature_set"
    assert tsv[1].split("\t")[:3] == ["All-Environmental", "dT+dH+dP", "10"]
    assert float(tsv[1].split("\t")[5]) == pytest.approx(99.412)


# --- energy -----------------------------------------------------------------------

def test_energy_48mhz_preset():
    e = estimate_energy(ENERGY_PRESETS["paper-48mhz"])
    assert e == pytest.approx(97.9)
    assert abs(e - 98) <= 0.2


def test_energy_table3_preset():
    assert estimate_energy(ENERGY_PRESETS["table3-max"]) == pytest.approx(6.45)


def test_energy_unit_and_linearity():
    assert estimate_energy(EnergyModel(3.3, 1.0, 1.0)) == 1.0
    a = estimate_energy(EnergyModel(3.3, 44.5, 2.2))
    assert estimate_energy(EnergyModel(3.3, 44.5, 4.4)) == pytest.approx(2 * a)
    assert EnergyModel(3.3, 44.5, 2.2).current_ma == pytest.approx(44.5 / 3.3)


@pytest.mark.parametrize("bad", [(0, 1, 1), (3.3, -1, 1), (3.3, 1, 0)])
def test_energy_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        EnergyModel(*bad)
