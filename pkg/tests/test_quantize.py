import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from queenwatch.errors import Overflow, StructuralError, TooManyNodes
from queenwatch.features import ScalerParams, feature_matrix
from queenwatch.gbdt import LEAF, Forest, Tree, TrainConfig, train
from queenwatch.infer import eval_quant, quantize_features
from queenwatch.ingest import SynthConfig, generate_synthetic
from queenwatch.quantize import (
    LEAF_FEATURE,
    MAX_NODES,
    QuantSpec,
    dequantize,
    parity_report,
    quantize_forest,
    to_fixed,
)

from oracles import random_quant_forest


def _forest(trees, base=0.0, n=3):
    return Forest(trees, base, ScalerParams((0.0,) * n, (1.0,) * n), tuple(range(n)))


def _stump(thr, lo=-0.5, hi=0.5, feature=0):
    return Tree(np.array([feature, LEAF, LEAF]), np.array([thr, 0.0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([0.0, lo, hi]), np.array([1.0, 0.0, 0.0]))


def test_spec_ranges():
    QuantSpec(4, 8)
    QuantSpec(12, 24)
    for bad in ((3, 16), (13, 16), (8, 7), (8, 25)):
        with pytest.raises(ValueError):
            QuantSpec(*bad)


def test_to_fixed_examples():
    assert to_fixed(0.5, 8, -32768, 32767) == 128
    assert to_fixed(0.25, 16, -(1 << 31), (1 << 31) - 1) == 16384
    # half-to-even
    assert to_fixed(0.5 / 256, 8, -32768, 32767) == 0
    assert to_fixed(1.5 / 256, 8, -32768, 32767) == 2
    assert to_fixed(-2.5 / 256, 8, -32768, 32767) == -2
    assert to_fixed(1e9, 8, -32768, 32767) == 32767
    assert to_fixed(float("-inf"), 8, -32768, 32767) == -32768


def test_quantize_examples():
    q = quantize_forest(_forest([_stump(0.5, -0.25, 0.25)], base=0.25))
    assert q.threshold_q[0] == 128
    assert list(q.leaf_q) == [0, -16384, 16384]
    assert q.base_q == 16384
    assert list(q.feature) == [0, LEAF_FEATURE, LEAF_FEATURE]
    assert list(q.left) == [1, -1, -1] and list(q.right) == [2, -1, -1]


def test_quantize_topology_and_error_bounds():
    rng = np.random.default_rng(0)
    trees = []
    for _ in range(10):
        trees.append(_stump(float(rng.uniform(-100, 100)), *rng.uniform(-2, 2, 2), feature=int(rng.integers(3))))
    f = _forest(trees, base=float(rng.normal()))
    q = quantize_forest(f)
    back = dequantize(q)
    for a, b in zip(f.trees, back.trees):
        assert np.array_equal(a.feature, b.feature)
        assert np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)
        internal = a.feature != LEAF
        assert np.all(np.abs(a.threshold[internal] - b.threshold[internal]) <= 2.0 ** -9)
        assert np.all(np.abs(a.value[~internal] - b.value[~internal]) <= 2.0 ** -17)
    assert abs(back.base_score - f.base_score) <= 2.0 ** -17


def test_requantize_is_fixed_point():
    rng = np.random.default_rng(1)
    f = _forest([_stump(float(rng.uniform(-50, 50)), *rng.uniform(-1, 1, 2)) for _ in range(8)])
    q = quantize_forest(f)
    assert quantize_forest(dequantize(q)) == q


def test_overflow_detection():
    with pytest.raises(Overflow) as ei:
        quantize_forest(_forest([_stump(200.0)]))
    assert ei.value.kind == "feature" and ei.value.node == 0
    with pytest.raises(Overflow) as ei:
        quantize_forest(_forest([_stump(0.0, hi=40000.0)]))
    assert ei.value.kind == "leaf" and ei.value.node == 2
    # one LSB past the edge saturates silently
    q = quantize_forest(_forest([_stump(32768 / 256)]))
    assert q.threshold_q[0] == 32767


def test_too_many_nodes():
    big = Tree(np.full(MAX_NODES + 1, LEAF), np.zeros(MAX_NODES + 1), np.full(MAX_NODES + 1, -1),
               np.full(MAX_NODES + 1, -1), np.zeros(MAX_NODES + 1), np.zeros(MAX_NODES + 1))
    with pytest.raises(TooManyNodes):
        quantize_forest(_forest([big]))


@pytest.mark.parametrize("field,value", [
    ("left", -1), ("right", 0), ("feature", 7), ("leaf_q", 5),
])
def test_check_rejects_broken_structure(field, value):
    q = quantize_forest(_forest([_stump(0.5)]))
    arr = getattr(q, field)
    arr[0] = value
    with pytest.raises(StructuralError):
        q.check()


def test_check_rejects_leaf_with_children():
    q = quantize_forest(_forest([_stump(0.5)]))
    q.left[1] = 2
    with pytest.raises(StructuralError):
        q.check()


def test_check_rejects_shared_child():
    q = quantize_forest(_forest([_stump(0.5)]))
    q.right[0] = 1
    with pytest.raises(StructuralError):
        q.check()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_models_pass_check(seed):
    random_quant_forest(np.random.default_rng(seed)).check()


def test_parity_single_leaf():
    f = _forest([Tree.leaf(0.1234567)])
    rep = parity_report(f, quantize_forest(f), np.random.default_rng(0).normal(size=(50, 3)))
    assert rep.agreement == 1.0
    assert rep.max_abs_error <= 2.0 ** -17
    assert rep.n_rows == 50 and rep.n_disagree == 0


@pytest.fixture(scope="module")
def trained():
    d = generate_synthetic(SynthConfig(n_samples=6000, seed=3))
    tr, va = d.subset(range(5000)), d.subset(range(5000, 6000))
    return train(tr, va), feature_matrix(tr)


def test_parity_on_training_matrix(trained):
    f, X = trained
    rep = parity_report(f, quantize_forest(f), X)
    assert rep.agreement >= 0.995
    assert rep.max_abs_error <= 2.0 ** -10


def test_boundary_probe_disagreement_within_one_lsb(trained):
    """Rows placed on dequantized thresholds: any flip must sit within one LSB of a threshold."""
    f, X = trained
    q = quantize_forest(f)
    mean, std = np.asarray(q.scaler.mean), np.asarray(q.scaler.std)
    rng = np.random.default_rng(2)
    flipped = 0
    for k in range(400):
        t = f.trees[k % len(f.trees)]
        internal = np.flatnonzero(t.feature != LEAF)
        node = int(rng.choice(internal))
        feat = int(t.feature[node])
        z = X[int(rng.integers(len(X)))].copy()
        z = (z - mean) / std
        deq = q.threshold_q[q.roots[k % len(f.trees)] + node] / 256.0
        z[feat] = deq + rng.choice([-1, 0, 1]) * 2.0 ** -12
        x = z * std + mean
        float_label = f.raw_score(((x - mean) / std)[None])[0] >= 0
        qx = quantize_features(x, q.scaler, q.spec)
        quant_label = eval_quant(q, qx).label == 1
        if float_label != quant_label:
            flipped += 1
            zs = (x - mean) / std
            near = False
            for tt in f.trees:
                inner = tt.feature != LEAF
                d = np.abs(zs[tt.feature[inner]] - tt.threshold[inner])
                near = near or bool(np.any(d <= 2.0 ** -8))
            assert near


def test_feature_frac_bits_change_grid(trained):
    f, _ = trained
    q10 = quantize_forest(f, QuantSpec(10, 16))
    assert q10.threshold_q[0] == pytest.approx(4 * quantize_forest(f).threshold_q[0], abs=2)
