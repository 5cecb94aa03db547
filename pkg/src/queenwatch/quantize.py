"""Fixed-point lowering of a float forest into a flat structure-of-arrays model.

Features and thresholds share Q(15-f).f in int16, leaves and the base score use
Q(31-l).l in int32. Rounding is half-to-even everywhere.
"""
from __future__ import annotations

import struct
from array import array
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import Overflow, StructuralError, TooManyNodes
from .features import ScalerParams, mask_to_bits
from .gbdt import LEAF, Forest, Tree, TrainConfig

LEAF_FEATURE = 0xFF
NO_CHILD = -1
MAX_NODES = 65535

I16_MIN, I16_MAX = -(1 << 15), (1 << 15) - 1
I32_MIN, I32_MAX = -(1 << 31), (1 << 31) - 1


@dataclass(frozen=True)
class QuantSpec:
    feature_frac_bits: int = 8
    leaf_frac_bits: int = 16

    def __post_init__(self):
        if not 4 <= self.feature_frac_bits <= 12:
            raise ValueError("feature_frac_bits must lie in [4, 12]")
        if not 8 <= self.leaf_frac_bits <= 24:
            raise ValueError("leaf_frac_bits must lie in [8, 24]")

    @property
    def feature_scale(self) -> float:
        return float(1 << self.feature_frac_bits)

    @property
    def leaf_scale(self) -> float:
        return float(1 << self.leaf_frac_bits)


def to_fixed(x: float, frac_bits: int, lo: int, hi: int) -> int:
    """round_half_even(x * 2**frac_bits), saturated to [lo, hi]."""
    if x != x:
        raise ValueError("NaN has no fixed-point value")
    if x in (float("inf"), float("-inf")):
        return hi if x > 0 else lo
    v = round(x * (1 << frac_bits))
    return lo if v < lo else hi if v > hi else v


def _checked(x, frac_bits, lo, hi, kind, node):
    v = round(x * (1 << frac_bits))
    if v > hi + 1 or v < lo - 1:
        raise Overflow(kind, node)
    return min(max(v, lo), hi)


def round_f32(x: float) -> float:
    return struct.unpack("<f", struct.pack("<f", x))[0]


@dataclass(frozen=True, eq=True)
class QuantForest:
    feature: array            # 'B', 0xFF marks a leaf
    threshold_q: array        # 'h'
    left: array               # 'h', relative to the tree root, -1 for leaves
    right: array              # 'h'
    leaf_q: array             # 'i'
    roots: array              # 'H', absolute node offset of each tree
    scaler: ScalerParams
    base_q: int = 0
    spec: QuantSpec = field(default_factory=QuantSpec)
    feature_mask: tuple = (0, 1, 2)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    @property
    def n_features(self) -> int:
        return len(self.feature_mask)

    def tree_bounds(self, t: int):
        end = self.roots[t + 1] if t + 1 < len(self.roots) else len(self.feature)
        return self.roots[t], end

    def check(self):
        """Raise StructuralError unless every structural invariant holds."""
        n = len(self.feature)
        if not (len(self.threshold_q) == len(self.left) == len(self.right) == len(self.leaf_q) == n):
            raise StructuralError("node arrays differ in length")
        if n > MAX_NODES:
            raise TooManyNodes(f"{n} nodes > {MAX_NODES}")
        if len(self.scaler) != self.n_features:
            raise StructuralError("scaler width does not match feature count")
        if self.n_trees == 0:
            if n:
                raise StructuralError("nodes present without trees")
            return
        if self.roots[0] != 0:
            raise StructuralError("first tree must start at node 0")
        for t in range(self.n_trees):
            start, end = self.tree_bounds(t)
            if end <= start:
                raise StructuralError(f"tree {t} is empty or roots are not increasing")
            size = end - start
            parents = [0] * size
            for local in range(size):
                i = start + local
                f = self.feature[i]
                if f == LEAF_FEATURE:
                    if self.left[i] != NO_CHILD or self.right[i] != NO_CHILD:
                        raise StructuralError(f"leaf {i} has children")
                    if self.threshold_q[i] != 0:
                        raise StructuralError(f"leaf {i} carries a threshold")
                    continue
                if f >= self.n_features:
                    raise StructuralError(f"node {i} uses feature {f} of {self.n_features}")
                if self.leaf_q[i] != 0:
                    raise StructuralError(f"internal node {i} carries a leaf value")
                for c in (self.left[i], self.right[i]):
                    if not local < c < size:
                        raise StructuralError(f"node {i} has out-of-order child {c}")
                    parents[c] += 1
            if parents[0] != 0 or any(p != 1 for p in parents[1:]):
                raise StructuralError(f"tree {t} is not a tree")


class ParityReport(NamedTuple):
    agreement: float
    max_abs_error: float
    n_rows: int
    n_disagree: int


def quantize_forest(f: Forest, spec: QuantSpec = QuantSpec()) -> QuantForest:
    fb, lb = spec.feature_frac_bits, spec.leaf_frac_bits
    feature, thr, left, right, leaf, roots = (array("B"), array("h"), array("h"), array("h"),
                                              array("i"), array("H"))
    total = sum(t.n_nodes for t in f.trees)
    if total > MAX_NODES:
        raise TooManyNodes(f"{total} nodes > {MAX_NODES}")
    for t in f.trees:
        base = len(feature)
        roots.append(base)
        for i in range(t.n_nodes):
            if t.feature[i] == LEAF:
                feature.append(LEAF_FEATURE)
                thr.append(0)
                left.append(NO_CHILD)
                right.append(NO_CHILD)
                leaf.append(_checked(float(t.value[i]), lb, I32_MIN, I32_MAX, "leaf", base + i))
            else:
                feature.append(int(t.feature[i]))
                thr.append(_checked(float(t.threshold[i]), fb, I16_MIN, I16_MAX, "feature", base + i))
                left.append(int(t.left[i]))
                right.append(int(t.right[i]))
                leaf.append(0)
    scaler = ScalerParams(tuple(round_f32(m) for m in f.scaler.mean),
                          tuple(round_f32(s) for s in f.scaler.std))
    base_q = _checked(float(f.base_score), lb, I32_MIN, I32_MAX, "leaf", -1)
    q = QuantForest(feature, thr, left, right, leaf, roots, scaler, base_q, spec, tuple(f.feature_mask))
    q.check()
    return q


def dequantize(q: QuantForest) -> Forest:
    fs, ls = q.spec.feature_scale, q.spec.leaf_scale
    trees = []
    for t in range(q.n_trees):
        start, end = q.tree_bounds(t)
        feat = np.array([LEAF if q.feature[i] == LEAF_FEATURE else q.feature[i] for i in range(start, end)])
        trees.append(Tree(
            feature=feat.astype(np.intp),
            threshold=np.array([q.threshold_q[i] / fs for i in range(start, end)]),
            left=np.array(q.left[start:end], dtype=np.intp),
            right=np.array(q.right[start:end], dtype=np.intp),
            value=np.array([q.leaf_q[i] / ls for i in range(start, end)]),
            gain=np.zeros(end - start),
        ))
    return Forest(trees, q.base_q / ls, q.scaler, q.feature_mask,
                  TrainConfig(threshold_frac_bits=q.spec.feature_frac_bits))


def feature_flags(q: QuantForest) -> int:
    return mask_to_bits(q.feature_mask)


def parity_report(f: Forest, q: QuantForest, X) -> ParityReport:
    """Compare float and fixed-point decisions on unscaled differential rows."""
    from .infer import eval_quant, quantize_features

    X = np.atleast_2d(np.asarray(X, dtype=float))
    raw = f.raw_score((X - np.asarray(f.scaler.mean)) / np.asarray(f.scaler.std))
    ls = q.spec.leaf_scale
    agree = 0
    max_err = 0.0
    for r in range(X.shape[0]):
        d = eval_quant(q, quantize_features(X[r], q.scaler, q.spec))
        agree += int((raw[r] >= 0) == (d.score_q >= 0))
        max_err = max(max_err, abs(raw[r] - d.score_q / ls))
    n = X.shape[0]
    return ParityReport(agree / n if n else 1.0, float(max_err), n, n - agree)
