"""Integer-only forest evaluation, written the way the device runs it.

The engine walks the flat node arrays in place: no per-call containers, one
comparison per visited internal node, and a saturating 32-bit accumulator.
"""
from __future__ import annotations

import math
from typing import NamedTuple

from .errors import CorruptModel, DimensionMismatch, NonFiniteInput
from .features import ENV_MASK, differentials_from_env
from .quantize import I16_MAX, I16_MIN, I32_MAX, I32_MIN, LEAF_FEATURE, QuantForest, QuantSpec


class Decision(NamedTuple):
    label: int
    score_q: int

    def prob(self, leaf_frac_bits: int = 16) -> float:
        # host-side only; the device never evaluates the sigmoid
        z = self.score_q / float(1 << leaf_frac_bits)
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def quantize_features(diffs, scaler, spec: QuantSpec = QuantSpec()) -> tuple:
    """Standardize then round-half-even into saturated int16."""
    if len(diffs) != len(scaler.mean):
        raise DimensionMismatch(f"{len(diffs)} features, scaler has {len(scaler.mean)}")
    scale = 1 << spec.feature_frac_bits
    out = []
    for x, m, s in zip(diffs, scaler.mean, scaler.std):
        x = float(x)
        if not math.isfinite(x):
            raise NonFiniteInput(f"non-finite feature {x!r}")
        z = (x - m) / s
        if math.isinf(z):
            v = I16_MAX if z > 0 else I16_MIN
        else:
            v = round(z * scale)
        out.append(I16_MIN if v < I16_MIN else I16_MAX if v > I16_MAX else v)
    return tuple(out)


def prepare_features(env, scaler, spec: QuantSpec = QuantSpec(), mask=ENV_MASK, audio=None) -> tuple:
    """Raw (t_in, t_out, h_in, h_out, p_in, p_out) floats -> QuantFeatures."""
    if len(env) != 6:
        raise DimensionMismatch("expected six environmental readings")
    for v in env:
        if not math.isfinite(v):
            raise NonFiniteInput(f"non-finite reading {v!r}")
    if 3 in mask and audio is None:
        raise DimensionMismatch("model needs an audio feature")
    return quantize_features(differentials_from_env(env, audio, mask), scaler, spec)


def eval_quant(q: QuantForest, x, visit=None) -> Decision:
    """Score one quantized feature vector. `visit(node)` is a test hook."""
    feature, thr, left, right, leaf = q.feature, q.threshold_q, q.left, q.right, q.leaf_q
    roots = q.roots
    n_nodes = len(feature)
    n_feat = len(x)
    if n_feat != q.n_features:
        raise DimensionMismatch(f"{n_feat} features, model expects {q.n_features}")
    acc = q.base_q
    n_trees = len(roots)
    for t in range(n_trees):
        root = roots[t]
        end = roots[t + 1] if t + 1 < n_trees else n_nodes
        local = 0
        node = root
        while True:
            if node >= end:
                raise CorruptModel(f"node {node} outside tree {t}")
            f = feature[node]
            if f == LEAF_FEATURE:
                break
            if f >= n_feat:
                raise CorruptModel(f"node {node} reads feature {f}")
            if visit is not None:
                visit(node)
            child = left[node] if x[f] <= thr[node] else right[node]
            if child <= local:
                raise CorruptModel(f"node {node} links backwards")
            local = child
            node = root + child
        acc += leaf[node]
        if acc > I32_MAX:
            acc = I32_MAX
        elif acc < I32_MIN:
            acc = I32_MIN
    return Decision(1 if acc >= 0 else 0, acc)


def infer_sample(q: QuantForest, env, audio=None) -> Decision:
    return eval_quant(q, prepare_features(env, q.scaler, q.spec, q.feature_mask, audio))
