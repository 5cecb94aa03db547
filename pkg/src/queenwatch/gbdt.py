"""Histogram-based gradient boosted trees for the binary queen-presence task.

Trees are grown leaf-wise (best gain first) on quantile-binned, standardized
features. Split thresholds can be snapped to a fixed-point lattice so that the
float model and its integer lowering take identical branches.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import EmptyForest, EmptySplit, SingleClass, DimensionMismatch, TrainingError
from .features import (
    ENV_MASK,
    FEATURE_NAMES,
    FeatureVector,
    ScalerParams,
    apply_scaler,
    feature_matrix,
    fit_scaler,
)

LEAF = -1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    max_leaves: int = 31
    max_rounds: int = 200
    min_samples_leaf: int = 20
    l2_lambda: float = 0.0
    patience: int = 10
    n_bins: int = 255
    class_weighting: str = "balanced"
    seed: int = 0
    min_child_weight: float = 1e-3
    # None disables lattice snapping of split thresholds
    threshold_frac_bits: Optional[int] = 8
    bin_sample_size: int = 200_000
    # stop adding trees once the serialized fixed-point model would exceed this
    max_model_bytes: Optional[int] = 10240

    def validate(self):
        if self.max_leaves < 2:
            raise TrainingError("max_leaves must be >= 2")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if not 2 <= self.n_bins <= 255:
            raise TrainingError("n_bins must lie in [2, 255]")
        if self.l2_lambda < 0:
            raise TrainingError("l2_lambda must be >= 0")
        if self.class_weighting not in ("none", "balanced"):
            raise TrainingError(f"unknown class_weighting {self.class_weighting!r}")
        if self.max_rounds < 0 or self.min_samples_leaf < 1:
            raise TrainingError("max_rounds must be >= 0 and min_samples_leaf >= 1")


def model_bytes(n_features: int, n_trees: int, n_nodes: int) -> int:
    """Size of the serialized QBF1 blob: header, scaler, quant, tree table, nodes, CRC."""
    return 12 + 8 * n_features + 2 + 2 + 2 * n_trees + 10 * n_nodes + 4


# --- loss -------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def logistic_grad_hess(raw_score, label, weight=1.0):
    """Gradient and hessian of the weighted binary cross-entropy w.r.t. the raw score."""
    raw = np.asarray(raw_score, dtype=float)
    y = np.asarray(label)
    w = np.asarray(weight, dtype=float)
    p = sigmoid(raw)
    q = sigmoid(-raw)  # 1 - p without cancellation
    g = w * np.where(y == 1, -q, p)
    h = w * p * q
    if g.ndim == 0:
        return float(g), float(h)
    return g, h


def log_loss(raw_score, label, weight=None, *, reduce="mean"):
    raw = np.asarray(raw_score, dtype=float)
    y = np.asarray(label)
    per = np.logaddexp(0.0, np.where(y == 1, -raw, raw))
    w = np.ones_like(per) if weight is None else np.broadcast_to(np.asarray(weight, float), per.shape)
    total = float(np.sum(w * per))
    return total / float(np.sum(w)) if reduce == "mean" else total


def class_weights(labels) -> tuple:
    """Balanced weights N / (2 * N_c) for classes 0 and 1."""
    y = np.asarray(labels)
    n = y.size
    n1 = int(np.count_nonzero(y == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise SingleClass("both classes are required for class weighting")
    return n / (2.0 * n0), n / (2.0 * n1)


# --- binning ------------------------------------------------------------------

def snap_to_lattice(values, frac_bits):
    """Nearest points of the form (2m + 0.5) / 2**frac_bits."""
    scale = float(1 << frac_bits)
    m = np.round((np.asarray(values, float) * scale - 0.5) / 2.0)
    return (2.0 * m + 0.5) / scale


@dataclass(frozen=True)
class BinMapper:
    cuts: tuple  # per feature: ascending cut points; bin b holds cuts[b-1] < x <= cuts[b]

    @property
    def n_bins(self) -> int:
        return max(len(c) for c in self.cuts) + 1

    def transform(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        out = np.empty(Z.shape, dtype=np.uint8)
        for f, cuts in enumerate(self.cuts):
            out[:, f] = np.searchsorted(cuts, Z[:, f], side="left")
        return out


def fit_bins(Z, n_bins=255, frac_bits=8, seed=0, sample_size=200_000) -> BinMapper:
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] > sample_size:
        rng = np.random.default_rng(seed)
        Z = Z[np.sort(rng.choice(Z.shape[0], sample_size, replace=False))]
    cuts = []
    for f in range(Z.shape[1]):
        vals = np.unique(Z[:, f])
        if vals.size <= n_bins:
            cand = (vals[:-1] + vals[1:]) / 2.0
        else:
            cand = np.unique(np.quantile(Z[:, f], np.linspace(0.0, 1.0, n_bins + 1)[1:-1]))
        if frac_bits is not None:
            cand = np.unique(snap_to_lattice(cand, frac_bits))
            limit = (32767 - 1) / float(1 << frac_bits)
            cand = cand[np.abs(cand) <= limit]
        cuts.append(np.asarray(cand[: n_bins - 1], dtype=float))
    return BinMapper(tuple(cuts))


# --- split search -------------------------------------------------------------

class SplitCandidate(NamedTuple):
    feature: int
    bin: int
    gain: float
    g_left: float
    h_left: float
    n_left: int
    g_right: float
    h_right: float
    n_right: int


def split_gain(g_left, h_left, g_right, h_right, lam=0.0):
    g, h = g_left + g_right, h_left + h_right
    return 0.5 * (g_left ** 2 / (h_left + lam) + g_right ** 2 / (h_right + lam) - g ** 2 / (h + lam))


def best_split(node_samples, grads, hessians, binned, cfg: TrainConfig, n_bins=None):
    """Best (feature, bin boundary) for a node, or None.

    Boundary b sends bins <= b left. Ties go to the lowest feature, then the
    lowest bin.
    """
    idx = np.asarray(node_samples)
    msl = max(1, cfg.min_samples_leaf)
    if idx.size < 2 * msl:
        return None
    sub = np.asarray(binned)[idx]
    m, d = sub.shape
    B = int(n_bins) if n_bins is not None else int(sub.max()) + 1
    if B < 2:
        return None
    g = np.asarray(grads, dtype=float)[idx]
    h = np.asarray(hessians, dtype=float)[idx]

    flat = (sub.astype(np.intp) + np.arange(d, dtype=np.intp) * B).ravel()
    G = np.bincount(flat, weights=np.repeat(g, d), minlength=d * B).reshape(d, B)
    H = np.bincount(flat, weights=np.repeat(h, d), minlength=d * B).reshape(d, B)
    C = np.bincount(flat, minlength=d * B).reshape(d, B)

    GL = np.cumsum(G, axis=1)[:, :-1]
    HL = np.cumsum(H, axis=1)[:, :-1]
    NL = np.cumsum(C, axis=1)[:, :-1]
    g_tot, h_tot = float(g.sum()), float(h.sum())
    GR = g_tot - GL
    HR = h_tot - HL
    NR = m - NL
    lam = cfg.l2_lambda

    valid = ((NL >= msl) & (NR >= msl)
             & (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
             & (HL + lam > 0) & (HR + lam > 0))
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - g_tot ** 2 / (h_tot + lam))
    gain = np.where(valid, gain, -np.inf)
    k = int(np.argmax(gain))  # first maximum: lowest feature, then lowest bin
    f, b = divmod(k, B - 1)
    best = float(gain[f, b])
    if not best > 0.0:
        return None
    return SplitCandidate(f, b, best, float(GL[f, b]), float(HL[f, b]), int(NL[f, b]),
                          float(GR[f, b]), float(HR[f, b]), int(NR[f, b]))


# --- trees --------------------------------------------------------------------

@dataclass(eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature == LEAF))

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):  # children always follow their parent
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        rows = np.arange(Z.shape[0])
        node = np.zeros(Z.shape[0], dtype=np.intp)
        for _ in range(self.n_nodes):
            f = self.feature[node]
            internal = f != LEAF
            if not internal.any():
                break
            x = Z[rows, np.where(internal, f, 0)]
            nxt = np.where(x <= self.threshold[node], self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return self.value[node]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["feature"], dtype=np.intp), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.intp), np.asarray(d["right"], dtype=np.intp),
                   np.asarray(d["value"], dtype=float), np.asarray(d["gain"], dtype=float))

    @classmethod
    def leaf(cls, value: float) -> "Tree":
        return cls(np.array([LEAF]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([float(value)]), np.array([0.0]))


def _leaf_value(G, H, cfg):
    denom = H + cfg.l2_lambda
    return 0.0 if denom <= 0 else -G / denom * cfg.learning_rate


def _grow(grads, hessians, binned, mapper: Optional[BinMapper], cfg: TrainConfig):
    grads = np.asarray(grads, dtype=float)
    hessians = np.asarray(hessians, dtype=float)
    binned = np.asarray(binned)
    n = grads.size
    B = mapper.n_bins if mapper is not None else int(binned.max(initial=0)) + 1

    feature, threshold, left, right, gain, sums = [LEAF], [0.0], [-1], [-1], [0.0], [None]
    members = {0: np.arange(n)}
    sums[0] = (float(grads.sum()), float(hessians.sum()))

    def candidate(node):
        if cfg.max_leaves < 2:
            return None
        return best_split(members[node], grads, hessians, binned, cfg, B)

    pending = {0: candidate(0)}
    n_leaves = 1
    while n_leaves < cfg.max_leaves:
        best_node, best = None, None
        for node in sorted(pending):
            c = pending[node]
            if c is not None and (best is None or c.gain > best.gain):
                best_node, best = node, c
        if best is None:
            break
        idx = members.pop(best_node)
        del pending[best_node]
        go_left = binned[idx, best.feature] <= best.bin
        li, ri = len(feature), len(feature) + 1
        for child, part, s in ((li, idx[go_left], (best.g_left, best.h_left)),
                               (ri, idx[~go_left], (best.g_right, best.h_right))):
            feature.append(LEAF)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            gain.append(0.0)
            sums.append(s)
            members[child] = part
        feature[best_node] = best.feature
        if mapper is not None:
            threshold[best_node] = float(mapper.cuts[best.feature][best.bin])
        else:
            threshold[best_node] = best.bin + 0.5
        left[best_node], right[best_node] = li, ri
        gain[best_node] = best.gain
        pending[li] = candidate(li)
        pending[ri] = candidate(ri)
        n_leaves += 1

    value = np.zeros(len(feature))
    leaf_of = np.empty(n, dtype=np.intp)
    for node, idx in members.items():
        # sums from the split search; recomputed directly for the root-only case
        G, H = sums[node]
        value[node] = _leaf_value(G, H, cfg)
        leaf_of[idx] = node
    tree = Tree(np.asarray(feature, dtype=np.intp), np.asarray(threshold, dtype=float),
                np.asarray(left, dtype=np.intp), np.asarray(right, dtype=np.intp),
                value, np.asarray(gain, dtype=float))
    return tree, leaf_of


def grow_tree(grads, hessians, binned, cfg: TrainConfig, mapper: Optional[BinMapper] = None) -> Tree:
    """Leaf-wise growth; leaves hold -G/(H+lambda) * learning_rate."""
    return _grow(grads, hessians, binned, mapper, cfg)[0]


# --- forest -------------------------------------------------------------------

@dataclass(eq=False)
class Forest:
    trees: list
    base_score: float
    scaler: ScalerParams
    feature_mask: tuple = ENV_MASK
    config: TrainConfig = field(default_factory=TrainConfig)
    history: tuple = ()

    @property
    def n_features(self) -> int:
        return len(self.feature_mask)

    @property
    def importance(self):
        """(split_count, total_gain) per active feature."""
        counts = np.zeros(self.n_features)
        gains = np.zeros(self.n_features)
        for t in self.trees:
            internal = t.feature != LEAF
            np.add.at(counts, t.feature[internal], 1)
            np.add.at(gains, t.feature[internal], t.gain[internal])
        return tuple(int(c) for c in counts), tuple(float(g) for g in gains)

    def raw_score(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = np.full(Z.shape[0], self.base_score)
        for t in self.trees:
            out += t.predict(Z)
        return out

    def to_dict(self):
        return {
            "format": "queenwatch-forest",
            "version": 1,
            "base_score": self.base_score,
            "feature_mask": list(self.feature_mask),
            "scaler": {"mean": list(self.scaler.mean), "std": list(self.scaler.std)},
            "config": asdict(self.config),
            "history": [list(h) for h in self.history],
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "queenwatch-forest":
            raise TrainingError("not a forest document")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            base_score=float(d["base_score"]),
            scaler=ScalerParams(tuple(d["scaler"]["mean"]), tuple(d["scaler"]["std"])),
            feature_mask=tuple(d["feature_mask"]),
            config=TrainConfig(**d["config"]),
            history=tuple(tuple(h) for h in d["history"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        return cls.from_dict(json.loads(text))

    def dump_text(self) -> str:
        """One node per line; debugging aid only."""
        lines = [f"base_score {self.base_score!r}",
                 "features " + ",".join(FEATURE_NAMES[i] for i in self.feature_mask)]
        for k, t in enumerate(self.trees):
            lines.append(f"tree {k}")
            for i in range(t.n_nodes):
                if t.feature[i] == LEAF:
                    lines.append(f"  {i} leaf {t.value[i]!r}")
                else:
                    lines.append(f"  {i} f{t.feature[i]} <= {t.threshold[i]!r} ? {t.left[i]} : {t.right[i]}")
        return "\n".join(lines) + "\n"


def train_arrays(X, y, Xv, yv, cfg: TrainConfig = TrainConfig(), mask=ENV_MASK) -> Forest:
    """Boost on unscaled differential matrices; early stopping on the validation pair."""
    cfg.validate()
    X = np.asarray(X, dtype=float)
    Xv = np.asarray(Xv, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    yv = np.asarray(yv, dtype=np.int64)
    if X.shape[0] == 0 or Xv.shape[0] == 0:
        raise EmptySplit("training and validation sets must be non-empty")
    if X.shape[1] != len(mask) or Xv.shape[1] != len(mask):
        raise DimensionMismatch("feature matrix does not match the feature mask")
    if np.unique(y).size < 2:
        raise SingleClass("training set has a single class")

    fitted = fit_scaler(X)
    # the exported model stores the scaler as f32; train against the same values
    scaler = ScalerParams(tuple(float(np.float32(m)) for m in fitted.mean),
                          tuple(float(np.float32(s)) for s in fitted.std))
    Z = apply_scaler(X, scaler)
    Zv = apply_scaler(Xv, scaler)
    cw = class_weights(y) if cfg.class_weighting == "balanced" else (1.0, 1.0)
    w = np.where(y == 1, cw[1], cw[0])
    wv = np.where(yv == 1, cw[1], cw[0])

    mapper = fit_bins(Z, cfg.n_bins, cfg.threshold_frac_bits, cfg.seed, cfg.bin_sample_size)
    binned = mapper.transform(Z)

    prior = float(np.sum(w * y) / np.sum(w))
    base = math.log(prior / (1.0 - prior))
    raw = np.full(y.size, base)
    raw_v = np.full(yv.size, base)

    best_loss = log_loss(raw_v, yv, wv)
    best_k = 0
    history = [(log_loss(raw, y, w, reduce="sum"), best_loss)]
    trees = []
    n_nodes = 0
    for r in range(cfg.max_rounds):
        g, h = logistic_grad_hess(raw, y, w)
        tree, leaf_of = _grow(g, h, binned, mapper, cfg)
        if (cfg.max_model_bytes is not None and
                model_bytes(len(mask), len(trees) + 1, n_nodes + tree.n_nodes) > cfg.max_model_bytes):
            break
        n_nodes += tree.n_nodes
        raw += tree.value[leaf_of]
        raw_v += tree.predict(Zv)
        trees.append(tree)
        loss = log_loss(raw_v, yv, wv)
        history.append((log_loss(raw, y, w, reduce="sum"), loss))
        if loss < best_loss:
            best_loss, best_k = loss, r + 1
        elif r + 1 - best_k >= cfg.patience:
            break
    return Forest(trees[:best_k], base, scaler, tuple(mask), cfg, tuple(history))


def train(train_ds, valid_ds, cfg: TrainConfig = TrainConfig(), mask=ENV_MASK) -> Forest:
    if len(train_ds) == 0 or len(valid_ds) == 0:
        raise EmptySplit("training and validation sets must be non-empty")
    return train_arrays(feature_matrix(train_ds, mask), train_ds.labels,
                        feature_matrix(valid_ds, mask), valid_ds.labels, cfg, mask)


def predict(forest: Forest, v, scaled: bool = False):
    """(raw, prob) for one vector or arrays of them for a matrix."""
    if isinstance(v, FeatureVector):
        if tuple(v.mask) != tuple(forest.feature_mask):
            raise DimensionMismatch(f"vector mask {v.mask} != forest mask {forest.feature_mask}")
        v = v.values
    X = np.asarray(v, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != forest.n_features:
        raise DimensionMismatch(f"{X.shape[1]} features, forest expects {forest.n_features}")
    Z = X if scaled else apply_scaler(X, forest.scaler)
    raw = forest.raw_score(Z)
    prob = sigmoid(raw)
    if single:
        return float(raw[0]), float(np.asarray(prob).ravel()[0])
    return raw, np.asarray(prob)


def feature_importance(forest: Forest, kind: str = "gain") -> np.ndarray:
    counts, gains = forest.importance
    vals = np.asarray(counts if kind == "split" else gains, dtype=float)
    if kind not in ("split", "gain"):
        raise ValueError(f"unknown importance kind {kind!r}")
    if not forest.trees or sum(counts) == 0:
        raise EmptyForest("forest has no splits")
    total = vals.sum()
    if not total > 0:
        raise EmptyForest("forest splits carry no gain")
    return vals / total


def with_trees(forest: Forest, trees) -> Forest:
    return replace(forest, trees=list(trees))
