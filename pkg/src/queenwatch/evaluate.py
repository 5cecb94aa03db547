"""Experiment harness: stratified splits, cross-validation, reports, ablations, energy."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import ClassTooSmall, LengthMismatch, SingleClass, TooSmall
from .features import ENV_MASK, feature_matrix, mask_label, parse_mask
from .gbdt import Forest, TrainConfig, log_loss, class_weights, train_arrays

DEFAULT_SUBSETS = ("t", "h", "p", "t,h", "t,p", "h,p", "t,h,p", "t,h,p,a")


def _labels(d):
    return d.labels if hasattr(d, "labels") else np.asarray(d)


def _class_indices(y, rng):
    out = []
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        out.append(idx)
    return out


def split_indices(y, test_fraction: float = 0.2, seed: int = 0):
    y = np.asarray(y)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if np.unique(y).size < 2:
        raise SingleClass("stratified split needs both classes")
    rng = np.random.default_rng(seed)
    per_class = _class_indices(y, rng)
    exact = [test_fraction * len(ix) for ix in per_class]
    n_test = [math.floor(e) for e in exact]
    # largest remainder, ties to the lower class label
    total = math.floor(test_fraction * y.size + 0.5)
    order = sorted(range(2), key=lambda c: (-(exact[c] - n_test[c]), c))
    for c in order:
        if sum(n_test) >= total:
            break
        n_test[c] += 1
    train = np.concatenate([ix[k:] for ix, k in zip(per_class, n_test)])
    test = np.concatenate([ix[:k] for ix, k in zip(per_class, n_test)])
    if train.size == 0 or test.size == 0:
        raise TooSmall("split leaves one side empty")
    return np.sort(train), np.sort(test)


def stratified_split(d, test_fraction: float = 0.2, seed: int = 0):
    train, test = split_indices(_labels(d), test_fraction, seed)
    return d.subset(train), d.subset(test)


def kfold_indices(y, k: int = 5, seed: int = 0):
    y = np.asarray(y)
    n = y.size
    if k < 2 or k > n:
        raise ClassTooSmall(f"k={k} is invalid for {n} samples")
    counts = [int(np.count_nonzero(y == c)) for c in (0, 1)]
    # leave-one-out (k == n) is allowed even though classes are smaller than k
    if k < n and min(counts) < k:
        raise ClassTooSmall(f"class sizes {counts} are smaller than k={k}")
    rng = np.random.default_rng(seed)
    order = np.concatenate(_class_indices(y, rng))
    fold_of = np.empty(n, dtype=np.intp)
    fold_of[order] = np.arange(n) % k
    folds = []
    for f in range(k):
        valid = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, valid))
    return folds


def stratified_kfold(d, k: int = 5, seed: int = 0):
    return [(d.subset(tr), d.subset(va)) for tr, va in kfold_indices(_labels(d), k, seed)]


# --- classification report ----------------------------------------------------

@dataclass(frozen=True)
class ClassReport:
    tn: int
    fp: int
    fn: int
    tp: int
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    accuracy: float
    macro: tuple          # (precision, recall, f1)
    weighted: tuple
    zero_division: bool = False

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def confusion(self) -> np.ndarray:
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])

    def render(self, digits: int = 2) -> str:
        lines = [f"{'':>12} {'precision':>9} {'recall':>9} {'f1-score':>9} {'support':>9}", ""]
        for c in (0, 1):
            lines.append(f"{c:>12} {self.precision[c]:>9.{digits}f} {self.recall[c]:>9.{digits}f}"
                         f" {self.f1[c]:>9.{digits}f} {self.support[c]:>9d}")
        lines.append("")
        lines.append(f"{'accuracy':>12} {'':>9} {'':>9} {self.accuracy:>9.{digits}f} {self.total:>9d}")
        for name, agg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(f"{name:>12} {agg[0]:>9.{digits}f} {agg[1]:>9.{digits}f}"
                         f" {agg[2]:>9.{digits}f} {self.total:>9d}")
        return "\n".join(lines) + "\n"


def _ratio(a, b):
    return (a / b, False) if b else (0.0, True)


def classification_report(truth, pred) -> ClassReport:
    t = np.asarray(truth)
    p = np.asarray(pred)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} labels vs {p.size} predictions")
    if t.size == 0:
        raise LengthMismatch("empty label sequence")
    tp = int(np.count_nonzero((t == 1) & (p == 1)))
    tn = int(np.count_nonzero((t == 0) & (p == 0)))
    fp = int(np.count_nonzero((t == 0) & (p == 1)))
    fn = int(np.count_nonzero((t == 1) & (p == 0)))
    zero = False
    prec, rec, f1 = [], [], []
    for hit, false_pos, false_neg in ((tn, fn, fp), (tp, fp, fn)):
        pr, z1 = _ratio(hit, hit + false_pos)
        rc, z2 = _ratio(hit, hit + false_neg)
        f, z3 = _ratio(2 * pr * rc, pr + rc)
        zero = zero or z1 or z2 or z3
        prec.append(pr)
        rec.append(rc)
        f1.append(f)
    support = (tn + fp, tp + fn)
    n = t.size
    macro = tuple(float(np.mean(m)) for m in (prec, rec, f1))
    weighted = tuple(float((m[0] * support[0] + m[1] * support[1]) / n) for m in (prec, rec, f1))
    return ClassReport(tn, fp, fn, tp, tuple(prec), tuple(rec), tuple(f1), support,
                       (tp + tn) / n, macro, weighted, zero)


# --- training protocol --------------------------------------------------------

@dataclass
class CVResult:
    forest: Forest
    fold_accuracy: List[float]
    fold_loss: List[float]
    best_fold: int

    @property
    def val_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))


def decisions(forest: Forest, X) -> np.ndarray:
    Z = (np.asarray(X, float) - np.asarray(forest.scaler.mean)) / np.asarray(forest.scaler.std)
    return (forest.raw_score(Z) >= 0).astype(np.int64)


def fit_cv(X, y, cfg: TrainConfig, mask=ENV_MASK, k: int = 5, seed: int = 0) -> CVResult:
    """k-fold CV on the training portion; the fold model with lowest validation loss is kept."""
    best, best_loss, best_fold = None, math.inf, -1
    accs, losses = [], []
    for f, (tr, va) in enumerate(kfold_indices(y, k, seed)):
        forest = train_arrays(X[tr], y[tr], X[va], y[va], cfg, mask)
        Z = (X[va] - np.asarray(forest.scaler.mean)) / np.asarray(forest.scaler.std)
        raw = forest.raw_score(Z)
        cw = class_weights(y[tr]) if cfg.class_weighting == "balanced" else (1.0, 1.0)
        loss = log_loss(raw, y[va], np.where(y[va] == 1, cw[1], cw[0]))
        accs.append(float(np.mean((raw >= 0) == y[va])))
        losses.append(loss)
        if loss < best_loss:
            best, best_loss, best_fold = forest, loss, f
    return CVResult(best, accs, losses, best_fold)


# --- ablation -----------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    subset: tuple
    val_mean: float
    val_std: float
    test_mean: float
    test_std: float
    n_seeds: int
    val_runs: tuple = field(default=(), compare=False)
    test_runs: tuple = field(default=(), compare=False)

    @property
    def label(self) -> str:
        return mask_label(self.subset)


def _ablation_run(args):
    X, y, mask, cfg, seed, test_fraction, cv_folds = args
    tr, te = split_indices(y, test_fraction, seed)
    cfg = replace(cfg, seed=seed)
    cv = fit_cv(X[tr], y[tr], cfg, mask, cv_folds, seed)
    test_acc = float(np.mean(decisions(cv.forest, X[te]) == y[te]))
    return cv.val_accuracy, test_acc


def run_ablation(d, subsets: Sequence = DEFAULT_SUBSETS, cfg: TrainConfig = TrainConfig(),
                 n_seeds: int = 10, *, test_fraction: float = 0.2, cv_folds: int = 5,
                 seeds: Optional[Sequence[int]] = None, n_jobs: int = 1) -> List[AblationRow]:
    """Per subset and seed: re-split, CV-train with early stopping, score on the test split."""
    masks = [parse_mask(s) for s in subsets]
    if not masks:
        raise ValueError("no feature subsets given")
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    y = _labels(d)
    jobs = []
    for mask in masks:
        X = feature_matrix(d, mask)
        jobs.extend((X, y, mask, cfg, s, test_fraction, cv_folds) for s in seeds)
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_ablation_run, jobs))
    else:
        results = [_ablation_run(j) for j in jobs]
    rows = []
    for i, mask in enumerate(masks):
        chunk = results[i * len(seeds): (i + 1) * len(seeds)]
        val = np.array([r[0] for r in chunk])
        test = np.array([r[1] for r in chunk])
        rows.append(AblationRow(mask, float(val.mean()), float(val.std()), float(test.mean()),
                                float(test.std()), len(seeds), tuple(val), tuple(test)))
    return rows


_ROW_NAMES = {
    (0,): "Temperature", (1,): "Humidity", (2,): "Pressure",
    (0, 1): "Temp + Humidity", (0, 2): "Temp + Pressure", (1, 2): "Humidity + Pressure",
    (0, 1, 2): "All-Environmental", (0, 1, 2, 3): "Environmental + audio",
}


def subset_name(mask) -> str:
    return _ROW_NAMES.get(tuple(mask), mask_label(mask))


def render_ablation(rows, fmt: str = "text") -> str:
    if fmt == "rows":
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["feature_set", "subset", "n_seeds", "val_mean", "val_std", "test_mean", "test_std"])
        for r in rows:
            w.writerow([subset_name(r.subset), mask_label(r.subset), r.n_seeds,
                        f"{100 * r.val_mean:.4f}", f"{100 * r.val_std:.4f}",
                        f"{100 * r.test_mean:.4f}", f"{100 * r.test_std:.4f}"])
        return buf.getvalue()
    header = f"{'Feature Set':<24}{'Val. Accuracy (%)':>20}{'Test Accuracy (%)':>20}"
    lines = [header, "-" * len(header)]
    for r in rows:
        val = f"{100 * r.val_mean:.1f} ± {100 * r.val_std:.1f}"
        test = f"{100 * r.test_mean:.1f} ± {100 * r.test_std:.1f}"
        lines.append(f"{subset_name(r.subset):<24}{val:>20}{test:>20}")
    return "\n".join(lines) + "\n"


# --- energy -------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyModel:
    voltage_v: float
    power_mw: float
    time_s: float

    def __post_init__(self):
        if not (self.voltage_v > 0 and self.power_mw > 0 and self.time_s > 0):
            raise ValueError("energy model fields must be positive")

    @property
    def current_ma(self) -> float:
        return self.power_mw / self.voltage_v


def estimate_energy(m: EnergyModel) -> float:
    """Energy per inference in mJ (mW x s)."""
    return m.power_mw * m.time_s


# The two figures a reader meets for the same board: 44.5 mW over a 2.2 s
# inference, and a 92.4 mW ceiling with 6.45 mJ per inference. They are not
# reconciled here; each is kept as its own preset.
ENERGY_PRESETS = {
    "paper-48mhz": EnergyModel(voltage_v=3.3, power_mw=44.5, time_s=2.2),
    "table3-max": EnergyModel(voltage_v=3.3, power_mw=92.4, time_s=6.45 / 92.4),
}
