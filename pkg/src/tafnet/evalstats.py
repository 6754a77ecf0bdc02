"""Cross-validation protocol and statistics: subject-level stratified folds,
rank AUC, sensitivity/F1, mean +/- population-std aggregation, exact
Wilcoxon signed-rank and Friedman tests, pooled ROC, and the stratified
learning-curve harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .core import Cohort, Rng
from .errors import (
    DataError,
    MetricUndefinedError,
    ParamError,
    TestUndefinedError,
)

EXACT_WILCOXON_LIMIT = 25


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_subjects: frozenset[str]
    val_subjects: frozenset[str]

    def __post_init__(self):
        if self.train_subjects & self.val_subjects:
            raise DataError(f"fold {self.fold_id}: train/val subjects overlap")


@dataclass(frozen=True)
class FoldResult:
    auc: float
    sensitivity: float
    f1: float
    scores: tuple

    def __post_init__(self):
        for name in ("auc", "sensitivity", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name}={v} outside [0, 1]")


def make_folds(cohort: Cohort, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Stratified subject-level k-fold: all pairs of a subject stay together,
    per-fold class counts are within one subject of an even split."""
    if k < 2:
        raise ParamError(f"k must be >= 2, got {k}")
    labels = cohort.subject_labels()
    rng = Rng(seed)
    fold_subjects: list[set[str]] = [set() for _ in range(k)]
    for cls in (1, 0):
        subjects = sorted(s for s, lbl in labels.items() if lbl == cls)
        if len(subjects) < k:
            raise DataError(
                f"class {cls} has {len(subjects)} subjects; need at least {k}"
            )
        order = rng.permutation(len(subjects))
        for pos, idx in enumerate(order):
            fold_subjects[pos % k].add(subjects[idx])
    all_subjects = set(labels)
    folds = []
    for fid in range(k):
        val = frozenset(fold_subjects[fid])
        folds.append(
            FoldSplit(fold_id=fid, train_subjects=frozenset(all_subjects - val),
                      val_subjects=val)
        )
    return folds


def _split_scores(scores):
    pairs = list(scores)
    if not pairs:
        raise MetricUndefinedError("no scores")
    values = np.array([float(s) for s, _ in pairs])
    labels = np.array([int(l) for _, l in pairs])
    return values, labels


def auc(scores) -> float:
    """Rank-based (Mann-Whitney) AUC with half credit for ties."""
    values, labels = _split_scores(scores)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC requires both classes present")
    ranks = rankdata(values)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC curve points (fpr, tpr, thresholds) from highest score down."""
    values, labels = _split_scores(scores)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("ROC requires both classes present")
    order = np.argsort(-values, kind="stable")
    sorted_vals = values[order]
    tp = np.cumsum(labels[order] == 1)
    fp = np.cumsum(labels[order] == 0)
    distinct = np.flatnonzero(np.diff(sorted_vals, append=-np.inf))
    fpr = np.concatenate([[0.0], fp[distinct] / n_neg])
    tpr = np.concatenate([[0.0], tp[distinct] / n_pos])
    thresholds = np.concatenate([[np.inf], sorted_vals[distinct]])
    return fpr, tpr, thresholds


def sensitivity_f1(scores, threshold: float = 0.5) -> tuple[float, float]:
    """Confusion-matrix sensitivity and F1 at `threshold` (predict >= threshold)."""
    values, labels = _split_scores(scores)
    if (labels == 1).sum() == 0:
        raise MetricUndefinedError("sensitivity undefined with zero positives")
    pred = values >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    sens = tp / (tp + fn)
    f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return float(sens), float(f1)


def aggregate(per_fold) -> tuple[float, float]:
    """Mean and population (n-divisor) standard deviation."""
    vals = np.asarray(list(per_fold), dtype=np.float64)
    if vals.size < 2:
        raise ParamError(f"aggregate needs >= 2 values, got {vals.size}")
    return float(vals.mean()), float(vals.std())


def _signed_rank_stat(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0.0]
    if d.size == 0:
        raise TestUndefinedError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    return w_plus, ranks, d.size


def _exact_tail_counts(ranks: np.ndarray) -> np.ndarray:
    """Counts of sign assignments per doubled-rank sum (DP convolution)."""
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts += shifted
    return counts


def wilcoxon_signed_rank(a, b, alternative: str = "greater") -> tuple[float, float]:
    """Signed-rank test; exact permutation p-value for n <= 25.

    Returns (W, p) where W is the positive-rank sum of a - b after dropping
    zero differences (midranks for ties). Larger n falls back to the normal
    approximation with tie correction.
    """
    if alternative not in ("greater", "less", "two-sided"):
        raise ParamError(f"unknown alternative {alternative!r}")
    w_plus, ranks, n = _signed_rank_stat(a, b)
    if n <= EXACT_WILCOXON_LIMIT:
        counts = _exact_tail_counts(ranks)
        total = 2.0**n
        w2 = int(np.rint(2.0 * w_plus))
        p_greater = counts[w2:].sum() / total
        p_less = counts[: w2 + 1].sum() / total
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = ((tie_counts**3 - tie_counts).sum()) / 48.0
        sd = np.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
        p_greater = float(norm.sf((w_plus - 0.5 - mean) / sd))
        p_less = float(norm.cdf((w_plus + 0.5 - mean) / sd))
    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    else:
        p = min(1.0, 2.0 * min(p_greater, p_less))
    return w_plus, float(p)


@dataclass(frozen=True)
class FriedmanResult:
    chi2: float
    chi2_tie_corrected: float
    mean_ranks: tuple[float, ...]
    degenerate: bool


def friedman(matrix) -> FriedmanResult:
    """Friedman test over a (folds x methods) matrix; rank 1 = best (largest).

    Returns the uncorrected chi-square, the tie-corrected variant, and the
    per-method mean ranks. Fully tied data yields chi2 = 0 with the
    degenerate flag set.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise ParamError(f"need a (>=2 folds) x (>=2 methods) matrix, got {m.shape}")
    n, k = m.shape
    ranks = np.vstack([rankdata(-row) for row in m])
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float((rank_sums**2).sum()) - 3.0 * n * (k + 1)
    tie_sum = 0.0
    for row in ranks:
        _, counts = np.unique(row, return_counts=True)
        tie_sum += float((counts**3 - counts).sum())
    correction = 1.0 - tie_sum / (n * (k**3 - k))
    degenerate = correction <= 0.0
    chi2_corr = 0.0 if degenerate else chi2 / correction
    if degenerate:
        chi2 = 0.0
    return FriedmanResult(
        chi2=float(chi2),
        chi2_tie_corrected=float(chi2_corr),
        mean_ranks=tuple(rank_sums / n),
        degenerate=degenerate,
    )


def pooled_roc(all_fold_scores) -> float:
    """AUC of the per-fold score lists concatenated into one pool."""
    pooled = [s for fold in all_fold_scores for s in fold]
    return auc(pooled)


def evaluate_scores(scores, threshold: float = 0.5) -> FoldResult:
    sens, f1 = sensitivity_f1(scores, threshold)
    return FoldResult(auc=auc(scores), sensitivity=sens, f1=f1, scores=tuple(scores))


def assert_no_leakage(fold: FoldSplit, train_pairs, val_pairs) -> None:
    train_subj = {p.subject_id for p in train_pairs}
    val_subj = {p.subject_id for p in val_pairs}
    if train_subj & val_subj:
        raise DataError(
            f"fold {fold.fold_id}: subject leakage {sorted(train_subj & val_subj)}"
        )


def run_cv_experiment(
    cohort: Cohort,
    features: dict[str, np.ndarray],
    model_kinds,
    cfg,
    k: int = 5,
    seed: int = 0,
    threshold: float = 0.5,
    lstm_hidden: int = 64,
) -> dict[str, list[FoldResult]]:
    """Train each model kind per fold on cached features and score its fold.

    Every fold asserts the subject-level leakage guard before training.
    """
    from dataclasses import replace

    from .trainer import build_pair_model, score_pairs, train_pair_head

    folds = make_folds(cohort, k=k, seed=seed)
    channels = next(iter(features.values())).shape[0]
    results: dict[str, list[FoldResult]] = {kind: [] for kind in model_kinds}
    for kind_index, kind in enumerate(model_kinds):
        for fold in folds:
            train_pairs = [p for p in cohort.pairs if p.subject_id in fold.train_subjects]
            val_pairs = [p for p in cohort.pairs if p.subject_id in fold.val_subjects]
            assert_no_leakage(fold, train_pairs, val_pairs)
            fold_seed = seed + 101 * kind_index + fold.fold_id
            model = build_pair_model(kind, channels, seed=fold_seed, lstm_hidden=lstm_hidden)
            train_pair_head(model, features, train_pairs, replace(cfg, seed=fold_seed))
            probs = score_pairs(model, features, val_pairs, cfg.batch_size)
            scored = list(zip(probs.tolist(), [p.label for p in val_pairs]))
            results[kind].append(evaluate_scores(scored, threshold))
    return results


@dataclass(frozen=True)
class LearningCurveCell:
    fraction: float
    interval: int
    model: str
    mean_auc: float
    std_auc: float
    n_pairs: int
    n_subjects: int
    absent: bool = False


def learning_curve(
    cohort: Cohort,
    features: dict[str, np.ndarray],
    fractions,
    intervals,
    model_kinds,
    cfg,
    k: int = 5,
    seed: int = 0,
) -> list[LearningCurveCell]:
    """Table 4-style harness: CV AUC per (training fraction, interval) cell.

    Fraction subsampling is subject-stratified and seeded; a cell whose
    subsample cannot sustain stratified k-fold CV is recorded as absent.
    The fraction-1.0 cell reuses the interval subset unchanged, so it equals
    the plain CV run at the same seed.
    """
    fractions = sorted(set(float(f) for f in fractions))
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ParamError(f"fractions must lie in (0, 1], got {fractions}")
    cells: list[LearningCurveCell] = []
    for interval in sorted(set(int(i) for i in intervals)):
        sub_pairs = tuple(p for p in cohort.pairs if p.interval_months == interval)
        for frac_index, fraction in enumerate(fractions):
            if not sub_pairs:
                cells.extend(
                    LearningCurveCell(fraction, interval, kind, float("nan"),
                                      float("nan"), 0, 0, absent=True)
                    for kind in model_kinds
                )
                continue
            sub_cohort = Cohort(sub_pairs)
            if fraction < 1.0:
                cell_rng = Rng(seed + 7919 * interval + frac_index)
                labels = sub_cohort.subject_labels()
                keep: list[str] = []
                for cls in (0, 1):
                    cls_subjects = sorted(s for s, l in labels.items() if l == cls)
                    n_keep = round(fraction * len(cls_subjects))
                    order = cell_rng.permutation(len(cls_subjects))
                    keep.extend(cls_subjects[i] for i in order[:n_keep])
                sub_cohort = sub_cohort.subset(keep)
            try:
                results = run_cv_experiment(
                    sub_cohort, features, model_kinds, cfg, k=k, seed=seed
                )
            except DataError:
                cells.extend(
                    LearningCurveCell(fraction, interval, kind, float("nan"),
                                      float("nan"), len(sub_cohort.pairs),
                                      len(sub_cohort.subjects), absent=True)
                    for kind in model_kinds
                )
                continue
            for kind in model_kinds:
                mean, std = aggregate([r.auc for r in results[kind]])
                cells.append(
                    LearningCurveCell(fraction, interval, kind, mean, std,
                                      len(sub_cohort.pairs), len(sub_cohort.subjects))
                )
    return cells
