"""Classification metrics, percentile bootstrap and hypothesis tests."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.stats import rankdata

from ._validation import resolve_threads
from .exceptions import (
    BootstrapDegenerate,
    DataError,
    DegenerateDifferences,
    DegenerateLabels,
    ShapeError,
)

__all__ = [
    "MetricEntry",
    "auroc",
    "balanced_accuracy",
    "bootstrap_ci",
    "cv_summary",
    "f1_scores",
    "multiclass_auroc",
    "paired_t_test",
    "sensitivity",
    "welch_t_test",
    "wilcoxon_signed_rank",
]


def _labels_pair(y_true, y_pred):
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    if y_true.size == 0:
        raise DataError("empty input")
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"y_true has {y_true.size} entries, y_pred has {y_pred.size}")
    return y_true, y_pred


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = _labels_pair(y_true, y_pred)
    classes = np.unique(y_true)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in classes]
    return float(np.mean(recalls))


def sensitivity(y_true, y_pred, positive=1) -> float:
    """True-positive rate of the ``positive`` class."""
    y_true, y_pred = _labels_pair(y_true, y_pred)
    mask = y_true == positive
    if not mask.any():
        raise DegenerateLabels(f"no samples of positive class {positive!r}")
    return float(np.mean(y_pred[mask] == positive))


def f1_scores(y_true, y_pred, labels=None):
    """Return ``(weighted_f1, macro_f1, per_class_f1)``.

    Classes are the union of true and predicted labels unless ``labels`` is
    given. A class with zero precision and recall denominator scores 0.
    Weights are true-class supports.
    """
    y_true, y_pred = _labels_pair(y_true, y_pred)
    if labels is None:
        labels = np.union1d(y_true, y_pred)
    per_class, support = [], []
    for c in labels:
        tp = np.sum((y_true == c) & (y_pred == c))
        fp = np.sum((y_true != c) & (y_pred == c))
        fn = np.sum((y_true == c) & (y_pred != c))
        denom = 2 * tp + fp + fn
        per_class.append(0.0 if denom == 0 else 2.0 * tp / denom)
        support.append(tp + fn)
    per_class = np.asarray(per_class, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    weighted = float(np.sum(per_class * support) / support.sum())
    return weighted, float(per_class.mean()), per_class.tolist()


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    pos = labels.astype(bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auroc(prob_matrix, labels) -> float:
    """Macro average of one-vs-rest AUROCs; every class must be present."""
    probs = np.asarray(prob_matrix, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ShapeError("prob_matrix must be n x C with one row per label")
    C = probs.shape[1]
    if C < 2:
        raise DegenerateLabels("need at least two classes")
    present = np.zeros(C, dtype=bool)
    present[labels] = True
    if not present.all():
        raise DegenerateLabels(f"classes {np.flatnonzero(~present).tolist()} absent from labels")
    return float(np.mean([auroc(probs[:, c], labels == c) for c in range(C)]))


@dataclass(frozen=True)
class MetricEntry:
    point: float
    ci_lo: float
    ci_hi: float
    n_boot: int
    seed: int
    n_retries: int = 0

    def to_dict(self):
        return asdict(self)


def _replicate(metric, arrays, n, seed, i, max_retries):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
    for attempt in range(max_retries + 1):
        idx = rng.integers(0, n, size=n)
        try:
            return float(metric(*(a[idx] for a in arrays))), attempt
        except DataError:
            continue
    raise BootstrapDegenerate(
        f"bootstrap replicate {i} stayed degenerate after {max_retries} retries"
    )


def bootstrap_ci(metric, *arrays, n_boot=1000, seed=42, alpha=0.05, max_retries=100, threads=1):
    """Percentile bootstrap over rows shared by ``arrays``.

    Replicate ``i`` draws from its own RNG stream keyed on ``(seed, i)``, so
    the result is identical for any ``threads``. Resamples on which
    ``metric`` raises a :class:`DataError` (e.g. a single-class draw for
    AUROC) are redrawn up to ``max_retries`` times.
    """
    arrays = [np.asarray(a) for a in arrays]
    if not arrays:
        raise DataError("no data to resample")
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ShapeError("all arrays must share the first dimension")
    if n < 2:
        raise DataError("bootstrap needs at least two rows")
    point = float(metric(*arrays))

    def work(i):
        return _replicate(metric, arrays, n, seed, i, max_retries)

    threads = resolve_threads(threads)
    if threads == 1:
        out = [work(i) for i in range(n_boot)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(work, range(n_boot)))
    reps = np.array([v for v, _ in out])
    retries = sum(r for _, r in out)
    lo, hi = np.percentile(reps, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return MetricEntry(point, float(lo), float(hi), int(n_boot), int(seed), int(retries))


def cv_summary(values, z=1.96):
    """Fold aggregation: ``(mean, mean - z*SD/sqrt(N), mean + z*SD/sqrt(N))``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise DataError("need at least two folds")
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    return mean, mean - z * se, mean + z * se


def _t_pvalue(t, df, alternative):
    if alternative == "two-sided":
        return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    if alternative == "greater":
        return float(stats.t.sf(t, df))
    if alternative == "less":
        return float(stats.t.cdf(t, df))
    raise ValueError(f"unknown alternative {alternative!r}")


def _degenerate_t(diff, alternative):
    # zero standard error: either no difference at all or an infinite statistic
    if diff == 0:
        return 0.0, 1.0 if alternative == "two-sided" else 0.5
    t = math.copysign(math.inf, diff)
    if alternative == "two-sided":
        return t, 0.0
    return t, float((alternative == "greater") != (diff > 0))


def welch_t_test(a, b, alternative="two-sided"):
    """Unequal-variance t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise DataError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        return _degenerate_t(diff, alternative)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), _t_pvalue(t, df, alternative)


def paired_t_test(a, b, alternative="two-sided"):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("paired samples must have equal length")
    if a.size < 2:
        raise DataError("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        return _degenerate_t(d.mean(), alternative)
    t = d.mean() / (sd / math.sqrt(d.size))
    return float(t), _t_pvalue(t, d.size - 1, alternative)


def _signed_rank_null(doubled_ranks):
    """Exact null distribution of the doubled positive-rank sum."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = 0.5 * (dist + shifted)
    return dist


def wilcoxon_signed_rank(a, b=None, alternative="two-sided", exact_max_n=25):
    """Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped and tied magnitudes get midranks. Returns
    ``(W, p)`` with ``W`` the sum of ranks of positive differences;
    ``alternative="greater"`` tests whether ``a`` tends to exceed ``b``.
    For ``n <= exact_max_n`` the p-value comes from the exact (conditional)
    permutation distribution, otherwise from a normal approximation with
    tie and continuity corrections.
    """
    d = np.asarray(a, dtype=np.float64).ravel()
    if b is not None:
        b = np.asarray(b, dtype=np.float64).ravel()
        if b.shape != d.shape:
            raise ShapeError("paired samples must have equal length")
        d = d - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateDifferences("all paired differences are zero")
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())

    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        dist = _signed_rank_null(doubled)
        obs = int(round(2 * w_plus))
        upper = float(dist[obs:].sum())
        lower = float(dist[: obs + 1].sum())
        if alternative == "greater":
            p = upper
        elif alternative == "less":
            p = lower
        elif alternative == "two-sided":
            p = min(1.0, 2.0 * min(upper, lower))
        else:
            raise ValueError(f"unknown alternative {alternative!r}")
        return w_plus, float(p)

    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    sd = math.sqrt(var)
    if alternative == "greater":
        p = stats.norm.sf((w_plus - mean - 0.5) / sd)
    elif alternative == "less":
        p = stats.norm.cdf((w_plus - mean + 0.5) / sd)
    elif alternative == "two-sided":
        z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
        p = min(1.0, 2.0 * stats.norm.sf(z))
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return w_plus, float(p)
