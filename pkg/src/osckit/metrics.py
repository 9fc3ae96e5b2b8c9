"""Open-set evaluation: OSCR curves, CCR@FPR, AUROC, histograms.

Score matrices have exactly K columns (one per known class); rows with a
label tau <= K are known samples, rows with tau > K belong to the
negative/unknown population. Negative and unknown evaluations are never
pooled: callers pass one population at a time.

Thresholding follows the >= convention throughout: a sample passes a
threshold theta when its score is >= theta. Curve thresholds are the
observed score values themselves (plus a +inf sentinel), so unreachable
low-FPR regions emerge naturally instead of being interpolated away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFAULT_ZETAS",
    "OscrCurve",
    "ccr_fpr_at",
    "oscr_curve",
    "ccr_at_fpr",
    "auroc",
    "closed_set_accuracy",
    "score_histogram",
    "write_curve_csv",
    "read_curve_csv",
]

DEFAULT_ZETAS = (1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class OscrCurve:
    """Ordered OSCR points, sorted by FPR ascending, one point per distinct
    FPR (the max-CCR threshold is retained for ties).

    `min_finite_fpr` is the smallest FPR any real (finite) threshold
    attains; FPR targets below it cannot be reached by thresholding, which
    is what makes report cells empty.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    ccr: np.ndarray
    min_finite_fpr: float
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.fpr.size


def _split_populations(scores, labels):
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape[0] != labels.size:
        raise ValueError("scores and labels disagree on sample count")
    n_known_classes = scores.shape[1]
    known = labels <= n_known_classes
    if not np.any(known):
        raise ValueError("no known samples (tau <= K) in evaluation set")
    if not np.any(~known):
        raise ValueError("no negative/unknown samples (tau > K) in evaluation set")
    return scores, labels, known


def _curve_inputs(scores, labels):
    """Correct-class scores + correctness mask for knowns, max scores for
    the tau > K population."""
    scores, labels, known = _split_populations(scores, labels)
    known_scores = scores[known]
    known_labels = labels[known]
    correct = np.argmax(known_scores, axis=1) + 1 == known_labels
    correct_class_scores = known_scores[np.arange(known_scores.shape[0]), known_labels - 1]
    unknown_max = scores[~known].max(axis=1)
    return correct_class_scores, correct, unknown_max


def ccr_fpr_at(scores, labels, threshold):
    """(CCR, FPR) at one threshold, using >= comparisons.

    CCR counts known samples whose argmax equals the label and whose
    correct-class score passes the threshold; FPR counts tau > K samples
    whose maximum score passes it.
    """
    cc_scores, correct, unk_max = _curve_inputs(scores, labels)
    ccr = float(np.sum(correct & (cc_scores >= threshold)) / cc_scores.size)
    fpr = float(np.sum(unk_max >= threshold) / unk_max.size)
    return ccr, fpr


def oscr_curve(scores, labels, metadata=None):
    """OSCR curve over all observed score thresholds plus a +inf sentinel.

    Points are deduplicated to one per distinct FPR, keeping the maximum
    CCR (attained at the smallest threshold in the tie group).
    """
    cc_scores, correct, unk_max = _curve_inputs(scores, labels)
    n_k = cc_scores.size
    n_u = unk_max.size

    thresholds = np.unique(np.concatenate([cc_scores, unk_max]))  # ascending
    # counts of passing samples per threshold via sorted lookups
    sorted_correct = np.sort(cc_scores[correct])
    sorted_unk = np.sort(unk_max)
    ccr_vals = (sorted_correct.size - np.searchsorted(sorted_correct, thresholds, side="left")) / n_k
    fpr_vals = (n_u - np.searchsorted(sorted_unk, thresholds, side="left")) / n_u

    min_finite_fpr = float(fpr_vals[-1])  # highest real threshold

    # descending thresholds -> FPR ascending; append the +inf sentinel first
    thetas = np.concatenate([[np.inf], thresholds[::-1]])
    fprs = np.concatenate([[0.0], fpr_vals[::-1]])
    ccrs = np.concatenate([[0.0], ccr_vals[::-1]])

    # keep one point per distinct FPR: the last of each run has max CCR
    keep = np.ones(fprs.size, dtype=bool)
    keep[:-1] = fprs[1:] != fprs[:-1]
    return OscrCurve(
        thresholds=thetas[keep],
        fpr=fprs[keep],
        ccr=ccrs[keep],
        min_finite_fpr=min_finite_fpr,
        metadata=dict(metadata or {}),
    )


def ccr_at_fpr(curve, zetas=DEFAULT_ZETAS):
    """CCR at each FPR target, and the sum over reachable targets.

    A target zeta is reachable when some finite threshold attains an FPR
    at or below it (the curve extends that far left); the reported CCR is
    taken at the smallest achievable FPR at or above zeta. Unreachable
    targets yield None and contribute 0 to the sum.
    """
    values = []
    total = 0.0
    for zeta in zetas:
        if not 0.0 < zeta <= 1.0:
            raise ValueError(f"FPR target must be in (0, 1], got {zeta}")
        if curve.min_finite_fpr > zeta:
            values.append(None)
            continue
        idx = np.searchsorted(curve.fpr, zeta, side="left")
        # curve.fpr ends at 1.0, so idx is always in range for zeta <= 1
        ccr = float(curve.ccr[idx])
        values.append(ccr)
        total += ccr
    return values, total


def auroc(scores, labels):
    """Area under the ROC of TPR (max-score over knowns) vs FPR.

    Trapezoidal integration over all observed thresholds; equal to the
    Mann-Whitney pair statistic with half credit for ties.
    """
    scores, labels, known = _split_populations(scores, labels)
    known_max = scores[known].max(axis=1)
    unk_max = scores[~known].max(axis=1)

    thresholds = np.unique(np.concatenate([known_max, unk_max]))
    sorted_known = np.sort(known_max)
    sorted_unk = np.sort(unk_max)
    tpr = (sorted_known.size - np.searchsorted(sorted_known, thresholds, side="left")) / sorted_known.size
    fpr = (sorted_unk.size - np.searchsorted(sorted_unk, thresholds, side="left")) / sorted_unk.size

    # descending thresholds -> both rates ascend from the (0,0) sentinel
    tpr = np.concatenate([[0.0], tpr[::-1]])
    fpr = np.concatenate([[0.0], fpr[::-1]])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def closed_set_accuracy(scores, labels):
    """Fraction of known samples whose argmax matches the label (CCR at
    FPR = 1; requires at least one known sample)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    known = labels <= scores.shape[1]
    if not np.any(known):
        raise ValueError("no known samples in evaluation set")
    preds = np.argmax(scores[known], axis=1) + 1
    return float(np.mean(preds == labels[known]))


def score_histogram(scores, labels, categories, bins=20, value_range=(0.0, 1.0)):
    """Per-category score histograms for distribution plots.

    Known samples contribute the probability of their correct class;
    negative and unknown samples contribute their maximum score. Pass
    `value_range=None` to span the pooled data (useful for logit scores);
    a degenerate range is widened by 0.5 on both sides. Counts sum to the
    population size per category.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    categories = np.asarray(categories)
    if not (scores.shape[0] == labels.size == categories.size):
        raise ValueError("scores, labels, and categories disagree on sample count")

    per_category = {}
    for cat in ("known", "negative", "unknown"):
        mask = categories == cat
        if not np.any(mask):
            continue
        if cat == "known":
            vals = scores[mask][np.arange(int(mask.sum())), labels[mask] - 1]
        else:
            vals = scores[mask].max(axis=1)
        per_category[cat] = vals

    if value_range is None:
        pooled = np.concatenate(list(per_category.values()))
        lo, hi = float(pooled.min()), float(pooled.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)

    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    out = {}
    for cat, vals in per_category.items():
        counts, _ = np.histogram(vals, bins=edges)
        out[cat] = {"edges": edges.copy(), "counts": counts}
    return out


def write_curve_csv(curve, path):
    """Export a curve as CSV with header theta,fpr,ccr (repr-exact floats)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("theta,fpr,ccr\n")
        for theta, fpr, ccr in zip(curve.thresholds, curve.fpr, curve.ccr):
            fh.write(f"{float(theta)!r},{float(fpr)!r},{float(ccr)!r}\n")


def read_curve_csv(path):
    """Load a curve written by :func:`write_curve_csv`."""
    thetas, fprs, ccrs = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "theta,fpr,ccr":
            raise ValueError(f"{path}: unexpected curve header {header!r}")
        for line in fh:
            t, f, c = line.strip().split(",")
            thetas.append(float(t))
            fprs.append(float(f))
            ccrs.append(float(c))
    thetas = np.asarray(thetas)
    fprs = np.asarray(fprs)
    finite = np.isfinite(thetas)
    return OscrCurve(
        thresholds=thetas,
        fpr=fprs,
        ccr=np.asarray(ccrs),
        min_finite_fpr=float(fprs[finite].min()) if np.any(finite) else 1.0,
        metadata={},
    )
