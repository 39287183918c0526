"""Evaluation metrics: ranking, regression, classification, repeat aggregation.

Ranking metrics follow exact combinatorial definitions so they can be
checked against brute-force threshold enumeration: AUC-ROC is the
Mann-Whitney statistic with half credit for ties, AUC-PR is average
precision with step interpolation, and TPR@FPR takes the best TPR among
thresholds whose FPR does not exceed the cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TPR_FPR_CAPS = (0.01, 0.005, 0.001)


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.scores.shape != self.labels.shape or self.scores.size == 0:
            raise ConfigError("scores and labels must be equal-length and non-empty")


def _counts(scored):
    p = int((scored.labels == 1).sum())
    n = scored.labels.size - p
    if p == 0 or n == 0:
        raise ConfigError("ranking metrics undefined for single-class labels")
    return p, n


def auc_roc(scored: ScoredSet) -> float:
    """Probability a random positive outranks a random negative; ties half credit."""
    p, n = _counts(scored)
    order = np.argsort(scored.scores, kind="mergesort")
    s = scored.scores[order]
    y = scored.labels[order]
    ranks = np.empty(s.size)
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0  # midrank, 1-based
        i = j
    u = ranks[y == 1].sum() - p * (p + 1) / 2.0
    return u / (p * n)


def _threshold_counts(scored):
    """Cumulative TP/FP at each distinct score threshold, descending."""
    order = np.argsort(-scored.scores, kind="mergesort")
    s = scored.scores[order]
    y = scored.labels[order]
    distinct = np.nonzero(np.r_[s[1:] != s[:-1], True])[0]
    tp = np.cumsum(y == 1)[distinct]
    fp = np.cumsum(y == 0)[distinct]
    return tp, fp


def auc_pr(scored: ScoredSet) -> float:
    """Average precision with step interpolation over distinct thresholds."""
    p, _ = _counts(scored)
    tp, fp = _threshold_counts(scored)
    ap = 0.0
    prev_tp = 0
    for k in range(tp.size):
        precision = tp[k] / (tp[k] + fp[k])
        ap += (tp[k] / p - prev_tp / p) * precision
        prev_tp = tp[k]
    return ap


def tpr_at_fpr(scored: ScoredSet, cap) -> float:
    """Best TPR over thresholds with FPR <= cap (no interpolation)."""
    p, n = _counts(scored)
    tp, fp = _threshold_counts(scored)
    ok = fp / n <= cap
    if not np.any(ok):
        return 0.0
    return float(tp[ok].max() / p)


def curve_metrics(scored: ScoredSet, caps=TPR_FPR_CAPS):
    out = {"auc_roc": float(auc_roc(scored)), "auc_pr": float(auc_pr(scored))}
    for cap in caps:
        out[f"tpr_at_fpr_{cap}"] = tpr_at_fpr(scored, cap)
    return out


def regression_metrics(predictions, targets):
    """Per-feature and mean R^2; zero-variance features are excluded as undefined."""
    pred = np.atleast_2d(np.asarray(predictions, dtype=np.float64).T).T
    targ = np.atleast_2d(np.asarray(targets, dtype=np.float64).T).T
    if pred.shape != targ.shape:
        raise ConfigError(f"prediction shape {pred.shape} != target shape {targ.shape}")
    per_feature = []
    for j in range(targ.shape[1]):
        y = targ[:, j]
        ss_tot = float(((y - y.mean()) ** 2).sum())
        if ss_tot == 0.0:
            per_feature.append(None)
            continue
        ss_res = float(((pred[:, j] - y) ** 2).sum())
        per_feature.append(1.0 - ss_res / ss_tot)
    defined = [r for r in per_feature if r is not None]
    if not defined:
        raise ConfigError("all target features have zero variance")
    return {
        "per_feature": per_feature,
        "mean_r2": sum(defined) / len(defined),
        "best_r2": max(defined),
    }


def classification_metrics(predictions, labels):
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.size == 0 or pred.shape != lab.shape:
        raise ConfigError("predictions and labels must be equal-length and non-empty")
    out = {"accuracy": float((pred == lab).mean())}
    classes = set(np.unique(lab)) | set(np.unique(pred))
    if classes <= {0, 1}:
        tp = int(((pred == 1) & (lab == 1)).sum())
        fp = int(((pred == 1) & (lab == 0)).sum())
        fn = int(((pred == 0) & (lab == 1)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        degenerate = precision + recall == 0.0
        f_score = 0.0 if degenerate else 2 * precision * recall / (precision + recall)
        out.update(
            precision=precision,
            recall=recall,
            f_score=f_score,
            f_score_degenerate=degenerate,
        )
    return out


@dataclass(frozen=True)
class RepeatSummary:
    samples: tuple
    mean: float
    std_error: float
    ci_low: float
    ci_high: float


def aggregate_repeats(samples) -> RepeatSummary:
    """Mean, standard error and 95% interval over repeated seeded runs."""
    vals = [float(s) for s in samples]
    if len(vals) < 2:
        raise ConfigError("need at least two repeat samples to aggregate")
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    se = math.sqrt(var) / math.sqrt(len(vals))
    return RepeatSummary(
        samples=tuple(vals),
        mean=mean,
        std_error=se,
        ci_low=mean - 1.96 * se,
        ci_high=mean + 1.96 * se,
    )
