"""Evaluation metrics and the paired significance test used in result tables."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import DegenerateVarianceError, EmptyInputError


@dataclass(frozen=True)
class MetricReport:
    """A metric aggregated over cross-validation folds."""

    name: str
    value: float
    per_fold: tuple
    n: int

    @classmethod
    def from_folds(cls, name, per_fold):
        per_fold = tuple(float(v) for v in per_fold)
        if not per_fold:
            raise EmptyInputError(f"no fold values for metric {name!r}")
        return cls(name, float(np.mean(per_fold)), per_fold, len(per_fold))

    def to_dict(self):
        return {
            "name": self.name,
            "value": self.value,
            "per_fold": list(self.per_fold),
            "n": self.n,
        }


def _as_2d(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return y


def _binary_f1(true_pos, pred_pos):
    """F1 for one class given boolean membership masks."""
    if not true_pos.any() and not pred_pos.any():
        return 1.0  # class never appears on either side: vacuously perfect
    tp = float(np.sum(true_pos & pred_pos))
    precision = tp / pred_pos.sum() if pred_pos.any() else 0.0
    recall = tp / true_pos.sum() if true_pos.any() else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(y_true, y_pred):
    """Unweighted mean of per-class F1 over classes {0, 1}, then over dims."""
    y_true, y_pred = _as_2d(y_true), _as_2d(y_pred)
    if y_true.size == 0:
        raise EmptyInputError("macro_f1 needs at least one sample")
    if y_true.shape != y_pred.shape:
        raise EmptyInputError(
            f"shape mismatch: {y_true.shape} truth vs {y_pred.shape} predictions"
        )
    per_dim = []
    for d in range(y_true.shape[1]):
        t, p = y_true[:, d], y_pred[:, d]
        scores = [_binary_f1(t == c, p == c) for c in (0, 1)]
        per_dim.append(float(np.mean(scores)))
    return float(np.mean(per_dim))


def r_squared(y_true, y_pred):
    """Coefficient of determination per dimension, averaged over dimensions."""
    y_true, y_pred = _as_2d(y_true), _as_2d(y_pred)
    if y_true.shape[0] < 2:
        raise EmptyInputError("r_squared needs at least 2 samples")
    if y_true.shape != y_pred.shape:
        raise EmptyInputError(
            f"shape mismatch: {y_true.shape} truth vs {y_pred.shape} predictions"
        )
    per_dim = []
    for d in range(y_true.shape[1]):
        t, p = y_true[:, d], y_pred[:, d]
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        if ss_tot == 0.0:
            raise DegenerateVarianceError(f"dimension {d} has zero label variance")
        ss_res = float(np.sum((t - p) ** 2))
        per_dim.append(1.0 - ss_res / ss_tot)
    return float(np.mean(per_dim))


def nll_metric(model, y, text_emb, annot_idx=None):
    """Mean negative log density over an evaluation split (eval mode)."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise EmptyInputError("nll_metric needs at least one record")
    lp = model.log_prob(y, text_emb, annot_idx)
    return float(-np.mean(lp))


def annotation_entropy(labels, schema, normalized=False):
    """Shannon entropy (bits) of one text's labels over schema positions.

    Each value is matched to its nearest position on the schema grid before
    counting; `normalized` picks which grid the labels live on. Mean over
    dimensions.
    """
    labels = _as_2d(labels)
    if labels.shape[0] < 1:
        raise EmptyInputError("annotation_entropy needs at least one annotation")
    per_dim = []
    for d, dim in enumerate(schema.dims):
        if normalized:
            grid = dim.normalized_positions()
        else:
            grid = dim.min + dim.step * np.arange(dim.positions)
        values = labels[:, d]
        slots = np.argmin(np.abs(values[:, None] - grid[None, :]), axis=1)
        counts = np.bincount(slots, minlength=len(grid)).astype(np.float64)
        p = counts[counts > 0] / counts.sum()
        per_dim.append(float(-np.sum(p * np.log2(p))))
    return float(np.mean(per_dim))


def paired_ttest_bonferroni(a, b, m=1):
    """Two-sided paired t-test with Bonferroni correction over m comparisons.

    The tail probability comes from the regularized incomplete beta
    function: P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EmptyInputError("paired test needs two equal-length 1-d samples")
    if a.shape[0] < 2:
        raise EmptyInputError("paired test needs at least 2 folds")
    if m < 1:
        raise EmptyInputError("number of comparisons must be >= 1")
    diffs = a - b
    sd = float(np.std(diffs, ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("paired differences have zero variance")
    n = diffs.shape[0]
    t = float(np.mean(diffs)) / (sd / math.sqrt(n))
    df = n - 1
    p_raw = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    p_adjusted = min(1.0, m * p_raw)
    return {
        "t": t,
        "df": df,
        "p_raw": p_raw,
        "p_adjusted": p_adjusted,
        "significant": p_adjusted < 0.05,
    }
