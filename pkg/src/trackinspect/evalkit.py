"""Detection metrics: ROC/AUC, FP-per-mile, operating points, confusion matrices, severity subsets."""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import DataError

IMAGES_PER_MILE = 10_000


@dataclass
class RocCurve:
    """Threshold sweep with tied scores grouped; positive = defective.

    tp[k], fp[k] count samples with score >= thresholds[k]; index 0 is the
    empty prediction (threshold +inf).
    """
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def tpr(self):
        return self.tp / self.n_pos

    @property
    def fpr(self):
        return self.fp / self.n_neg

    @property
    def auc(self):
        # trapezoid in integer units; equals the Mann-Whitney U / (P N)
        twice = int(np.sum(np.diff(self.fp) * (self.tp[1:] + self.tp[:-1])))
        return twice / (2 * self.n_pos * self.n_neg)


def roc(scores, labels):
    """Exact ROC over distinct thresholds; higher scores mean 'more likely positive'."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise DataError("non-finite scores")
    P, N = int(labels.sum()), int((~labels).sum())
    if P == 0 or N == 0:
        raise DataError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(s[1:] != s[:-1])[0], len(s) - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return RocCurve(np.r_[np.inf, s[last]], np.r_[0, tp].astype(np.int64), np.r_[0, fp].astype(np.int64), P, N)


def fp_per_mile(fpr):
    return fpr * IMAGES_PER_MILE


def _operating_index(curve, target_fp_per_mile):
    # fp / N <= target / 1e4 without dividing
    ok = curve.fp * IMAGES_PER_MILE <= target_fp_per_mile * curve.n_neg
    return int(np.nonzero(ok)[0][-1])  # fp is non-decreasing and fp[0] = 0


def pd_at_fp_rate(curve, target_fp_per_mile):
    """Largest TPR with FPR <= target / 1e4 (step function, no interpolation)."""
    return float(curve.tpr[_operating_index(curve, target_fp_per_mile)])


def threshold_at_fp_rate(curve, target_fp_per_mile):
    """Score threshold of that operating point: flag samples with score >= threshold."""
    return float(curve.thresholds[_operating_index(curve, target_fp_per_mile)])


def confusion_matrix(predictions, truths, k):
    """Counts with rows = truth, columns = prediction; returns (matrix, accuracy)."""
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise DataError("predictions and truths differ in length")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
        raise DataError(f"labels outside [0, {k})")
    m = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return m, (float(np.trace(m)) / p.size if p.size else float("nan"))


def severity_from_masks(defect, inspectable):
    """area(defect within inspectable) / area(inspectable), from exact pixel counts."""
    inspectable = np.asarray(inspectable, dtype=bool)
    area = int(inspectable.sum())
    if area == 0:
        raise DataError("severity undefined without inspectable area")
    return int((np.asarray(defect, dtype=bool) & inspectable).sum()) / area


@dataclass
class SeveritySubset:
    include: np.ndarray  # ties that take part in the evaluation
    positive: np.ndarray  # defect of the target type at or above the level

    def labels(self):
        return self.positive[self.include]


def filter_by_severity(severity, target, level):
    """Evaluation subset for one defect type at a severity level.

    severity: (ties, types) array, 0 where a tie has no defect of that type.
    Ties with a target defect below the level, and ties whose only defects
    are of another type, are neutral: excluded rather than counted as
    negatives, so detecting them is not a false positive.
    """
    sev = np.asarray(severity, dtype=np.float64)
    if sev.ndim != 2:
        raise DataError("severity must be a (ties, types) array")
    own = sev[:, target]
    other = np.delete(sev, target, axis=1).max(axis=1, initial=0.0)
    positive = own > 0
    positive &= own >= level
    negative = (own == 0) & (other == 0)
    return SeveritySubset(positive | negative, positive)


def write_roc_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr", "fp_per_mile", "tp", "fp"])
        for t, fpr, tpr, tp, fp in zip(curve.thresholds, curve.fpr, curve.tpr, curve.tp, curve.fp):
            w.writerow([repr(float(t)), repr(float(fpr)), repr(float(tpr)), repr(float(fp_per_mile(fpr))),
                        int(tp), int(fp)])


def write_confusion_csv(path, matrix, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred"] + list(names))
        for name, row in zip(names, matrix):
            w.writerow([name] + [int(v) for v in row])


def summary_table(rows, columns=("condition", "fp_per_mile", "mtl", "stl")):
    """Fixed-width text table of PD values (as percentages) per condition and FP rate."""
    def cell(v):
        if isinstance(v, float):
            return "n/a" if v != v else f"{100 * v:.2f}%"
        return str(v)

    body = [[cell(r.get(c)) if c not in ("condition", "fp_per_mile") else str(r.get(c, "")) for c in columns]
            for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def summary_json(rows):
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"
