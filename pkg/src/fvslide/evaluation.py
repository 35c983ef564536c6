"""Classification metrics, ROC/AUC and leave-one-center-out folds."""

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InsufficientCenters, LengthMismatch, SingleClassLabels

METRIC_KEYS = ("accuracy", "auc", "precision", "recall", "f1")


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list
    mode: str
    n: int
    auc: float = None
    class_names: list = None
    folds: list = field(default_factory=list)
    label: str = None

    def to_dict(self):
        out = asdict(self)
        out["folds"] = [f if isinstance(f, dict) else f.to_dict() for f in self.folds]
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _as_int_array(values):
    return np.asarray(values).astype(np.int64).ravel()


def confusion_matrix(predictions, labels, n_classes):
    """counts[true, predicted]."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def confusion_metrics(predictions, labels, positive_class=1, n_classes=None, class_names=None):
    """Accuracy plus precision/recall/F1.

    With two classes the latter are for ``positive_class``; with more they are
    macro averages of the one-vs-rest values. Zero denominators give 0.
    """
    pred = _as_int_array(predictions)
    true = _as_int_array(labels)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise LengthMismatch("need at least one sample")
    if n_classes is None:
        n_classes = int(max(pred.max(), true.max(), positive_class)) + 1
        n_classes = max(n_classes, 2)
    cm = confusion_matrix(pred, true, n_classes)
    accuracy = float(np.trace(cm)) / len(true)
    per_class = []
    for c in range(n_classes):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        per_class.append(_prf(tp, fp, fn))
    if n_classes == 2:
        precision, recall, f1 = per_class[positive_class]
        mode = "binary"
    else:
        precision, recall, f1 = (float(np.mean([p[k] for p in per_class])) for k in range(3))
        mode = "macro-multiclass"
    return EvalReport(accuracy, float(precision), float(recall), float(f1), cm.tolist(), mode, len(true),
                      class_names=class_names)


def _binary_labels(labels, positive=1):
    y = np.asarray(labels).ravel()
    return y == positive if y.dtype != bool else y


def auc_fraction(scores, labels, positive=1):
    """Mann-Whitney AUC as an exact Fraction: (#pos>neg + ties/2) / (P*N)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels, positive)
    if s.shape != y.shape:
        raise LengthMismatch(f"{len(s)} scores for {len(y)} labels")
    pos, neg = np.sort(s[y]), np.sort(s[~y])
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassLabels("AUC needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    greater = int(below.sum())
    ties = int((not_above - below).sum())
    return Fraction(2 * greater + ties, 2 * len(pos) * len(neg))


def roc_auc(scores, labels, positive=1):
    f = auc_fraction(scores, labels, positive)
    return f.numerator / f.denominator


def roc_curve(scores, labels, positive=1):
    """(fpr, tpr, threshold) points, thresholds descending, starting at (0, 0, inf).

    A sample is called positive when its score is >= the threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels, positive)
    p, n = int(y.sum()), int((~y).sum())
    if p == 0 or n == 0:
        raise SingleClassLabels("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    for i in range(len(s)):
        tp += int(y[i])
        fp += int(not y[i])
        if i + 1 == len(s) or s[i + 1] != s[i]:
            points.append((fp / n, tp / p, float(s[i])))
    return points


def write_roc_csv(path, points):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            writer.writerow([repr(float(fpr)), repr(float(tpr)), repr(float(thr))])


def evaluate_predictions(predictions, probabilities, labels, class_names=None, positive_class=1):
    """Full report from class predictions and per-class probabilities (n, C)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    n_classes = probs.shape[1] if probs.ndim == 2 else 2
    report = confusion_metrics(predictions, labels, positive_class, n_classes, class_names)
    y = _as_int_array(labels)
    if n_classes == 2:
        if len(set(y.tolist())) == 2:
            report.auc = roc_auc(probs[:, positive_class], y, positive_class)
    else:
        aucs = [roc_auc(probs[:, c], y, c) for c in range(n_classes) if 0 < (y == c).sum() < len(y)]
        report.auc = float(np.mean(aucs)) if aucs else None
    return report


def mean_report(reports, label="mean"):
    """Arithmetic mean of fold metrics; confusion matrices are summed."""
    if not reports:
        raise ValueError("no fold reports to average")

    def avg(key):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None

    cm = np.sum([np.asarray(r.confusion) for r in reports], axis=0)
    return EvalReport(avg("accuracy"), avg("precision"), avg("recall"), avg("f1"), cm.tolist(),
                      reports[0].mode, int(sum(r.n for r in reports)), auc=avg("auc"),
                      class_names=reports[0].class_names, folds=list(reports), label=label)


def center_folds(center_ids, mandatory_train_centers=()):
    """One fold per non-mandatory center: (test_center, train_indices, test_indices).

    Mandatory centers always stay in the training side.
    """
    centers = list(center_ids)
    if any(c is None for c in centers):
        raise InsufficientCenters("every slide needs a center_id")
    distinct = sorted(set(centers))
    mandatory = set(mandatory_train_centers or ())
    unknown = mandatory - set(distinct)
    if unknown:
        raise InsufficientCenters(f"mandatory centers not in the dataset: {sorted(unknown)}")
    if len(distinct) < 2:
        raise InsufficientCenters(f"need at least 2 centers, found {len(distinct)}")
    eligible = [c for c in distinct if c not in mandatory]
    if not eligible:
        raise InsufficientCenters("every center is mandatory; nothing left to test on")
    folds = []
    for test in eligible:
        test_idx = [i for i, c in enumerate(centers) if c == test]
        train_idx = [i for i, c in enumerate(centers) if c != test]
        folds.append((test, train_idx, test_idx))
    return folds


def leave_one_center_out(center_ids, labels, fit_predict, mandatory_train_centers=(), class_names=None,
                         positive_class=1):
    """Run ``fit_predict(train_idx, test_idx) -> (predictions, probabilities)`` per center fold.

    Returns (per-fold reports, mean report, pooled out-of-fold report).
    """
    labels = _as_int_array(labels)
    n_classes = len(class_names) if class_names else int(labels.max()) + 1
    reports, pooled_pred, pooled_prob, pooled_idx = [], [], [], []
    for test_center, train_idx, test_idx in center_folds(center_ids, mandatory_train_centers):
        pred, prob = fit_predict(train_idx, test_idx)
        prob = np.asarray(prob, dtype=np.float64).reshape(len(test_idx), n_classes)
        report = evaluate_predictions(pred, prob, labels[test_idx], class_names, positive_class)
        report.label = test_center
        reports.append(report)
        pooled_pred.extend(int(p) for p in pred)
        pooled_prob.append(prob)
        pooled_idx.extend(test_idx)
    mean = mean_report(reports)
    pooled = evaluate_predictions(pooled_pred, np.concatenate(pooled_prob), labels[pooled_idx], class_names,
                                  positive_class)
    pooled.label = "pooled"
    return reports, mean, pooled
