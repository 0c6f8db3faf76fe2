"""Confusion-matrix metrics, ROC AUC, calibration error and embedding separability."""

from __future__ import annotations

import csv
import io

import numpy as np

RADAR_AXES = ("Acc", "Pre", "Rec", "F1", "G-mean", "AUC")


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction length mismatch: {y_true.shape} vs {y_pred.shape}")
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim < 2 or cm.shape[-1] != cm.shape[-2] or cm.shape[-1] == 0:
        raise ValueError(f"confusion matrix must be square and nonempty, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative entries")
    if np.any(cm.sum(axis=(-2, -1)) == 0):
        raise ValueError("confusion matrix is empty (no samples)")
    return cm.astype(np.float64)


def _out(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def _safe_ratio(num: np.ndarray, den: np.ndarray, flags: set | None, name: str) -> np.ndarray:
    ok = den > 0
    out = np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=ok)
    if flags is not None and not ok.all():
        bad = np.flatnonzero((~ok).reshape(-1, ok.shape[-1]).any(axis=0))
        flags.add(f"zero-denominator {name} for classes {bad.tolist()}")
    return out


def _diag(c: np.ndarray) -> np.ndarray:
    return np.diagonal(c, axis1=-2, axis2=-1)


# Every function below accepts one (K, K) matrix or a stack (..., K, K); a stack
# returns one value (or one per-class row) per matrix.

def accuracy(cm):
    c = _check(cm)
    return _out(_diag(c).sum(axis=-1) / c.sum(axis=(-2, -1)))


def precision_per_class(cm, flags: set | None = None) -> np.ndarray:
    c = _check(cm)
    return _safe_ratio(_diag(c), c.sum(axis=-2), flags, "precision")


def recall_per_class(cm, flags: set | None = None) -> np.ndarray:
    c = _check(cm)
    return _safe_ratio(_diag(c), c.sum(axis=-1), flags, "recall")


def f1_per_class(cm, flags: set | None = None) -> np.ndarray:
    p, r = precision_per_class(cm, flags), recall_per_class(cm, flags)
    return _safe_ratio(2 * p * r, p + r, flags, "f1")


def precision_macro(cm, flags: set | None = None):
    return _out(precision_per_class(cm, flags).mean(axis=-1))


def recall_macro(cm, flags: set | None = None):
    return _out(recall_per_class(cm, flags).mean(axis=-1))


def f1_macro(cm, flags: set | None = None):
    return _out(f1_per_class(cm, flags).mean(axis=-1))


def f1_weighted(cm, flags: set | None = None):
    """Per-class F1 averaged with weights equal to each class's share of true samples."""
    c = _check(cm)
    share = c.sum(axis=-1) / c.sum(axis=(-2, -1))[..., None]
    return _out(np.sum(share * f1_per_class(cm, flags), axis=-1))


def g_mean(cm):
    """Geometric mean of per-class recalls over classes present in the data.

    For two classes this is ``sqrt(sensitivity * specificity)``. Any missed class gives 0.
    """
    c = _check(cm)
    support = c.sum(axis=-1)
    present = support > 0
    rec = np.divide(_diag(c), support, out=np.ones_like(support), where=present)
    missed = np.any(present & (rec == 0), axis=-1)
    with np.errstate(divide="ignore"):
        logs = np.where(present, np.log(np.where(rec > 0, rec, 1.0)), 0.0)
    value = np.exp(logs.sum(axis=-1) / present.sum(axis=-1))
    return _out(np.where(missed, 0.0, value))


def binary_auc(scores, positive) -> float:
    """Trapezoidal area under the ROC curve from a sweep over distinct score thresholds.

    Tied scores enter the curve together, which yields a diagonal segment (half credit).
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tpr = np.r_[0.0, np.cumsum(p)[last] / n_pos]
    fpr = np.r_[0.0, np.cumsum(~p)[last] / n_neg]
    return float(np.sum((tpr[1:] + tpr[:-1]) * 0.5 * (fpr[1:] - fpr[:-1])))


def auc(proba, labels, flags: set | None = None) -> float:
    """Macro one-vs-rest AUC; classes without positives or negatives are skipped."""
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if proba.ndim == 1:
        return binary_auc(proba, labels == 1)
    values = []
    for k in range(proba.shape[1]):
        pos = labels == k
        if pos.all() or not pos.any():
            if flags is not None:
                flags.add(f"auc skipped degenerate class {k}")
            continue
        values.append(binary_auc(proba[:, k], pos))
    if not values:
        raise ValueError("AUC undefined: every class is degenerate")
    return float(np.mean(values))


def ece(proba, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width bins of the top-class confidence.

    Bin ``b`` holds confidences in ``(b/B, (b+1)/B]``; a confidence of exactly 0 goes to bin 0.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    proba = np.atleast_2d(np.asarray(proba, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    conf = proba.max(axis=1)
    correct = (proba.argmax(axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n = len(conf)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() / n * abs(correct[m].mean() - conf[m].mean())
    return float(total)


def feature_separability(embeddings, labels) -> tuple[float, float, float]:
    """``(intra, inter, inter / intra)``.

    ``intra`` is the mean distance of each sample to its class centroid, ``inter`` the mean
    pairwise distance between centroids. The ratio is ``inf`` when ``intra`` is 0.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb.reshape(emb.shape[0], -1)
    labels = np.asarray(labels).reshape(-1)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("feature separability needs at least two classes (inter distance undefined)")
    centroids = np.stack([emb[labels == c].mean(axis=0) for c in classes])
    pos = np.searchsorted(classes, labels)
    intra = float(np.linalg.norm(emb - centroids[pos], axis=1).mean())
    i, j = np.triu_indices(len(classes), k=1)
    inter = float(np.linalg.norm(centroids[i] - centroids[j], axis=1).mean())
    ratio = inter / intra if intra > 0 else float("inf")
    return intra, inter, ratio


def evaluate(proba, labels, n_classes: int | None = None, ece_bins: int = 15) -> dict:
    """All summary metrics for predicted probabilities, plus per-class recall."""
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_classes = n_classes or proba.shape[1]
    cm = confusion_matrix(labels, proba.argmax(axis=1), n_classes)
    flags: set = set()
    try:
        auc_value = auc(proba, labels, flags)
    except ValueError:
        auc_value = float("nan")
    out = {
        "Acc": accuracy(cm),
        "Pre": precision_macro(cm, flags),
        "Rec": recall_macro(cm, flags),
        "F1": f1_macro(cm, flags),
        "F1-wt": f1_weighted(cm, flags),
        "G-mean": g_mean(cm),
        "AUC": auc_value,
        "ECE": ece(proba, labels, ece_bins),
    }
    for k, r in enumerate(recall_per_class(cm)):
        out[f"recall_{k}"] = float(r)
    out["flags"] = ";".join(sorted(flags))
    return out


def metrics_row(split: str, epoch: int, metrics: dict) -> dict:
    return {"split": split, "epoch": epoch, **metrics}


def radar_csv(rows: dict) -> str:
    """Long-format CSV ``model,axis,value`` over the radar axes, one block per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "axis", "value"])
    for name, m in rows.items():
        for axis in RADAR_AXES:
            w.writerow([name, axis, repr(float(m[axis]))])
    return buf.getvalue()


__all__ = [
    "RADAR_AXES", "accuracy", "auc", "binary_auc", "confusion_matrix", "ece", "evaluate",
    "f1_macro", "f1_per_class", "f1_weighted", "feature_separability", "g_mean", "metrics_row",
    "precision_macro", "precision_per_class", "radar_csv", "recall_macro", "recall_per_class",
]
