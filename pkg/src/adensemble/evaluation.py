"""Ensemble averaging, classification metrics, ROC/AUC and Wilcoxon tests."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateTestError, EnsembleError, EvaluationError

AUC_SCHEME = "micro-averaged one-vs-rest"


@dataclass
class PredictionMatrix:
    probs: np.ndarray
    source: str = ""


def ensemble_average(preds) -> PredictionMatrix:
    """Elementwise mean of two or more probability matrices."""
    preds = [p if isinstance(p, PredictionMatrix) else PredictionMatrix(np.asarray(p)) for p in preds]
    if len(preds) < 2:
        raise EnsembleError("an ensemble needs at least two members")
    shape = preds[0].probs.shape
    for p in preds[1:]:
        if p.probs.shape != shape:
            raise EnsembleError(f"member shapes differ: {shape} vs {p.probs.shape}")
    total = np.zeros(shape, dtype=np.float64)
    for p in preds:
        total += p.probs
    out = (total / len(preds)).astype(preds[0].probs.dtype)
    return PredictionMatrix(out, "Ensemble(" + ", ".join(p.source for p in preds) + ")")


# --------------------------------------------------------------------------
# confusion matrix and metrics


def confusion(y_true, y_pred, num_classes: int = 4) -> np.ndarray:
    """Rows are true classes, columns are predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"label length mismatch: {y_true.shape} vs {y_pred.shape}")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise EvaluationError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: list[str] = field(default_factory=list)


def _ratio(num, den, flag, flags):
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def metrics(cm) -> dict:
    """Per-class one-vs-rest precision/recall/F1, accuracy and macro means.

    A zero denominator yields 0 and adds the metric name to that class's
    ``degenerate`` list instead of producing NaN.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total == 0:
        raise EvaluationError("confusion matrix is empty")
    per_class = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        fn = int(cm[k].sum()) - tp
        fp = int(cm[:, k].sum()) - tp
        flags: list[str] = []
        p = _ratio(tp, tp + fp, "precision", flags)
        r = _ratio(tp, tp + fn, "recall", flags)
        f1 = _ratio(2 * p * r, p + r, "f1", flags)
        per_class.append(ClassMetrics(p, r, f1, tp + fn, flags))
    return {
        "accuracy": float(np.trace(cm)) / total,
        "per_class": per_class,
        "macro_precision": float(np.mean([c.precision for c in per_class])),
        "macro_recall": float(np.mean([c.recall for c in per_class])),
        "macro_f1": float(np.mean([c.f1 for c in per_class])),
    }


# --------------------------------------------------------------------------
# ROC / AUC


def roc_curve(scores, positives):
    """Binary ROC points ``(fpr, tpr, thresholds)`` with decreasing thresholds.

    Tied scores are collapsed to a single point. The first point is (0, 0)
    at threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(p)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def roc_auc(probs, y_true):
    """Micro-averaged one-vs-rest ROC: every (sample, class) pair pooled.

    Returns ``(points, auc)`` where ``points`` is ``(fpr, tpr, thresholds)``.
    """
    probs = probs.probs if isinstance(probs, PredictionMatrix) else np.asarray(probs)
    y = np.asarray(y_true, dtype=np.int64)
    if probs.ndim == 1:
        onehot = y.astype(bool)
    else:
        if len(np.unique(y)) < 2:
            raise EvaluationError("AUC needs at least two distinct true classes")
        onehot = np.zeros(probs.shape, dtype=bool)
        onehot[np.arange(len(y)), y] = True
    fpr, tpr, thr = roc_curve(probs.ravel(), onehot.ravel())
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return (fpr, tpr, thr), min(1.0, max(0.0, auc))


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def _average_ranks(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _exact_null_counts(doubled_ranks) -> np.ndarray:
    """Count sign assignments per positive-rank-sum, ranks given doubled (integers)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


EXACT_MAX_N = 25


def wilcoxon_signed_rank(a, b, min_n: int = 6):
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes share their average
    rank. Uses the exact null distribution up to 25 non-zero pairs and a
    tie-corrected normal approximation with continuity correction above.

    Returns ``(W, p)`` with ``W = min(R+, R-)``.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise EvaluationError("paired samples must be one-dimensional and equal length")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    if n < min_n:
        raise DegenerateTestError(f"only {n} non-zero differences; need at least {min_n}")
    ranks = _average_ranks(np.abs(d))
    r_plus = float(ranks[d > 0].sum())
    r_minus = float(ranks[d < 0].sum())
    w = min(r_plus, r_minus)

    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_null_counts(doubled)
        k = int(round(2 * w))
        tail = int(sum(counts[:k + 1]))
        p = min(1.0, 2.0 * tail / 2 ** n)
    else:
        mean = n * (n + 1) / 4.0
        _, ties = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties ** 3 - ties)) / 48.0
        z = max(0.0, abs(w - mean) - 0.5) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return w, p


# --------------------------------------------------------------------------
# reports


@dataclass
class EvaluationReport:
    model: str
    class_names: tuple[str, ...]
    confusion: np.ndarray
    summary: dict
    roc: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    auc: float | None = None
    cost: dict | None = None

    def to_dict(self) -> dict:
        per_class = {
            name: {"precision": c.precision, "recall": c.recall, "f1": c.f1,
                   "support": c.support, "degenerate": c.degenerate}
            for name, c in zip(self.class_names, self.summary["per_class"])
        }
        return {
            "model": self.model,
            "accuracy": self.summary["accuracy"],
            "macro_precision": self.summary["macro_precision"],
            "macro_recall": self.summary["macro_recall"],
            "macro_f1": self.summary["macro_f1"],
            "auc": self.auc,
            "auc_scheme": AUC_SCHEME,
            "per_class": per_class,
            "class_names": list(self.class_names),
            "confusion_matrix": self.confusion.tolist(),
            "cost": self.cost,
        }

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        if self.roc is not None:
            for f, t, th in zip(*self.roc):
                w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])
        return buf.getvalue()


def evaluate_predictions(probs, y_true, model: str, class_names, cost=None) -> EvaluationReport:
    probs = probs.probs if isinstance(probs, PredictionMatrix) else np.asarray(probs)
    y_true = np.asarray(y_true, dtype=np.int64)
    cm = confusion(y_true, probs.argmax(axis=1), len(class_names))
    try:
        roc, auc = roc_auc(probs, y_true)
    except EvaluationError:
        roc, auc = None, None
    return EvaluationReport(model, tuple(class_names), cm, metrics(cm), roc, auc, cost)


SUMMARY_FIELDS = ("model", "accuracy", "macro_precision", "macro_recall", "macro_f1", "auc")


def summary_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in reports:
        d = r.to_dict()
        w.writerow([d["model"]] + [repr(d[k]) if d[k] is not None else "" for k in SUMMARY_FIELDS[1:]])
    return buf.getvalue()


def _slug(name: str) -> str:
    return "".join(ch.lower() if ch.isalnum() else "-" for ch in name).strip("-")


def _stage(path: Path, text: str) -> str:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except BaseException:
        os.unlink(tmp)
        raise
    return tmp


def write_report(reports, directory, comparisons=None) -> list[Path]:
    """Write JSON, summary CSV and ROC CSVs with fixed names; returns the paths.

    Every file is written to a temporary name first and renamed into place.
    """
    if isinstance(reports, EvaluationReport):
        reports = [reports]
    directory = Path(directory)
    if not directory.is_dir():
        raise OSError(f"report directory {directory} does not exist")
    files: dict[Path, str] = {}
    doc = {"auc_scheme": AUC_SCHEME, "models": [r.to_dict() for r in reports],
           "comparisons": comparisons or []}
    files[directory / "report.json"] = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    files[directory / "report.csv"] = summary_csv(reports)
    for r in reports:
        files[directory / f"roc_{_slug(r.model)}.csv"] = r.roc_csv()
    staged: list[tuple[str, Path]] = []
    try:
        for path, text in files.items():
            staged.append((_stage(path, text), path))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, path in staged:
        os.replace(tmp, path)
    return [path for _, path in staged]
