"""Per-class diagnostic metrics, ROC/AUC, bootstrap intervals, and report emitters."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import BootstrapError, InvalidArgumentError, UndefinedAUCError

METRIC_COLUMNS = ["class", "Accuracy", "Prevalence", "Sensitivity", "Specificity",
                  "PPV", "NPV", "AUC", "F1", "Threshold"]
BOOTSTRAP_COLUMNS = ["class", "mean_auc", "lower", "upper", "level", "resamples", "seed"]
NAN = float("nan")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricRow:
    class_name: str
    accuracy: float
    prevalence: float
    sensitivity: float
    specificity: float
    ppv: float
    npv: float
    auc: float
    f1: float
    threshold: float

    def cells(self) -> list:
        return [self.class_name, self.accuracy, self.prevalence, self.sensitivity,
                self.specificity, self.ppv, self.npv, self.auc, self.f1, self.threshold]


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class BootstrapResult:
    point_auc: float
    mean_auc: float
    lower: float
    upper: float
    n_resamples: int
    confidence_level: float
    seed: int

    def formatted(self, digits: int = 2) -> str:
        return f"{self.mean_auc:.{digits}f} ({self.lower:.{digits}f}-{self.upper:.{digits}f})"


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InvalidArgumentError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise InvalidArgumentError("no examples to evaluate")
    return s, y.astype(np.int64)


def confusion_at_threshold(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Predict positive when ``score >= threshold`` and tally the four outcomes."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
                           tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)))


def _ratio(num: int, den: int) -> float:
    return num / den if den else NAN


def metric_row(counts: ConfusionCounts, auc_value: float, class_name: str,
               threshold: float) -> MetricRow:
    """Derive the per-class diagnostic metrics; zero-denominator metrics are NaN.

    F1 is 0 whenever tp is 0 but positives or positive predictions exist, even
    when PPV itself is undefined.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    total = counts.total
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    ppv = _ratio(tp, tp + fp)
    npv = _ratio(tn, tn + fn)
    if tp == 0:
        f1 = 0.0 if (tp + fn or tp + fp) else NAN
    else:
        f1 = 2 * ppv * sens / (ppv + sens)
    return MetricRow(class_name, _ratio(tp + tn, total), _ratio(tp + fn, total),
                     sens, spec, ppv, npv, float(auc_value), f1, float(threshold))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties counted one half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined without both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _batch_auc(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise AUC for (B, n) score and label matrices (each row has both classes)."""
    ranks = rankdata(s, axis=1)
    n_pos = y.sum(axis=1)
    n_neg = y.shape[1] - n_pos
    return ((ranks * y).sum(axis=1) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(scores, labels) -> RocCurve:
    """(FPR, TPR) at every distinct score (descending), framed by (0,0) and (1,1)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC is undefined without both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted)), y.size - 1]
    tps = np.cumsum(y_sorted)[last_of_group]
    fps = (last_of_group + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:
        fpr, tpr, thresholds = np.r_[fpr, 1.0], np.r_[tpr, 1.0], np.r_[thresholds, -np.inf]
    return RocCurve(fpr, tpr, thresholds)


def bootstrap_auc(scores, labels, n_resamples: int = 1000, confidence_level: float = 0.95,
                  seed: int = 0, max_retries: int = 1000) -> BootstrapResult:
    """Percentile bootstrap interval for the AUC, resampling examples with replacement.

    Resamples that lack either class are redrawn, at most ``max_retries`` times
    per resample.
    """
    if n_resamples < 100:
        raise InvalidArgumentError(f"need at least 100 resamples, got {n_resamples}")
    if not 0.0 < confidence_level < 1.0:
        raise InvalidArgumentError(f"confidence_level must be in (0, 1), got {confidence_level}")
    s, y = _as_arrays(scores, labels)
    point = auc(s, y)
    n = s.size
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    for b in range(n_resamples):
        tries = 0
        while y[idx[b]].min() == y[idx[b]].max():
            tries += 1
            if tries > max_retries:
                raise BootstrapError(
                    f"resample {b} drew a single class {max_retries} times; data too imbalanced")
            idx[b] = rng.integers(0, n, size=n)
    aucs = _batch_auc(s[idx], y[idx])
    alpha = (1.0 - confidence_level) / 2.0
    lower, upper = np.quantile(aucs, [alpha, 1.0 - alpha])
    return BootstrapResult(point, float(aucs.mean()), float(lower), float(upper),
                           n_resamples, confidence_level, seed)


@dataclass
class ClassReport:
    row: MetricRow
    roc: RocCurve | None
    bootstrap: BootstrapResult | None


@dataclass
class MetricsReport:
    classes: list[ClassReport]

    @property
    def rows(self) -> list[MetricRow]:
        return [c.row for c in self.classes]

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows:
            w.writerow([_cell(v) for v in row.cells()])
        return buf.getvalue()

    def bootstrap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BOOTSTRAP_COLUMNS)
        for c in self.classes:
            b = c.bootstrap
            if b is None:
                w.writerow([c.row.class_name, "NaN", "NaN", "NaN", "NaN", "NaN", "NaN"])
            else:
                w.writerow([c.row.class_name, _cell(b.mean_auc), _cell(b.lower), _cell(b.upper),
                            _cell(b.confidence_level), b.n_resamples, b.seed])
        return buf.getvalue()

    def ci_table_csv(self) -> str:
        """Two-column table: class and ``mean (lower-upper)``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "Mean AUC (CI)"])
        for c in self.classes:
            w.writerow([c.row.class_name, c.bootstrap.formatted() if c.bootstrap else "NaN"])
        return buf.getvalue()

    def roc_csv(self, index: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        roc = self.classes[index].roc
        if roc is not None:
            for f, t in roc.points():
                w.writerow([repr(f), repr(t)])
        return buf.getvalue()

    def to_json(self) -> str:
        out = []
        for c in self.classes:
            entry = {k: _json_num(v) for k, v in asdict(c.row).items()}
            if c.bootstrap is not None:
                entry["bootstrap"] = {k: _json_num(v) for k, v in asdict(c.bootstrap).items()}
                entry["auc_ci"] = c.bootstrap.formatted()
            out.append(entry)
        return json.dumps({"classes": out}, indent=2)


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, float) and math.isnan(v):
        return "NaN"
    return repr(float(v)) if isinstance(v, float) else str(v)


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def metrics_table(scores: np.ndarray, labels: np.ndarray, class_names: Sequence[str],
                  threshold: float = 0.5, n_resamples: int | None = 1000,
                  confidence_level: float = 0.95, seed: int = 0) -> MetricsReport:
    """One row per class; degenerate classes get NaN cells instead of aborting.

    ``scores`` and ``labels`` are (N, K). ``n_resamples=None`` skips the bootstrap.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape or scores.shape[1] != len(class_names):
        raise InvalidArgumentError(
            f"scores {scores.shape}, labels {labels.shape} and {len(class_names)} class names disagree")
    reports = []
    for k, name in enumerate(class_names):
        s, y = scores[:, k], labels[:, k]
        counts = confusion_at_threshold(s, y, threshold)
        try:
            a = auc(s, y)
            roc = roc_curve(s, y)
        except UndefinedAUCError:
            a, roc = NAN, None
        boot = None
        if n_resamples is not None and roc is not None:
            try:
                boot = bootstrap_auc(s, y, n_resamples, confidence_level, seed=seed + k)
            except BootstrapError:
                boot = None
        reports.append(ClassReport(metric_row(counts, a, name, threshold), roc, boot))
    return MetricsReport(reports)
