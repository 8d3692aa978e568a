"""Binary cross-entropy over independent labels, with frequency-balanced class weights."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError, InvalidLabelError, InvalidShapeError

log = logging.getLogger(__name__)

DEFAULT_CLAMP_EPS = 1e-7


@dataclass
class ClassFrequencies:
    freq_p: np.ndarray
    freq_n: np.ndarray
    n_examples: int

    @property
    def degenerate(self) -> np.ndarray:
        """Classes with no positives or no negatives."""
        return (self.freq_p == 0.0) | (self.freq_p == 1.0)


@dataclass
class ClassWeights:
    w_pos: np.ndarray
    w_neg: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def unit(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes), np.ones(num_classes))

    def __len__(self) -> int:
        return len(self.w_pos)


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    bad = np.argwhere((labels != 0) & (labels != 1))
    if bad.size:
        r, c = bad[0]
        raise InvalidLabelError(f"label at row {r}, column {c} is {labels[r, c]!r}; expected 0 or 1")
    return labels.astype(np.float64)


def compute_frequencies(labels) -> ClassFrequencies:
    labels = _check_binary(labels)
    n = labels.shape[0]
    if n < 1:
        raise InvalidArgumentError("cannot compute label frequencies of an empty matrix")
    freq_p = labels.sum(axis=0) / n
    return ClassFrequencies(freq_p, 1.0 - freq_p, n)


def compute_weights(freqs: ClassFrequencies) -> ClassWeights:
    """w_pos = freq_n and w_neg = freq_p, so w_pos*freq_p == w_neg*freq_n per class."""
    warnings = []
    for c in np.flatnonzero(freqs.degenerate):
        msg = f"class {c} has freq_p={freqs.freq_p[c]:g}; one side of its loss can never fire"
        warnings.append(msg)
        log.warning(msg)
    return ClassWeights(freqs.freq_n.copy(), freqs.freq_p.copy(), warnings)


def weighted_bce(probabilities: T.Tensor, labels, weights: ClassWeights,
                 clamp_eps: float = DEFAULT_CLAMP_EPS) -> T.Tensor:
    """Mean over examples and classes of -(w_pos*y*log f + w_neg*(1-y)*log(1-f)).

    Probabilities are clamped to [eps, 1-eps]; the gradient is zero where the
    clamp is active.
    """
    if not 0.0 < clamp_eps < 0.5:
        raise InvalidArgumentError(f"clamp_eps must lie in (0, 0.5), got {clamp_eps}")
    y = np.asarray(labels, dtype=np.float64)
    p = probabilities.data
    if y.shape != p.shape:
        raise InvalidShapeError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    if p.shape[-1] != len(weights):
        raise InvalidShapeError(f"{len(weights)} class weights for {p.shape[-1]} classes")
    wp, wn = weights.w_pos, weights.w_neg
    f = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    terms = -(wp * y * np.log(f) + wn * (1.0 - y) * np.log(1.0 - f))
    count = terms.size
    inside = (p >= clamp_eps) & (p <= 1.0 - clamp_eps)

    def bwd(g):
        df = -(wp * y / f - wn * (1.0 - y) / (1.0 - f)) / count
        return (g * df * inside,)

    return T.make_op("weighted_bce", np.asarray(terms.mean()), (probabilities,), bwd)


def plain_bce(probabilities: T.Tensor, labels, clamp_eps: float = DEFAULT_CLAMP_EPS) -> T.Tensor:
    return weighted_bce(probabilities, labels, ClassWeights.unit(probabilities.shape[-1]), clamp_eps)


@dataclass
class ContributionRow:
    class_name: str
    freq_p: float
    freq_n: float
    w_pos: float
    w_neg: float
    pos_contribution: float
    neg_contribution: float


CONTRIBUTION_COLUMNS = ["class", "freq_p", "freq_n", "w_pos", "w_neg",
                        "pos_contribution", "neg_contribution"]


def contribution_report(labels, weights: ClassWeights,
                        class_names: list[str] | None = None) -> list[ContributionRow]:
    """Expected loss-weight mass carried by positive and negative labels per class."""
    freqs = compute_frequencies(labels)
    k = len(freqs.freq_p)
    names = class_names or [f"class{c}" for c in range(k)]
    rows = []
    for c in range(k):
        rows.append(ContributionRow(
            names[c], float(freqs.freq_p[c]), float(freqs.freq_n[c]),
            float(weights.w_pos[c]), float(weights.w_neg[c]),
            float(weights.w_pos[c] * freqs.freq_p[c]),
            float(weights.w_neg[c] * freqs.freq_n[c])))
    return rows


def contribution_csv(rows: list[ContributionRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CONTRIBUTION_COLUMNS)
    for r in rows:
        writer.writerow([r.class_name] + [repr(v) for v in (
            r.freq_p, r.freq_n, r.w_pos, r.w_neg, r.pos_contribution, r.neg_contribution)])
    return buf.getvalue()
