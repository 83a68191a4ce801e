"""Accuracy, cohort summaries, Wilcoxon signed-rank tests, position-embedding similarity."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, InsufficientDataError

#: (upper p bound, annotation), checked in order; a p-value gets the first band whose bound it does not exceed
SIGNIFICANCE_BANDS = ((1e-4, "****"), (1e-3, "***"), (1e-2, "**"), (5e-2, "*"), (1.0, "ns"))
EXACT_MAX_N = 20
MIN_PAIRS = 5


@dataclass
class EvalReport:
    predictions: np.ndarray
    labels: np.ndarray
    accuracy: float
    confusion: np.ndarray
    per_class_recall: np.ndarray

    @property
    def n(self):
        return int(len(self.labels))

    def to_dict(self):
        return {
            "n_windows": self.n,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class_recall": [None if math.isnan(r) else r for r in self.per_class_recall.tolist()],
        }


def report_from_logits(logits, labels, n_classes=None):
    """Argmax predictions (ties to the lowest class) scored against 1-based labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ContractError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    if labels.size == 0:
        raise ContractError("cannot evaluate an empty test set")
    n_classes = n_classes or logits.shape[1]
    pred = np.argmax(logits, axis=1) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels - 1, pred - 1), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    accuracy = float(np.trace(confusion) / confusion.sum())
    return EvalReport(pred, labels, accuracy, confusion, recall)


def evaluate(model, test_ds, batch_size=1024):
    """Run ``model`` over every window of ``test_ds`` and score it."""
    if len(test_ds) == 0:
        raise ContractError("cannot evaluate an empty test set")
    if test_ds.window != model.config.window:
        raise ContractError(f"dataset window {test_ds.window} != model window {model.config.window}")
    chunks = []
    for lo in range(0, len(test_ds), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(test_ds)))
        chunks.append(np.asarray(model.forward_batch(test_ds.windows(idx)).data))
    return report_from_logits(np.concatenate(chunks), test_ds.labels, model.config.n_classes)


@dataclass
class CohortSummary:
    accuracies: np.ndarray
    mean: float
    std: float
    std_defined: bool
    q1: float
    median: float
    q3: float

    @property
    def iqr(self):
        return self.q3 - self.q1

    def to_dict(self):
        return {
            "n": int(len(self.accuracies)),
            "mean": self.mean,
            "std": self.std if self.std_defined else None,
            "std_defined": self.std_defined,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "iqr": self.iqr,
        }


def aggregate_subjects(accuracies) -> CohortSummary:
    """Mean, sample std (n-1) and linearly interpolated quartiles.

    The p-th quantile sits at fractional rank p*(n-1) of the sorted values.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ContractError("need at least one subject")
    q1, med, q3 = np.quantile(acc, [0.25, 0.5, 0.75], method="linear")
    defined = acc.size > 1
    std = float(np.std(acc, ddof=1)) if defined else float("nan")
    return CohortSummary(acc, float(acc.mean()), std, defined, float(q1), float(med), float(q3))


def significance_band(p):
    for bound, label in SIGNIFICANCE_BANDS:
        if p <= bound:
            return label
    return "ns"


def average_ranks(values):
    """1-based ranks with ties given their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class WilcoxonResult:
    statistic: float
    w_plus: float
    w_minus: float
    n: int
    n_zero: int
    p_value: float
    mode: str

    @property
    def band(self):
        return significance_band(self.p_value)

    def to_dict(self):
        return {"W": self.statistic, "W_plus": self.w_plus, "W_minus": self.w_minus, "n": self.n,
                "n_zero_dropped": self.n_zero, "p": self.p_value, "mode": self.mode, "band": self.band}


def exact_signed_rank_p(ranks, w_plus):
    """Two-sided exact p: share of the 2^n sign patterns whose positive-rank
    sum is at least as far from its null mean as ``w_plus``."""
    doubled = np.rint(np.asarray(ranks) * 2).astype(np.int64)
    counts = kernels.signed_rank_counts(np.ascontiguousarray(doubled))
    total = int(doubled.sum())
    obs = abs(int(round(2 * w_plus)) * 2 - total)
    k = np.arange(total + 1)
    extreme = np.abs(2 * k - total) >= obs
    return min(1.0, float(counts[extreme].sum()) / float(2 ** len(doubled)))


def wilcoxon_signed_rank(a, b, mode="auto"):
    """Paired two-sided Wilcoxon signed-rank test of a against b.

    Zero differences are discarded; tied |differences| share average ranks.
    ``mode='auto'`` is exact for up to 20 non-zero pairs, otherwise a normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    if mode not in ("auto", "exact", "approx"):
        raise ContractError(f"unknown mode {mode!r}")
    d = a - b
    nonzero = d[d != 0]
    n = len(nonzero)
    if n < MIN_PAIRS:
        raise InsufficientDataError(f"only {n} non-zero paired differences; need at least {MIN_PAIRS}")
    ranks = average_ranks(np.abs(nonzero))
    w_plus = float(ranks[nonzero > 0].sum())
    w_minus = float(ranks[nonzero < 0].sum())
    if mode == "auto":
        mode = "exact" if n <= EXACT_MAX_N else "approx"
    if mode == "exact":
        p = exact_signed_rank_p(ranks, w_plus)
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
        z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(min(w_plus, w_minus), w_plus, w_minus, n, int(len(d) - n), p, mode)


def pos_embedding_similarity(pos):
    """Cosine similarity between every pair of position-table rows.

    Returns ``(matrix, undefined)``; rows with zero norm produce NaN entries,
    flagged True in ``undefined``.
    """
    E = np.asarray(getattr(pos, "data", pos), dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    zero = norms == 0
    unit = E / np.where(zero, 1.0, norms)[:, None]
    sim = unit @ unit.T
    undefined = zero[:, None] | zero[None, :]
    sim[undefined] = np.nan
    np.fill_diagonal(sim, np.where(zero, np.nan, 1.0))
    sim = 0.5 * (sim + sim.T)
    return sim, undefined


def neighbor_contrast(sim, far=10, skip_cls=True):
    """Mean similarity of adjacent patch pairs and of pairs at least ``far`` apart."""
    S = np.asarray(sim)
    if skip_cls:
        S = S[1:, 1:]
    i, j = np.triu_indices(S.shape[0], k=1)
    gap = j - i
    vals = S[i, j]
    return float(np.nanmean(vals[gap == 1])), float(np.nanmean(vals[gap >= far]))
