"""Six-metric evaluation suite, fold aggregation, F-rank and subset filtering."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, ParseError

METRICS = ("acc", "auc", "aupr", "f1", "pre", "rec")


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    auc: float
    aupr: float
    f1: float
    pre: float
    rec: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, m) for m in METRICS])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "MetricsReport":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class FoldSummary:
    folds: list[MetricsReport]
    mean: MetricsReport
    std: MetricsReport


def _check_inputs(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise DomainError(f"probabilities {probs.shape} do not match {labels.shape[0]} labels")
    if probs.shape[0] < 1:
        raise DomainError("metrics need at least one instance")
    if probs.shape[1] < 2:
        raise DomainError("metrics need at least two classes")
    if labels.min() < 0 or labels.max() >= probs.shape[1] or not np.all(labels == np.round(labels)):
        raise DomainError(f"labels must be integers in [0, {probs.shape[1]})")
    return probs, labels.astype(np.int64)


def roc_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Mann-Whitney statistic with midranks for tied scores."""
    truth = np.asarray(truth, dtype=bool)
    pos = int(truth.sum())
    neg = truth.size - pos
    if pos == 0 or neg == 0:
        raise DomainError("AUC needs both positive and negative instances")
    ranks = rankdata(scores, method="average")
    return float((ranks[truth].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Step integral of precision over recall, one step per distinct score threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    pos = int(truth.sum())
    if pos == 0:
        raise DomainError("AUPR needs at least one positive instance")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    # last index of each tied score block is the threshold point
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_at, n_at = tp[ends], ends + 1
    recall = tp_at / pos
    precision = tp_at / n_at
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def compute_metrics(probs, labels) -> MetricsReport:
    probs, labels = _check_inputs(probs, labels)
    n, n_classes = probs.shape
    pred = probs.argmax(axis=1)
    acc = float(np.mean(pred == labels))

    onehot = np.zeros_like(probs, dtype=bool)
    onehot[np.arange(n), labels] = True
    auc = roc_auc(probs.ravel(), onehot.ravel())
    aupr = average_precision(probs.ravel(), onehot.ravel())

    precs, recs, f1s = [], [], []
    for c in np.unique(labels):
        tp = np.sum((pred == c) & (labels == c))
        n_pred = np.sum(pred == c)
        n_true = np.sum(labels == c)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return MetricsReport(acc, auc, aupr, float(np.mean(f1s)), float(np.mean(precs)), float(np.mean(recs)))


def aggregate_folds(reports: Sequence[MetricsReport]) -> FoldSummary:
    """Mean and sample standard deviation (0 for a single fold)."""
    if not reports:
        raise DomainError("aggregate_folds needs at least one fold")
    mat = np.stack([r.as_array() for r in reports])
    std = mat.std(axis=0, ddof=1) if len(reports) >= 2 else np.zeros(len(METRICS))
    return FoldSummary(list(reports), MetricsReport.from_array(mat.mean(axis=0)), MetricsReport.from_array(std))


def compute_f_rank(matrix) -> np.ndarray:
    """Mean ascending rank per variant over the metric columns, rounded to 2 decimals.

    ``matrix`` is (V, M) with higher-is-better columns; the worst value gets
    rank 1 and exact ties share their mean rank.
    """
    try:
        mat = np.array(matrix, dtype=np.float64)
    except ValueError:
        raise DomainError("variant matrix is not rectangular") from None
    if mat.ndim != 2 or mat.shape[1] < 1:
        raise DomainError(f"variant matrix must be 2-D with at least one metric, got shape {mat.shape}")
    if mat.shape[0] < 2:
        raise DomainError("F-rank needs at least two variants")
    if not np.all(np.isfinite(mat)):
        raise DomainError("variant matrix has missing or non-finite cells")
    ranks = rankdata(mat, method="average", axis=0)
    return np.round(ranks.mean(axis=1), 2)


def subset_metrics(probs, labels, pairs: Sequence[tuple[str, str]], subset: Iterable[str]) -> MetricsReport | None:
    """Metrics over pairs with at least one drug in ``subset``; None when no pair qualifies."""
    subset = set(subset)
    if not subset:
        raise DomainError("drug subset is empty")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(pairs) != probs.shape[0]:
        raise DomainError(f"{len(pairs)} pairs for {probs.shape[0]} prediction rows")
    keep = np.array([u in subset or v in subset for u, v in pairs], dtype=bool)
    if not keep.any():
        return None
    return compute_metrics(probs[keep], labels[keep])


# -- file formats ---------------------------------------------------------------

def _row(values: Iterable[float]) -> list[str]:
    return [repr(float(v)) for v in values]


def write_metrics_csv(summary: FoldSummary, path, fold_labels: Sequence[str] | None = None) -> None:
    labels = fold_labels or [str(i) for i in range(len(summary.folds))]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fold",) + METRICS)
        for name, rep in zip(labels, summary.folds):
            w.writerow([name] + _row(rep.as_array()))
        w.writerow(["mean"] + _row(summary.mean.as_array()))
        w.writerow(["std"] + _row(summary.std.as_array()))


def read_metrics_csv(path) -> dict[str, MetricsReport]:
    """Rows keyed by the ``fold`` column (fold ids plus ``mean``/``std``)."""
    return dict(_read_keyed(path, "fold"))


def write_subset_csv(rows: Mapping[str, MetricsReport | None], path) -> None:
    """Per-fold subset metrics; an empty filtered set is written as ``empty``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fold",) + METRICS)
        for name, rep in rows.items():
            w.writerow([name] + (_row(rep.as_array()) if rep is not None else ["empty"] * len(METRICS)))


def _read_keyed(path, key: str) -> list[tuple[str, MetricsReport]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty metrics file", path=path) from None
        missing = [c for c in (key,) + METRICS if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}", path=path, line=1)
        cols = [header.index(c) for c in METRICS]
        kcol = header.index(key)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DomainError(f"{path}:{lineno}: row has {len(row)} cells, header has {len(header)}")
            try:
                vals = [float(row[c]) for c in cols]
            except ValueError:
                raise DomainError(f"{path}:{lineno}: non-numeric metric cell") from None
            out.append((row[kcol].strip(), MetricsReport.from_array(vals)))
    return out


def read_variant_matrix(path) -> tuple[list[str], np.ndarray]:
    rows = _read_keyed(path, "variant")
    names = [n for n, _ in rows]
    if len(set(names)) != len(names):
        raise DomainError(f"{path}: duplicate variant names")
    return names, np.stack([r.as_array() for _, r in rows]) if rows else np.zeros((0, len(METRICS)))


def write_variant_matrix(names: Sequence[str], matrix, path, f_rank=None) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant",) + METRICS + (("f_rank",) if f_rank is not None else ()))
        for i, name in enumerate(names):
            extra = [f"{f_rank[i]:.2f}"] if f_rank is not None else []
            w.writerow([name] + _row(matrix[i]) + extra)


__all__ = [
    "METRICS", "MetricsReport", "FoldSummary", "compute_metrics", "aggregate_folds", "compute_f_rank",
    "subset_metrics", "roc_auc", "average_precision", "write_metrics_csv", "read_metrics_csv",
    "write_subset_csv", "read_variant_matrix", "write_variant_matrix",
]
