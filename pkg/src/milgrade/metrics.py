"""Confusion matrices, per-class and support-weighted F1, Cohen's kappa, fold summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from milgrade.errors import ContractError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion(y_true, y_pred, k: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if len(y_true) != len(y_pred) or len(y_true) == 0:
        raise ContractError(f"need equal non-empty label sequences, got {len(y_true)} and {len(y_pred)}")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.min() < 0 or y.max() >= k:
            raise ContractError(f"{name} label out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """F1 per class; NaN marks classes with zero support (undefined)."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    f1[cm.support == 0] = np.nan
    return f1


def weighted_f1(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ContractError("weighted F1 of an empty confusion matrix")
    f1 = np.nan_to_num(per_class_f1(cm), nan=0.0)
    return float(np.sum(cm.support / total * f1))


def cohen_kappa(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ContractError("kappa of an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    p_o = np.trace(c) / total
    p_e = float(np.sum(c.sum(axis=1) / total * (c.sum(axis=0) / total)))
    if p_e == 1.0:
        # every count sits in one diagonal cell, so p_o is 1 as well
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))


def fold_summary(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractError("fold summary needs at least two values")
    return float(v.mean()), float(v.std(ddof=1))


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}±{std:.3f}"


def fold_rows(fold_results) -> list[list[str]]:
    """CSV rows: fold, weighted_f1, kappa, f1_class0..K-1 (blank when undefined)."""
    rows = []
    for r in fold_results:
        f1s = ["" if np.isnan(x) else repr(float(x)) for x in r.per_class_f1]
        rows.append([str(r.fold), repr(r.weighted_f1), repr(r.kappa), *f1s])
    return rows


def report_csv(fold_results, n_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "weighted_f1", "kappa", *[f"f1_class{c}" for c in range(n_classes)]])
    w.writerows(fold_rows(fold_results))
    return buf.getvalue()


def summary_table(fold_results, class_names: Sequence[str], title: str = "") -> str:
    """Plain-text table in the mean±std style, three decimals."""
    lines = []
    if title:
        lines.append(title)
    wf1 = fold_summary([r.weighted_f1 for r in fold_results])
    kap = fold_summary([r.kappa for r in fold_results])
    lines.append(f"{'Weighted F1':<20}{format_mean_std(*wf1)}")
    lines.append(f"{'kappa':<20}{format_mean_std(*kap)}")
    for c, name in enumerate(class_names):
        vals = [r.per_class_f1[c] for r in fold_results if not np.isnan(r.per_class_f1[c])]
        if len(vals) >= 2:
            cell = format_mean_std(*fold_summary(vals))
        elif len(vals) == 1:
            cell = f"{vals[0]:.3f}"
        else:
            cell = "undefined"
        lines.append(f"{'F1 ' + name:<20}{cell}")
    return "\n".join(lines) + "\n"
