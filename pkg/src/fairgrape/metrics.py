"""Group-wise evaluation and bias statistics.

Accuracies are percentage points. FNR/FPR are one-vs-rest per class; a binary task
reports the rates of class 1, a multi-class task the macro-average over the classes
whose rate is defined within the group. Spreads use the population convention.
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .data import GroupedDataset
from .errors import DataError, GroupMismatchError
from .models import BiasStats, FairnessReport, GroupMetrics, RateChange
from .network import Model, predict

logger = logging.getLogger(__name__)

OVERALL = "All"
ROW_COLUMNS = ["method", "sparsity", "seed", "group", "metric", "value"]


def _rate(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def confusion_counts(labels: np.ndarray, predictions: np.ndarray, n_classes: int) -> List[List[int]]:
    """Per class one-vs-rest [tp, fn, fp, tn]"""
    out = []
    for c in range(n_classes):
        actual, predicted = labels == c, predictions == c
        tp = int(np.sum(actual & predicted))
        fn = int(np.sum(actual & ~predicted))
        fp = int(np.sum(~actual & predicted))
        out.append([tp, fn, fp, int(labels.size) - tp - fn - fp])
    return out


def error_rates(confusion: List[List[int]]) -> tuple:
    """(FNR, FPR) from per-class confusion counts; None where undefined"""
    if len(confusion) == 2:
        tp, fn, fp, tn = confusion[1]
        return _rate(fn, tp + fn), _rate(fp, fp + tn)
    fnrs = [r for r in (_rate(fn, tp + fn) for tp, fn, _, _ in confusion) if r is not None]
    fprs = [r for r in (_rate(fp, fp + tn) for _, _, fp, tn in confusion) if r is not None]
    return (float(np.mean(fnrs)) if fnrs else None, float(np.mean(fprs)) if fprs else None)


def group_metrics(name: str, labels: np.ndarray, predictions: np.ndarray, n_classes: int) -> GroupMetrics:
    if labels.size == 0:
        return GroupMetrics(name=name, missing=True)
    confusion = confusion_counts(labels, predictions, n_classes)
    fnr, fpr = error_rates(confusion)
    return GroupMetrics(name=name, n=int(labels.size), accuracy=100.0 * float(np.mean(labels == predictions)),
                        fnr=fnr, fpr=fpr, confusion=confusion)


def evaluate(model: Model, data: GroupedDataset, method: str = "reference",
             keep_fraction: Optional[float] = None, seed: Optional[int] = None) -> FairnessReport:
    """Overall, per-group and per-class metrics of ``model`` on one partition"""
    if data.n == 0:
        raise DataError("cannot evaluate on an empty partition")
    predictions = predict(model, data.features)
    return report_from_predictions(data, predictions, method, keep_fraction, seed,
                                   nonzero=model.nonzero_count, total=model.num_weights)


def report_from_predictions(data: GroupedDataset, predictions: np.ndarray, method: str = "reference",
                            keep_fraction: Optional[float] = None, seed: Optional[int] = None,
                            nonzero: Optional[int] = None, total: Optional[int] = None) -> FairnessReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.shape != data.labels.shape:
        raise DataError(f"{predictions.size} predictions for {data.n} rows")
    groups = []
    for k, name in enumerate(data.group_names):
        rows = data.group_rows(k)
        metrics = group_metrics(name, data.labels[rows], predictions[rows], data.n_classes)
        if metrics.missing:
            logger.info("group '%s' is absent from the partition", name)
        groups.append(metrics)
    class_accuracy = {}
    for c, name in enumerate(data.class_names):
        rows = np.flatnonzero(data.labels == c)
        class_accuracy[name] = 100.0 * float(np.mean(predictions[rows] == c)) if rows.size else None
    return FairnessReport(
        method=method,
        keep_fraction=keep_fraction,
        seed=seed,
        overall=group_metrics(OVERALL, data.labels, predictions, data.n_classes),
        groups=groups,
        class_accuracy=class_accuracy,
        nonzero_weights=nonzero,
        total_weights=total,
    )


def _spread(values: Sequence[float]) -> float:
    if not values:
        return 0.0
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def bias_stats(pruned: FairnessReport, reference: FairnessReport) -> BiasStats:
    """Per-group accuracy change and its spread relative to a reference model"""
    names = pruned.present_groups()
    if names != reference.present_groups():
        raise GroupMismatchError(
            f"group sets differ: {names} vs {reference.present_groups()}")
    accuracies = np.array([pruned.group(n).accuracy for n in names], dtype=np.float64)
    reference_acc = np.array([reference.group(n).accuracy for n in names], dtype=np.float64)
    deltas = accuracies - reference_acc
    mean_delta = float(deltas.mean()) if names else 0.0
    var_delta = float(np.mean((deltas - mean_delta) ** 2)) if names else 0.0

    class_deltas = {
        c: pruned.class_accuracy[c] - reference.class_accuracy[c]
        for c in pruned.class_accuracy
        if pruned.class_accuracy[c] is not None and reference.class_accuracy.get(c) is not None
    }
    class_acc = [a for a in pruned.class_accuracy.values() if a is not None]
    return BiasStats(
        deltas={n: float(d) for n, d in zip(names, deltas)},
        mean_delta=mean_delta,
        var_delta=var_delta,
        rho_accuracy=_spread(list(accuracies)),
        rho_delta=float(np.sqrt(var_delta)),
        reference_rho_accuracy=_spread(list(reference_acc)),
        class_deltas=class_deltas,
        class_rho_accuracy=_spread(class_acc) if class_acc else None,
        class_rho_delta=_spread(list(class_deltas.values())) if class_deltas else None,
    )


def _normalized(new: Optional[float], old: Optional[float]) -> tuple:
    if new is None or old is None:
        return None, False
    if old == 0:
        return new - old, True
    return (new - old) / old, False


def normalized_rate_changes(pruned: FairnessReport, reference: FairnessReport) -> List[RateChange]:
    """Per group (ΔFNR, ΔFPR) as proportions of the reference rates"""
    names = [g.name for g in reference.groups]
    if names != [g.name for g in pruned.groups]:
        raise GroupMismatchError(f"group sets differ: {[g.name for g in pruned.groups]} vs {names}")
    changes = []
    for name in names:
        new, old = pruned.group(name), reference.group(name)
        fnr, fnr_abs = _normalized(new.fnr, old.fnr)
        fpr, fpr_abs = _normalized(new.fpr, old.fpr)
        changes.append(RateChange(group=name, fnr_change=fnr, fpr_change=fpr,
                                  fnr_absolute=fnr_abs, fpr_absolute=fpr_abs))
    return changes


def attach_bias(pruned: FairnessReport, reference: FairnessReport) -> FairnessReport:
    pruned.bias = bias_stats(pruned, reference)
    pruned.rate_changes = normalized_rate_changes(pruned, reference)
    return pruned


# =============== Flat rows and aggregation ===============

def sparsity_of(report: FairnessReport) -> float:
    return 0.0 if report.keep_fraction is None else round(1.0 - report.keep_fraction, 10)


def report_rows(report: FairnessReport) -> List[Dict]:
    """(method, sparsity, seed, group, metric, value) rows; undefined values are skipped"""
    base = {"method": report.method, "sparsity": sparsity_of(report), "seed": report.seed}
    rows = []

    def add(group: str, metric: str, value):
        if value is not None:
            rows.append({**base, "group": group, "metric": metric, "value": float(value)})

    for g in [report.overall] + report.groups:
        if g.missing:
            continue
        add(g.name, "accuracy", g.accuracy)
        add(g.name, "fnr", g.fnr)
        add(g.name, "fpr", g.fpr)
    for name, value in report.class_accuracy.items():
        add(f"class:{name}", "accuracy", value)
    if report.bias is not None:
        b = report.bias
        for metric in ("mean_delta", "var_delta", "rho_accuracy", "rho_delta"):
            add(OVERALL, metric, getattr(b, metric))
        add(OVERALL, "class_rho_accuracy", b.class_rho_accuracy)
        add(OVERALL, "class_rho_delta", b.class_rho_delta)
        for name, d in b.deltas.items():
            add(name, "delta_accuracy", d)
    else:
        present = [g.accuracy for g in report.groups if not g.missing]
        add(OVERALL, "rho_accuracy", _spread(present))
    for change in report.rate_changes:
        add(change.group, "fnr_change", change.fnr_change)
        add(change.group, "fpr_change", change.fpr_change)
    return rows


def rows_frame(reports: Sequence[FairnessReport]) -> pd.DataFrame:
    rows = [row for report in reports for row in report_rows(report)]
    return pd.DataFrame(rows, columns=ROW_COLUMNS)


def aggregate(reports: Sequence[FairnessReport]) -> pd.DataFrame:
    """Mean and median per (method, sparsity, group, metric) across seeds"""
    frame = rows_frame(reports)
    keys = ["method", "sparsity", "group", "metric"]
    if frame.empty:
        return pd.DataFrame(columns=keys + ["mean", "median", "seeds"])
    grouped = frame.groupby(keys, sort=True)["value"]
    out = grouped.agg(["mean", "median", "count"]).reset_index()
    return out.rename(columns={"count": "seeds"})


def rate_changes_frame(report: FairnessReport) -> pd.DataFrame:
    return pd.DataFrame([c.model_dump() for c in report.rate_changes],
                        columns=["group", "fnr_change", "fpr_change", "fnr_absolute", "fpr_absolute"])
