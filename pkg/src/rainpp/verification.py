"""Contingency-table verification of rainfall-class forecasts.

For threshold index ``k`` the event is "class >= k + 1", i.e. rainfall at or
above ``r_k``. Scores follow the usual definitions; a 0/0 ratio is reported as
0 and listed in ``Scores.degenerate``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .labeling import ThresholdSet, classify

METRICS = ("CSI", "F1", "precision", "recall")


@dataclass(frozen=True)
class Contingency:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("contingency counts must be non-negative")

    def __add__(self, other: "Contingency") -> "Contingency":
        return Contingency(self.tp + other.tp, self.fp + other.fp,
                           self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Scores:
    csi: float
    f1: float
    precision: float
    recall: float
    degenerate: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {"CSI": self.csi, "F1": self.f1, "precision": self.precision, "recall": self.recall}


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (0.0, True) if den == 0 else (num / den, False)


def scores(c: Contingency) -> Scores:
    precision, dp = _ratio(c.tp, c.tp + c.fp)
    recall, dr = _ratio(c.tp, c.tp + c.fn)
    f1, df = _ratio(2 * precision * recall, precision + recall)
    csi, dc = _ratio(c.tp, c.tp + c.fp + c.fn)
    flags = tuple(n for n, d in zip(METRICS, (dc, df, dp, dr)) if d)
    return Scores(csi, f1, precision, recall, flags)


def contingency(pred_class, truth_qpe, gamma, k: int) -> Contingency:
    """Counts for the event "rainfall >= r_k" over all pixels."""
    ts = gamma if isinstance(gamma, ThresholdSet) else ThresholdSet(tuple(gamma))
    pred = np.asarray(pred_class)
    truth = np.asarray(truth_qpe)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape}, truth {truth.shape}")
    if not 0 <= k < len(ts.values):
        raise ValueError(f"threshold index {k} out of range")
    ep = pred >= k + 1
    et = np.asarray(classify(truth, ts)) >= k + 1
    tp = int(np.count_nonzero(ep & et))
    fp = int(np.count_nonzero(ep & ~et))
    fn = int(np.count_nonzero(~ep & et))
    return Contingency(tp, fp, fn, int(pred.size) - tp - fp - fn)


@dataclass
class MetricRow:
    threshold: float
    aggregation: str  # "pooled" | "macro"
    scores: Scores
    counts: Contingency
    n_samples: int = 0  # samples contributing to a macro average


@dataclass
class MetricTable:
    rows: list[MetricRow] = field(default_factory=list)

    def get(self, threshold: float, aggregation: str = "pooled") -> MetricRow:
        for row in self.rows:
            if row.aggregation == aggregation and np.isclose(row.threshold, threshold):
                return row
        raise KeyError((threshold, aggregation))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "aggregation", *METRICS, "TP", "FP", "FN", "TN"])
        for r in self.rows:
            s, c = r.scores, r.counts
            w.writerow([f"{r.threshold:g}", r.aggregation,
                        *(f"{v:.6f}" for v in (s.csi, s.f1, s.precision, s.recall)),
                        c.tp, c.fp, c.fn, c.tn])
        return buf.getvalue()

    def to_text(self) -> str:
        header = f"{'threshold':>9} {'agg':>6} {'CSI':>7} {'F1':>7} {'Prec':>7} {'Recall':>7} " \
                 f"{'TP':>9} {'FP':>9} {'FN':>9} {'TN':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            s, c = r.scores, r.counts
            flag = " *" if s.degenerate else ""
            lines.append(f"{r.threshold:>7g}mm {r.aggregation:>6} {s.csi:7.3f} {s.f1:7.3f} "
                         f"{s.precision:7.3f} {s.recall:7.3f} {c.tp:9d} {c.fp:9d} {c.fn:9d} {c.tn:10d}{flag}")
        if any(r.scores.degenerate for r in self.rows):
            lines.append("* some ratios were 0/0 and are reported as 0")
        return "\n".join(lines) + "\n"


def _macro(per_sample: list[Contingency]) -> tuple[Scores, int]:
    values = {m: [] for m in METRICS}
    for c in per_sample:
        s = scores(c)
        for m, v in s.as_dict().items():
            if m not in s.degenerate:
                values[m].append(v)
    avg = {m: (float(np.mean(v)) if v else 0.0) for m, v in values.items()}
    flags = tuple(m for m in METRICS if not values[m])
    used = max((len(v) for v in values.values()), default=0)
    return Scores(avg["CSI"], avg["F1"], avg["precision"], avg["recall"], flags), used


def evaluate_predictions(pred_classes, truth_qpe, gamma) -> MetricTable:
    """Pooled and per-sample-averaged scores for [N,H,W] class maps."""
    ts = gamma if isinstance(gamma, ThresholdSet) else ThresholdSet(tuple(gamma))
    pred = np.asarray(pred_classes)
    truth = np.asarray(truth_qpe)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    table = MetricTable()
    for k, r in enumerate(ts.values):
        per = [contingency(pred[i], truth[i], ts, k) for i in range(len(pred))]
        pooled = sum(per, Contingency())
        table.rows.append(MetricRow(r, "pooled", scores(pooled), pooled, len(per)))
        macro, used = _macro(per)
        table.rows.append(MetricRow(r, "macro", macro, pooled, used))
    return table


def evaluate(ckpt, dataset, gamma=None, batch_size: int = 8) -> MetricTable:
    """Argmax segmentation of ``dataset`` (already normalized) scored against its QPE."""
    from .training import predict_classes

    ts = ThresholdSet(tuple(gamma if gamma is not None else ckpt.phase.thresholds)) \
        if not isinstance(gamma, ThresholdSet) else gamma
    pred = predict_classes(ckpt.store, ckpt.model, dataset.variables, batch_size)
    return evaluate_predictions(pred, dataset.qpe, ts)
