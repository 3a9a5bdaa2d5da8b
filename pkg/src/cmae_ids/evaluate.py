"""Confusion matrices, macro one-vs-rest metrics, security error counts and
report emitters."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ATTACK_CLASSES, NUM_CLASSES, ClassLabel
from .errors import InputError

REPORT_COLUMNS = ("Length", "Model", "Tokenizer", "Accuracy", "Precision", "Recall", "F1",
                  "FPRate", "WronglyDetected", "MissedAttacks", "TrainHours", "PredictPerSec")
ZERO_CONVENTION = ("Per-class precision, recall and F1 with a zero denominator count as 0 "
                   "and are still averaged over all 7 classes.")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are actual labels, columns predicted labels."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InputError("confusion matrix must be square")
        if (c < 0).any():
            raise InputError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self):
        """Per-class (tp, fp, fn, tn) arrays."""
        c = self.counts
        tp = np.diag(c).copy()
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        tn = c.sum() - tp - fp - fn
        return tp, fp, fn, tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(predictions, labels, n_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(p) != len(y):
        raise InputError(f"{len(p)} predictions vs {len(y)} labels")
    if len(p) and (min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(y * n_classes + p, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


@dataclass
class MacroReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fp_rate: float
    per_class_correct: list = field(default_factory=list)
    wrongly_detected: int = 0
    missed_attacks: int = 0
    samples: int = 0


def per_class_rates(cm: ConfusionMatrix) -> dict:
    tp, fp, fn, tn = cm.one_vs_rest()
    n = tp + fp + fn + tn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return {
        "accuracy": _safe_div(tp + tn, n),
        "precision": precision,
        "recall": recall,
        "f1": _safe_div(2 * precision * recall, precision + recall),
        "fp_rate": _safe_div(fp, fp + tn),
    }


def security_counts(cm: ConfusionMatrix) -> tuple:
    """(wrongly_detected, missed_attacks): Benign flagged as any attack, and
    attacks let through as Benign. Attack-to-attack confusion counts for neither."""
    c = cm.counts
    attacks = [int(a) for a in ATTACK_CLASSES]
    b = int(ClassLabel.Benign)
    return int(c[b, attacks].sum()), int(c[attacks, b].sum())


def per_class_correct(cm: ConfusionMatrix) -> list:
    return [int(v) for v in np.diag(cm.counts)]


def macro_metrics(cm: ConfusionMatrix) -> MacroReport:
    """Equal-weight means of the per-class one-vs-rest rates, as percentages.
    F1 is the mean of per-class F1 scores."""
    r = per_class_rates(cm)
    wd, ma = security_counts(cm) if cm.n_classes == NUM_CLASSES else (0, 0)
    return MacroReport(
        accuracy=100.0 * float(r["accuracy"].mean()),
        precision=100.0 * float(r["precision"].mean()),
        recall=100.0 * float(r["recall"].mean()),
        f1=100.0 * float(r["f1"].mean()),
        fp_rate=100.0 * float(r["fp_rate"].mean()),
        per_class_correct=per_class_correct(cm),
        wrongly_detected=wd,
        missed_attacks=ma,
        samples=cm.total,
    )


# --------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    length: str
    model: str
    tokenizer: str
    report: MacroReport
    train_hours: float = 0.0
    predict_per_sec: float = 0.0

    def cells(self) -> list:
        r = self.report
        return [str(self.length), self.model, self.tokenizer,
                f"{r.accuracy:.4f}", f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}",
                f"{r.fp_rate:.4f}", str(r.wrongly_detected), str(r.missed_attacks),
                f"{self.train_hours:.4f}", f"{self.predict_per_sec:.1f}"]


def emit_report(rows: ReportRow | Sequence[ReportRow], format: str = "text") -> str:
    if isinstance(rows, ReportRow):
        rows = [rows]
    table = [r.cells() for r in rows]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(table)
        return buf.getvalue()
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    widths = [max(len(h), *(len(t[i]) for t in table)) if table else len(h)
              for i, h in enumerate(REPORT_COLUMNS)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(REPORT_COLUMNS, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for t in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(t, widths)))
    lines.append("")
    lines.append(ZERO_CONVENTION)
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise InputError("report header does not match the expected columns")
    return [dict(zip(REPORT_COLUMNS, r)) for r in rows[1:]]


def per_class_table(cm: ConfusionMatrix) -> str:
    """Correct predictions per class plus the two security counts."""
    totals = cm.counts.sum(axis=1)
    correct = per_class_correct(cm)
    lines = [f"{'Class':<12}{'Correct':>10}{'Total':>10}"]
    for c in ClassLabel:
        lines.append(f"{c.display_name:<12}{correct[c]:>10}{int(totals[c]):>10}")
    wd, ma = security_counts(cm)
    lines.append(f"Wrongly detected (benign flagged): {wd}")
    lines.append(f"Missed attacks (attack passed as benign): {ma}")
    return "\n".join(lines) + "\n"


PREDICTION_HEADER = ("source_id", "actual", "predicted") + tuple(f"p{i}" for i in range(NUM_CLASSES))


def prediction_dump(source_ids, actual, probs: np.ndarray) -> str:
    """CSV rows ``source_id,actual,predicted,p0..p6``; ``actual`` may be None
    entries for unlabeled input and is then left empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    pred = probs.argmax(axis=1)
    for sid, a, p, row in zip(source_ids, actual, pred, probs):
        w.writerow([sid, "" if a is None else ClassLabel(int(a)).name, ClassLabel(int(p)).name,
                    *(f"{v:.6f}" for v in row)])
    return buf.getvalue()
