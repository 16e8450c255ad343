"""Classification metrics over the three reporting cohorts.

Thresholded metrics (accuracy, F1, sensitivity, specificity) use a 0.5
cut on sigmoid scores with ties predicted positive. AUC is the
Mann-Whitney statistic — P(score_pos > score_neg) + 0.5 P(equal) —
computed by the rank formula with tie-averaged ranks, which matches the
explicit all-pairs count exactly. Undefined ratios (0/0) are reported as
None rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .data import BreastExam
from .errors import EmptyInput, SingleClass

DEFAULT_THRESHOLD = 0.5


class Cohort(str, Enum):
    BOTH_VIEWS = "BothViews"
    MISSING_VIEW = "MissingView"
    ALL = "All"


@dataclass(frozen=True)
class PredictionRecord:
    breast_id: str
    cohort: Cohort
    label: int
    score: float
    augment: str = "identity"


def confusion(
    records: list[PredictionRecord], threshold: float = DEFAULT_THRESHOLD
) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) at the given threshold; score >= threshold predicts positive."""
    if not records:
        raise EmptyInput("no prediction records")
    tp = fp = tn = fn = 0
    for r in records:
        pred = r.score >= threshold
        if r.label == 1:
            tp, fn = tp + pred, fn + (not pred)
        else:
            fp, tn = fp + pred, tn + (not pred)
    return tp, fp, tn, fn


def threshold_metrics(
    tp: int, fp: int, tn: int, fn: int
) -> tuple[float, float | None, float | None, float | None]:
    """(accuracy, f1, sensitivity, specificity); None where the denominator is zero."""
    n = tp + fp + tn + fn
    if n == 0:
        raise EmptyInput("empty confusion counts")
    accuracy = (tp + tn) / n
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else None
    sensitivity = tp / (tp + fn) if (tp + fn) else None
    specificity = tn / (tn + fp) if (tn + fp) else None
    return accuracy, f1, sensitivity, specificity


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Tie-aware AUC via average ranks; exact half-credit for ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # half-integer, exact
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_or_none(labels: np.ndarray, scores: np.ndarray) -> float | None:
    try:
        return auc(labels, scores)
    except (SingleClass, EmptyInput):
        return None


@dataclass(frozen=True)
class CohortMetrics:
    n_pos: int
    n_neg: int
    accuracy: float | None
    auc: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "f1": self.f1,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


EMPTY_COHORT = CohortMetrics(0, 0, None, None, None, None, None)


@dataclass(frozen=True)
class MetricsReport:
    cohorts: dict[str, CohortMetrics]

    def to_dict(self) -> dict:
        return {name: cm.to_dict() for name, cm in self.cohorts.items()}


def cohort_metrics(
    records: list[PredictionRecord], threshold: float = DEFAULT_THRESHOLD
) -> CohortMetrics:
    if not records:
        return EMPTY_COHORT
    labels = np.array([r.label for r in records])
    scores = np.array([r.score for r in records])
    tp, fp, tn, fn = confusion(records, threshold)
    accuracy, f1, sensitivity, specificity = threshold_metrics(tp, fp, tn, fn)
    return CohortMetrics(
        n_pos=int((labels == 1).sum()),
        n_neg=int((labels == 0).sum()),
        accuracy=accuracy,
        auc=auc_or_none(labels, scores),
        f1=f1,
        sensitivity=sensitivity,
        specificity=specificity,
    )


def report_from_records(
    records: list[PredictionRecord], threshold: float = DEFAULT_THRESHOLD
) -> MetricsReport:
    """Metrics for the BothViews / MissingView cohorts and their pooled union."""
    both = [r for r in records if r.cohort == Cohort.BOTH_VIEWS]
    missing = [r for r in records if r.cohort == Cohort.MISSING_VIEW]
    return MetricsReport(
        cohorts={
            Cohort.BOTH_VIEWS.value: cohort_metrics(both, threshold),
            Cohort.MISSING_VIEW.value: cohort_metrics(missing, threshold),
            Cohort.ALL.value: cohort_metrics(records, threshold),
        }
    )


def predict_records(
    model, exams: list[BreastExam], batch_size: int = 64
) -> list[PredictionRecord]:
    """Inference-mode forward over test exams -> one record per exam."""
    records = []
    for i in range(0, len(exams), batch_size):
        batch = exams[i : i + batch_size]
        with torch.no_grad():
            logits = model.forward_exams(batch, training=False)
            scores = torch.sigmoid(logits)
        for exam, score in zip(batch, scores):
            records.append(
                PredictionRecord(
                    breast_id=exam.breast_id,
                    cohort=Cohort.BOTH_VIEWS if exam.both_views else Cohort.MISSING_VIEW,
                    label=exam.label,
                    score=float(score),
                    augment=exam.augment,
                )
            )
    return records


def aggregate_by_breast(records: list[PredictionRecord]) -> list[PredictionRecord]:
    """Collapse augmented variants to one record per breast via mean score."""
    groups: dict[str, list[PredictionRecord]] = {}
    for r in records:
        groups.setdefault(r.breast_id, []).append(r)
    out = []
    for breast_id in sorted(groups):
        rs = groups[breast_id]
        out.append(
            PredictionRecord(
                breast_id=breast_id,
                cohort=rs[0].cohort,
                label=rs[0].label,
                score=float(np.mean([r.score for r in rs])),
                augment="aggregated",
            )
        )
    return out


def evaluate(
    model, exams: list[BreastExam], threshold: float = DEFAULT_THRESHOLD, batch_size: int = 64
) -> tuple[MetricsReport, list[PredictionRecord]]:
    """Score test exams and compute the three-cohort report."""
    records = predict_records(model, exams, batch_size=batch_size)
    return report_from_records(records, threshold), records
