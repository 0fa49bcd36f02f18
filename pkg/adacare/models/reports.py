# adacare/models/reports.py
"""
Result entities: scored visit pools, evaluation and training reports,
recalibration traces, and feature-importance matrices.

JSON-facing reports are pydantic models so they serialize deterministically;
array-carrying entities are frozen dataclasses.
"""
from dataclasses import dataclass, field
import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from adacare.errors import MetricError, ShapeError

logger = logging.getLogger(__name__)

METRIC_NAMES = ("auprc", "auroc", "min_se_pp")


# ---------------------------------------------------------------------------
# Scored visits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScoredSet:
    """
    Scores and binary labels pooled over masked-in visits.

    ``offsets`` delimits each patient's visits (patient i owns
    ``scores[offsets[i]:offsets[i + 1]]``) so bootstrap resampling can work at
    patient granularity.
    """
    scores: np.ndarray
    labels: np.ndarray
    offsets: Optional[np.ndarray] = None
    patient_ids: tuple = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if scores.shape != labels.shape:
            raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ in length")
        if not np.isin(labels, (0.0, 1.0)).all():
            raise MetricError("labels must be 0 or 1")
        offsets = self.offsets
        if offsets is None:
            offsets = np.arange(scores.shape[0] + 1)
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets[0] != 0 or offsets[-1] != scores.shape[0] or np.any(np.diff(offsets) < 0):
            raise ShapeError("patient offsets must start at 0, be non-decreasing, and end at the sample count")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "patient_ids", tuple(self.patient_ids))

    @classmethod
    def from_patients(cls, scores_per_patient, labels_per_patient, patient_ids=()):
        """Pool per-patient score/label vectors, keeping patient boundaries."""
        lengths = [len(s) for s in scores_per_patient]
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        scores = np.concatenate(scores_per_patient) if lengths else np.zeros(0)
        labels = np.concatenate(labels_per_patient) if lengths else np.zeros(0)
        return cls(scores, labels, offsets, tuple(patient_ids))

    def __len__(self):
        return self.scores.shape[0]

    @property
    def n_patients(self):
        return self.offsets.shape[0] - 1

    @property
    def n_positive(self):
        return int(self.labels.sum())

    @property
    def n_negative(self):
        return len(self) - self.n_positive

    @property
    def prevalence(self):
        return self.n_positive / len(self) if len(self) else float("nan")

    def has_both_classes(self):
        return self.n_positive > 0 and self.n_negative > 0

    def resample(self, patient_indices):
        """Pool the visits of the given patients (repeats allowed), in order."""
        slices = [slice(self.offsets[i], self.offsets[i + 1]) for i in patient_indices]
        if not slices:
            return ScoredSet(np.zeros(0), np.zeros(0))
        return ScoredSet(np.concatenate([self.scores[s] for s in slices]),
                         np.concatenate([self.labels[s] for s in slices]))


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    precision: float
    recall: float
    tpr: float
    fpr: float


# ---------------------------------------------------------------------------
# JSON reports
# ---------------------------------------------------------------------------

class _Report(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    def to_json(self):
        return self.model_dump_json(indent=2) + "\n"


class BootstrapStat(_Report):
    mean: float
    std: float


class EvalReport(_Report):
    """Point estimates on the full set plus bootstrap mean/std per metric."""
    auprc: float
    auroc: float
    min_se_pp: float
    bootstrap: dict[str, BootstrapStat]
    n_samples: int
    n_patients: int
    n_positive: int
    n_resamples: int
    n_skipped: int
    seed: int

    def metric(self, name):
        return getattr(self, name)


class EpochRecord(_Report):
    """One line of the training history."""
    epoch: int
    train_loss: float
    val_auprc: float
    val_auroc: Optional[float]
    val_min_se_pp: float

    def to_line(self):
        return self.model_dump_json() + "\n"


class GradcheckReport(_Report):
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_params: int
    seed: int
    eps: float

    def passed(self, tolerance):
        return self.max_rel_err < tolerance


class FoldResult(_Report):
    fold: int
    n_train: int
    n_valid: int
    n_test: int
    best_epoch: int
    auprc: float
    auroc: float
    min_se_pp: float


class CVReport(_Report):
    """Per-fold test metrics with their mean and std across folds."""
    k: int
    seed: int
    folds: list[FoldResult]
    summary: dict[str, BootstrapStat]


class VariantResult(_Report):
    variant: str
    seeds: list[int]
    auprc: list[float]
    auroc: list[float]
    min_se_pp: list[float]
    median_auprc: float
    median_auroc: float
    median_min_se_pp: float


class AblationReport(_Report):
    cohort: str
    n_patients: int
    results: list[VariantResult]

    def result(self, variant):
        for row in self.results:
            if row.variant == variant:
                return row
        raise KeyError(variant)


# ---------------------------------------------------------------------------
# Interpretability
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RecalibrationTrace:
    """
    Per-visit recalibration weights of one patient.

    ``raw_weights`` is (T x N_r); ``conv_weights`` is (T x K*N_c), empty when
    the convolution path is off. Conv columns come in blocks of ``block_width``,
    one block per dilation rate named in ``rate_labels``.
    """
    raw_weights: np.ndarray
    conv_weights: np.ndarray
    rate_labels: tuple = ()
    block_width: int = 0
    feature_names: tuple = ()
    patient_id: Optional[str] = None
    group: Optional[str] = None

    def __post_init__(self):
        raw = np.asarray(self.raw_weights, dtype=np.float64)
        conv = np.asarray(self.conv_weights, dtype=np.float64)
        if raw.ndim != 2 or conv.ndim != 2 or raw.shape[0] != conv.shape[0]:
            raise ShapeError(f"trace weights must be 2-D with equal visit counts, got {raw.shape} and {conv.shape}")
        if conv.shape[1] != len(self.rate_labels) * self.block_width:
            raise ShapeError(f"conv weights width {conv.shape[1]} does not match {len(self.rate_labels)} "
                             f"blocks of {self.block_width}")
        if self.feature_names and len(self.feature_names) != raw.shape[1]:
            raise ShapeError(f"{len(self.feature_names)} feature names for {raw.shape[1]} raw weights")
        object.__setattr__(self, "raw_weights", raw)
        object.__setattr__(self, "conv_weights", conv)
        object.__setattr__(self, "rate_labels", tuple(self.rate_labels))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_visits(self):
        return self.raw_weights.shape[0]

    def block_means(self):
        """(T x K) mean conv weight per dilation-rate block."""
        n_visits = self.conv_weights.shape[0]
        return self.conv_weights.reshape(n_visits, len(self.rate_labels), self.block_width).mean(axis=2)


@dataclass(frozen=True, eq=False)
class ImportanceMatrix:
    """
    Mean recalibration weight per row (feature or dilation block) and outcome group.

    ``counts[g]`` is the number of visits (or patients, for patient-level
    averaging) behind column g; every reported column has a count >= 1.
    """
    row_labels: tuple
    columns: tuple
    values: np.ndarray
    counts: np.ndarray
    scope: str = "raw"
    average: str = "visit"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if values.shape != (len(self.row_labels), len(self.columns)):
            raise ShapeError(f"importance values have shape {values.shape}, expected "
                             f"({len(self.row_labels)}, {len(self.columns)})")
        if counts.shape != (len(self.columns),) or np.any(counts < 1):
            raise ShapeError("every importance column needs a positive count")
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "counts", counts)

    def column(self, group):
        return self.values[:, self.columns.index(group)]

    def cell(self, row, group):
        return float(self.values[self.row_labels.index(row), self.columns.index(group)])

    def rank_of(self, row, group):
        """1-based rank of ``row`` within a group's column, largest weight first."""
        col = self.column(group)
        order = np.argsort(-col, kind="stable")
        return int(np.nonzero(order == self.row_labels.index(row))[0][0]) + 1

    def merge(self, other):
        """Count-weighted combination of two partial aggregations over disjoint traces."""
        if self.row_labels != other.row_labels or (self.scope, self.average) != (other.scope, other.average):
            raise ShapeError("cannot merge importance matrices with different rows, scope or averaging")
        columns = tuple(sorted(set(self.columns) | set(other.columns)))
        values = np.zeros((len(self.row_labels), len(columns)))
        counts = np.zeros(len(columns), dtype=np.int64)
        for j, group in enumerate(columns):
            total = np.zeros(len(self.row_labels))
            for part in (self, other):
                if group in part.columns:
                    c = part.counts[part.columns.index(group)]
                    total += part.column(group) * c
                    counts[j] += c
            values[:, j] = total / counts[j]
        return ImportanceMatrix(self.row_labels, columns, values, counts, self.scope, self.average,
                                dict(self.metadata))
