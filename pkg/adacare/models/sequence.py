# adacare/models/sequence.py
"""Patient visit sequences and datasets."""
from dataclasses import dataclass, field, replace
import logging
from typing import Optional

import numpy as np

from adacare.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_GROUP = "all"


def _frozen(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PatientSequence:
    """One patient's visit matrix (T x N_r) with per-visit labels and validity mask."""
    patient_id: str
    visits: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    group: Optional[str] = None
    visit_index: Optional[np.ndarray] = None

    def __post_init__(self):
        visits = _frozen(self.visits)
        if visits.ndim != 2:
            raise ShapeError(f"patient {self.patient_id}: visits must be 2-D, got shape {visits.shape}")
        n_visits = visits.shape[0]
        if n_visits < 1:
            raise DataError(f"patient {self.patient_id}: at least one visit is required")
        labels = _frozen(self.labels)
        mask = _frozen(self.mask)
        if labels.shape != (n_visits,) or mask.shape != (n_visits,):
            raise ShapeError(f"patient {self.patient_id}: labels {labels.shape} and mask {mask.shape} "
                             f"must both have shape ({n_visits},)")
        visit_index = self.visit_index
        visit_index = _frozen(np.arange(n_visits) if visit_index is None else visit_index, np.int64)
        if visit_index.shape != (n_visits,):
            raise ShapeError(f"patient {self.patient_id}: visit_index has shape {visit_index.shape}")
        object.__setattr__(self, "visits", visits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "visit_index", visit_index)

    @property
    def n_visits(self):
        return self.visits.shape[0]

    @property
    def n_features(self):
        return self.visits.shape[1]

    @property
    def group_tag(self):
        return self.group if self.group is not None else DEFAULT_GROUP

    @property
    def has_missing(self):
        return bool(np.isnan(self.visits).any())

    @property
    def n_labelled(self):
        return int(self.mask.sum())

    def truncated(self, max_len):
        if self.n_visits <= max_len:
            return self
        return replace(self, visits=self.visits[:max_len], labels=self.labels[:max_len],
                       mask=self.mask[:max_len], visit_index=self.visit_index[:max_len])

    def with_visits(self, visits):
        return replace(self, visits=visits)

    def equals(self, other):
        """Bit-level equality of ids, tags and arrays (NaN positions must match)."""
        return (self.patient_id == other.patient_id and self.group == other.group
                and np.array_equal(self.visits, other.visits, equal_nan=True)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.visit_index, other.visit_index))


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics fitted on a training split."""
    mean: np.ndarray
    std: np.ndarray

    def apply(self, visits):
        return (visits - self.mean) / self.std


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable list of patients sharing one feature layout."""
    patients: tuple
    feature_names: tuple
    norm: Optional[NormStats] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        width = len(self.feature_names)
        for patient in self.patients:
            if patient.n_features != width:
                raise ShapeError(f"patient {patient.patient_id} has {patient.n_features} features, "
                                 f"dataset declares {width}")

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def __getitem__(self, index):
        return self.patients[index]

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def n_visits(self):
        return sum(p.n_visits for p in self.patients)

    @property
    def patient_ids(self):
        return [p.patient_id for p in self.patients]

    @property
    def groups(self):
        return sorted({p.group_tag for p in self.patients})

    def subset(self, indices):
        return replace(self, patients=tuple(self.patients[i] for i in indices))

    def with_patients(self, patients, **changes):
        return replace(self, patients=tuple(patients), **changes)

    def prevalence(self):
        labels = np.concatenate([p.labels[p.mask > 0] for p in self.patients]) if self.patients else np.array([])
        return float(labels.mean()) if labels.size else float("nan")

    def equals(self, other):
        return (self.feature_names == other.feature_names and len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.patients, other.patients)))
