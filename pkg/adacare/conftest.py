# adacare/conftest.py
import numpy as np
import pytest

from adacare.models.configs import ModelConfig, TrainConfig
from adacare.models.sequence import Dataset, PatientSequence


def make_patient(n_visits, n_features, seed=0, patient_id="p0", labels=None, mask=None, group=None):
    """Gaussian visits with random labels unless given."""
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = rng.integers(0, 2, size=n_visits).astype(np.float64)
    if mask is None:
        mask = np.ones(n_visits)
    return PatientSequence(
        patient_id=patient_id,
        visits=rng.normal(size=(n_visits, n_features)),
        labels=labels,
        mask=mask,
        group=group,
    )


def separable_dataset(n_patients, seed, n_features=3, min_visits=3, max_visits=8, noise=0.1):
    """Feature 0 equals the visit label plus a little noise; the rest is noise."""
    rng = np.random.default_rng(seed)
    patients = []
    for i in range(n_patients):
        n_visits = int(rng.integers(min_visits, max_visits + 1))
        labels = rng.integers(0, 2, size=n_visits).astype(np.float64)
        visits = rng.normal(0.0, 1.0, size=(n_visits, n_features))
        visits[:, 0] = labels + rng.normal(0.0, noise, size=n_visits)
        patients.append(PatientSequence(f"s{i:03d}", visits, labels, np.ones(n_visits)))
    return Dataset(tuple(patients), tuple(f"f{j}" for j in range(n_features)))


@pytest.fixture
def tiny_config():
    return ModelConfig(preset="tiny")


@pytest.fixture
def patient():
    return make_patient(5, 3, seed=11)


@pytest.fixture
def toy_splits():
    return separable_dataset(48, seed=1), separable_dataset(16, seed=2)


@pytest.fixture
def fast_train_config():
    return TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=20, patience=20, seed=3)
