"""Tests for CSV ingestion, preprocessing, splitting and the synthetic cohort generator."""
import numpy as np
import pytest
from scipy.special import expit

from adacare.conftest import make_patient, separable_dataset
from adacare.errors import DataError, ParseError, SynthError
from adacare.models.configs import SynthSpec
from adacare.models.reports import ScoredSet
from adacare.models.sequence import Dataset
from adacare.services.data_service import (bootstrap_resample, impute, impute_visits, load_csv,
                                           prepare, prepare_folds, select_features, split_counts,
                                           write_csv)
from adacare.services.metrics_service import auroc
from adacare.services.synth_service import (PROB_CEIL, PROB_FLOOR, calibrate_intercept, synth_generate,
                                            trailing_window, write_synth)

nan = np.nan


def write_files(tmp_path, records, labels, groups=None):
    paths = [tmp_path / "records.csv", tmp_path / "labels.csv"]
    paths[0].write_text(records, encoding="utf-8")
    paths[1].write_text(labels, encoding="utf-8")
    if groups is not None:
        paths.append(tmp_path / "groups.csv")
        paths[2].write_text(groups, encoding="utf-8")
    return paths


RECORDS = (
    "patient_id,visit_index,hr,bp\n"
    "a,1,80,\n"
    "a,0,70,120\n"
    "b,0,,130\n"
)
LABELS = (
    "patient_id,visit_index,label\n"
    "a,0,0\n"
    "a,1,1\n"
)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def test_load_csv_orders_visits_and_masks_unlabelled(tmp_path):
    ds = load_csv(*write_files(tmp_path, RECORDS, LABELS, "patient_id,group\na,acute\n"))
    assert ds.feature_names == ("hr", "bp")
    assert ds.patient_ids == ["a", "b"]
    a, b = ds
    np.testing.assert_array_equal(a.visits, [[70.0, 120.0], [80.0, nan]])
    np.testing.assert_array_equal(a.labels, [0.0, 1.0])
    np.testing.assert_array_equal(a.visit_index, [0, 1])
    np.testing.assert_array_equal(b.mask, [0.0])
    assert a.group == "acute" and b.group_tag == "all"


@pytest.mark.parametrize("records, labels, line", [
    ("patient_id,visit_index,hr\na,0,1\na,0,2\n", "patient_id,visit_index,label\n", 3),
    ("patient_id,visit_index,hr\na,0,x\n", "patient_id,visit_index,label\n", 2),
    ("patient_id,visit_index,hr\na,0,1\n", "patient_id,visit_index,label\nz,0,1\n", 2),
    ("patient_id,visit_index,hr\na,0,1\n", "patient_id,visit_index,label\na,5,1\n", 2),
    ("patient_id,visit_index,hr\na,0,1\n", "patient_id,visit_index,label\na,0,2\n", 2),
    ("id,visit,hr\na,0,1\n", "patient_id,visit_index,label\n", 1),
    ("patient_id,visit_index,hr\n\na,0,1\n\na,0,2\n", "patient_id,visit_index,label\n", 5),
    ("patient_id,visit_index,hr\na,0,1\na,1\n", "patient_id,visit_index,label\n", 3),
    ("patient_id,visit_index,hr\na,0,1\na,1,2,3\n", "patient_id,visit_index,label\n", 3),
    ("patient_id,visit_index,hr\na,0,1\n", "patient_id,visit_index,label\n\na,0,1\na,0,0\n", 4),
])
def test_load_csv_reports_line_numbers(tmp_path, records, labels, line):
    with pytest.raises(ParseError) as excinfo:
        load_csv(*write_files(tmp_path, records, labels))
    assert excinfo.value.line == line


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(ParseError, match="not found"):
        load_csv(tmp_path / "nope.csv", tmp_path / "labels.csv")


def test_write_csv_round_trip(tmp_path):
    ds = load_csv(*write_files(tmp_path, RECORDS, LABELS))
    out = [tmp_path / "out" / name for name in ("records.csv", "labels.csv")]
    write_csv(ds, *out)
    assert load_csv(*out).equals(ds)


def test_short_row_names_expected_field_count(tmp_path):
    with pytest.raises(ParseError, match="expected 3 fields, found 2"):
        load_csv(*write_files(tmp_path, "patient_id,visit_index,hr\na,0,1\nb,0\n", LABELS))


def test_write_csv_layout(tmp_path):
    ds = load_csv(*write_files(tmp_path, RECORDS, LABELS, "patient_id,group\na,acute\n"))
    out = [tmp_path / "out" / name for name in ("records.csv", "labels.csv", "groups.csv")]
    write_csv(ds, *out)
    assert out[0].read_text(encoding="utf-8") == (
        "patient_id,visit_index,hr,bp\n"
        "a,0,70,120\n"
        "a,1,80,\n"
        "b,0,,130\n"
    )
    assert out[1].read_text(encoding="utf-8") == LABELS
    assert out[2].read_text(encoding="utf-8") == "patient_id,group\na,acute\nb,all\n"


# ---------------------------------------------------------------------------
# Imputation and feature selection
# ---------------------------------------------------------------------------

def test_impute_carries_forward_and_backfills_leading_gaps():
    visits = np.array([[nan, 1.0], [2.0, nan], [nan, nan], [4.0, 5.0]])
    np.testing.assert_array_equal(impute_visits(visits), [[2.0, 1.0], [2.0, 1.0], [2.0, 1.0], [4.0, 5.0]])


def test_impute_is_idempotent():
    rng = np.random.default_rng(0)
    visits = rng.normal(size=(8, 4))
    visits[rng.random((8, 4)) < 0.4] = nan
    visits[0] = rng.normal(size=4)
    once = impute_visits(visits)
    assert not np.isnan(once).any()
    np.testing.assert_array_equal(impute_visits(once), once)


def test_impute_names_never_observed_feature():
    patient = make_patient(3, 2).with_visits(np.array([[1.0, nan], [2.0, nan], [3.0, nan]]))
    with pytest.raises(DataError, match="'bp'"):
        impute(Dataset((patient,), ("hr", "bp")))


def test_select_features_keeps_well_observed():
    visits = np.array([
        [1.0, 1.0, nan],
        [1.0, nan, nan],
        [1.0, 1.0, 1.0],
        [1.0, 1.0, nan],
        [1.0, nan, 1.0],
    ])
    ds = Dataset((make_patient(5, 3).with_visits(visits),), ("always", "most", "some"))
    kept = select_features(ds, min_observed_frac=0.6)
    assert kept.feature_names == ("always",)
    assert select_features(ds, min_observed_frac=0.5).feature_names == ("always", "most")


# ---------------------------------------------------------------------------
# Splitting and normalization
# ---------------------------------------------------------------------------

def test_split_counts_default_fractions():
    np.testing.assert_array_equal(split_counts(10000, (0.7225, 0.1275, 0.15)), [7225, 1275, 1500])
    assert split_counts(7, (0.7225, 0.1275, 0.15)).sum() == 7


def test_prepare_partitions_patients():
    ds = separable_dataset(200, seed=3)
    train, valid, test = prepare(ds, seed=4)
    ids = [set(part.patient_ids) for part in (train, valid, test)]
    assert [len(part) for part in (train, valid, test)] == list(split_counts(200, (0.7225, 0.1275, 0.15)))
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert ids[0] | ids[1] | ids[2] == set(ds.patient_ids)
    order = {pid: i for i, pid in enumerate(ds.patient_ids)}
    for part in (train, valid, test):
        positions = [order[pid] for pid in part.patient_ids]
        assert positions == sorted(positions)


def test_prepare_is_deterministic():
    ds = separable_dataset(60, seed=5)
    first = prepare(ds, seed=9)
    second = prepare(ds, seed=9)
    assert all(a.equals(b) for a, b in zip(first, second))
    assert not first[0].equals(prepare(ds, seed=10)[0])


def test_prepare_normalizes_with_training_statistics():
    ds = separable_dataset(80, seed=6)
    train, valid, test = prepare(ds, seed=1)
    stacked = np.concatenate([p.visits for p in train])
    np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(stacked.std(axis=0), 1.0, rtol=1e-12)
    raw = {p.patient_id: p for p in ds}
    for patient in test:
        expected = (raw[patient.patient_id].visits - train.norm.mean) / train.norm.std
        np.testing.assert_array_equal(patient.visits, expected)
    assert valid.norm is train.norm and test.metadata["split"] == "test"


def test_prepare_truncates_sequences():
    ds = separable_dataset(40, seed=7, min_visits=5, max_visits=9)
    for part in prepare(ds, max_len=3, seed=0):
        assert max(p.n_visits for p in part) <= 3


def test_prepare_rejects_empty_split_and_missing_values():
    with pytest.raises(DataError, match="valid"):
        prepare(separable_dataset(2, seed=0))
    patient = make_patient(3, 2).with_visits(np.array([[1.0, nan], [2.0, 1.0], [3.0, 1.0]]))
    with pytest.raises(DataError):
        prepare(Dataset((patient,) * 10, ("a", "b")))


def test_prepare_drops_constant_features():
    ds = separable_dataset(30, seed=8)
    constant = [p.with_visits(np.column_stack([p.visits, np.ones(p.n_visits)])) for p in ds]
    ds = Dataset(tuple(constant), ds.feature_names + ("flat",))
    train, _, _ = prepare(ds, seed=0)
    assert "flat" not in train.feature_names and train.n_features == 3


def test_prepare_folds_cover_every_patient_once():
    ds = separable_dataset(20, seed=9)
    folds = prepare_folds(ds, k=4, seed=2)
    assert len(folds) == 4
    tested = [pid for _, _, test in folds for pid in test.patient_ids]
    assert sorted(tested) == sorted(ds.patient_ids)
    for train, valid, test in folds:
        assert len(train) + len(valid) + len(test) == 20
        assert not set(train.patient_ids) & set(test.patient_ids)
    with pytest.raises(DataError):
        prepare_folds(ds, k=21)


def test_bootstrap_resample_is_seeded():
    a = list(bootstrap_resample(range(7), n=5, seed=3))
    b = list(bootstrap_resample(range(7), n=5, seed=3))
    assert len(a) == 5
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert x.shape == (7,) and x.min() >= 0 and x.max() < 7
    with pytest.raises(DataError):
        next(bootstrap_resample([], n=1))


def test_bootstrap_resample_rejects_empty_set_on_call():
    with pytest.raises(DataError, match="empty test set"):
        bootstrap_resample(range(0), n=0)


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------

def small_spec(**changes):
    base = dict(n_patients=120, min_visits=5, max_visits=15, n_features=4, seed=1)
    return SynthSpec(**{**base, **changes})


def test_trailing_window():
    np.testing.assert_array_equal(trailing_window(np.array([0, 1, 0, 0, 0, 1.0]), 2), [0, 1, 1, 0, 0, 1])


def test_synth_is_deterministic():
    a = synth_generate(small_spec())
    b = synth_generate(small_spec())
    assert a.equals(b)
    assert a.metadata == b.metadata
    assert not a.equals(synth_generate(small_spec(seed=2)))


def test_synth_layout():
    ds = synth_generate(small_spec())
    assert len(ds) == 120 and ds.feature_names == ("f00", "f01", "f02", "f03")
    assert ds.patient_ids[:2] == ["p00000", "p00001"]
    assert set(ds.groups) <= {"chronic", "acute", "stable"}
    for patient in ds:
        assert 5 <= patient.n_visits <= 15
        assert patient.mask.all()


def test_synth_hits_prevalence():
    ds = synth_generate(small_spec(n_patients=300, min_visits=20, max_visits=60, prevalence=0.1))
    assert 0.08 <= ds.prevalence() <= 0.12


def test_chronic_patients_drift_down():
    ds = synth_generate(small_spec(noise_std=0.0, chronic_frac=1.0, acute_frac=0.0))
    for patient in ds:
        assert patient.group == "chronic"
        assert (np.diff(patient.visits[:, 0]) < 0).all()


def test_labels_ignore_features_without_signal():
    ds = synth_generate(small_spec(n_patients=300, min_visits=20, max_visits=40,
                                   trend_risk=0.0, spike_risk=0.0, prevalence=0.3))
    scores = [-p.visits[:, 0] + p.visits[:, 1] for p in ds]
    assert auroc(ScoredSet.from_patients(scores, [p.labels for p in ds])) == pytest.approx(0.5, abs=0.05)


def test_strong_spike_signal_is_recoverable():
    spec = SynthSpec.preset("spike", n_patients=200, min_visits=10, max_visits=20, n_features=3,
                            noise_std=0.0, spike_window=1, spike_risk=30.0, seed=4)
    draft = synth_generate(spec)
    spike_rate = float(np.mean(np.concatenate([p.visits[:, 1] > 0 for p in draft])))
    ds = synth_generate(spec.model_copy(update={"prevalence": spike_rate}))
    assert all(np.array_equal(a.visits, b.visits) for a, b in zip(draft, ds))
    scores = ScoredSet.from_patients([p.visits[:, 1] for p in ds], [p.labels for p in ds])
    assert auroc(scores) > 0.99


def test_unreachable_prevalence_raises():
    with pytest.raises(SynthError):
        synth_generate(small_spec(trend_risk=0.0, spike_risk=0.0, prevalence=0.99999))


def test_calibrated_intercept_matches_target():
    linear = np.random.default_rng(0).normal(scale=3.0, size=500)
    b = calibrate_intercept(linear, 0.2)
    assert np.clip(expit(b + linear), PROB_FLOOR, PROB_CEIL).mean() == pytest.approx(0.2, abs=1e-9)


def test_write_synth_round_trip(tmp_path):
    spec = small_spec(n_patients=20)
    ds = synth_generate(spec)
    paths = write_synth(ds, spec, tmp_path)
    loaded = load_csv(paths["records"], paths["labels"], paths["groups"])
    assert loaded.equals(ds)
    assert SynthSpec.model_validate_json(paths["spec"].read_text(encoding="utf-8")) == spec
