# adacare/services/data_service.py
"""
Dataset ingestion and preprocessing: CSV loading, feature selection,
carry-forward imputation, truncation, patient-level splitting and
train-only z-score normalization, k-fold splits, bootstrap resampling.
"""
import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd

from adacare.errors import ArtifactError, DataError, ParseError
from adacare.models.sequence import Dataset, NormStats, PatientSequence
from adacare.utils.environment import rng_for

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "valid", "test")



# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

KEYS = ["patient_id", "visit_index"]

# 17 significant digits round-trip every float64
CSV_FLOAT_FORMAT = "%.17g"


def _read_table(path):
    """
    Read a CSV file as stripped string cells.

    Returns:
        (header names, body DataFrame with positional columns, file line number of each body row)
    """
    path = Path(path)
    if not path.exists():
        raise ParseError("file not found", path=path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False,
                            skip_blank_lines=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ParseError("file is empty", path=path, line=1)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(f"malformed row ({e})", path=path, line=int(match.group(1)) if match else None)

    header = [str(h).strip() for h in frame.iloc[0].fillna("")]
    body = frame.iloc[1:]
    lines = np.arange(2, len(body) + 2)
    blank = body.fillna("").map(str.strip).eq("").all(axis=1).to_numpy()
    body, lines = body[~blank].reset_index(drop=True), lines[~blank]
    short = body.isna().any(axis=1).to_numpy()
    if short.any():
        i = int(np.argmax(short))
        raise ParseError(f"expected {len(header)} fields, found {int(body.iloc[i].notna().sum())}",
                         path=path, line=int(lines[i]))
    return header, body.map(str.strip), lines


def _raise_first(bad, frame, path, message):
    """ParseError at the first flagged row; ``message`` is formatted with that row's fields."""
    bad = np.asarray(bad, dtype=bool)
    if bad.any():
        row = frame.iloc[int(np.argmax(bad))].to_dict()
        raise ParseError(message.format(**row), path=path, line=int(row["line"]))


def _parse_integers(cells, lines, path, column):
    frame = pd.DataFrame({"cell": cells, "line": lines})
    _raise_first(~cells.str.fullmatch(r"[+-]?\d+").to_numpy(dtype=bool), frame, path,
                 "'{cell}' in column '" + column + "' is not an integer")
    return cells.map(int).to_numpy(dtype=np.int64)


def _parse_numbers(cells, lines, path, column):
    """Empty cells become NaN; anything else must parse as a finite number."""
    values = pd.to_numeric(cells, errors="coerce").to_numpy(dtype=np.float64)
    frame = pd.DataFrame({"cell": cells, "line": lines})
    _raise_first((cells != "").to_numpy() & ~np.isfinite(values), frame, path,
                 "invalid value '{cell}' in column '" + column + "' (expected a finite number)")
    return values


def _read_records(records_path):
    """Returns (feature names, key frame with file lines, value matrix) in file row order."""
    header, body, lines = _read_table(records_path)
    if len(header) < 3 or header[:2] != KEYS:
        raise ParseError("header must be 'patient_id,visit_index,<feature names...>'",
                         path=records_path, line=1)
    features = header[2:]
    if len(set(features)) != len(features):
        raise ParseError("duplicate feature names in header", path=records_path, line=1)
    if body.empty:
        raise ParseError("no records found", path=records_path)

    keys = pd.DataFrame({
        "patient_id": body[0],
        "visit_index": _parse_integers(body[1], lines, records_path, "visit_index"),
        "line": lines,
    })
    first_line = keys.groupby(KEYS, sort=False)["line"].transform("first")
    keys_with_first = keys.assign(first=first_line)
    _raise_first(keys.duplicated(KEYS), keys_with_first, records_path,
                 "duplicate visit ({patient_id}, {visit_index}); first seen on line {first}")
    values = np.column_stack([_parse_numbers(body[j + 2], lines, records_path, name)
                              for j, name in enumerate(features)])
    return features, keys, values


def _read_labels(labels_path, keys):
    header, body, lines = _read_table(labels_path)
    if header != ["patient_id", "visit_index", "label"]:
        raise ParseError("header must be 'patient_id,visit_index,label'", path=labels_path, line=1)
    labels = pd.DataFrame({
        "patient_id": body[0],
        "visit_index": _parse_integers(body[1], lines, labels_path, "visit_index"),
        "label": body[2],
        "line": lines,
    })
    _raise_first(~labels["patient_id"].isin(keys["patient_id"]), labels, labels_path,
                 "unknown patient '{patient_id}'")
    known = labels.merge(keys[KEYS], on=KEYS, how="left", indicator=True)["_merge"].eq("both")
    _raise_first(~known.to_numpy(), labels, labels_path, "patient '{patient_id}' has no visit {visit_index}")
    _raise_first(labels.duplicated(KEYS), labels, labels_path,
                 "duplicate label for ({patient_id}, {visit_index})")
    _raise_first(~labels["label"].isin(["0", "1"]), labels, labels_path, "label must be 0 or 1, got '{label}'")
    return labels.assign(label=labels["label"].astype(np.float64))


def _read_groups(groups_path, keys):
    header, body, lines = _read_table(groups_path)
    if header != ["patient_id", "group"]:
        raise ParseError("header must be 'patient_id,group'", path=groups_path, line=1)
    groups = pd.DataFrame({"patient_id": body[0], "group": body[1], "line": lines})
    _raise_first(~groups["patient_id"].isin(keys["patient_id"]), groups, groups_path,
                 "unknown patient '{patient_id}'")
    _raise_first(groups["patient_id"].duplicated(), groups, groups_path,
                 "duplicate group for patient '{patient_id}'")
    return dict(zip(groups["patient_id"], groups["group"]))


def load_csv(records_path, labels_path, groups_path=None):
    """
    Load a dataset from the records, labels and optional groups CSVs.

    Args:
        records_path: ``patient_id,visit_index,<features...>``; empty cell = missing
        labels_path: ``patient_id,visit_index,label``; unlabeled visits get mask 0
        groups_path: Optional ``patient_id,group`` outcome-group tags

    Returns:
        Dataset with NaN at missing cells, patients in first-seen order, visits ordered by visit_index

    Raises:
        ParseError: Unknown patients, duplicate (patient, visit) rows, non-numeric cells
    """
    features, keys, values = _read_records(records_path)
    labels = _read_labels(labels_path, keys)
    groups = _read_groups(groups_path, keys) if groups_path else {}

    # a left merge on unique keys keeps the record row order
    table = keys[KEYS].merge(labels[KEYS + ["label"]], on=KEYS, how="left")
    table["row"] = np.arange(len(table))

    sequences = []
    for patient_id, rows in table.groupby("patient_id", sort=False):
        rows = rows.sort_values("visit_index", kind="stable")
        labelled = rows["label"].notna().to_numpy()
        sequences.append(PatientSequence(
            patient_id=patient_id,
            visits=values[rows["row"].to_numpy()],
            labels=rows["label"].fillna(0.0).to_numpy(dtype=np.float64),
            mask=labelled.astype(np.float64),
            group=groups.get(patient_id),
            visit_index=rows["visit_index"].to_numpy(dtype=np.int64),
        ))
    dataset = Dataset(tuple(sequences), tuple(features), metadata={"source": str(records_path)})
    logger.info(f"Loaded {len(dataset)} patients, {dataset.n_visits} visits, "
                f"{dataset.n_features} features from {records_path}")
    return dataset


def write_table(frame, path):
    """Write a DataFrame in the shared artifact layout: no index, LF, 17 significant digits, empty NaN."""
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", na_rep="",
                 encoding="utf-8")
    return path


def _records_frame(patient, feature_names):
    frame = pd.DataFrame(patient.visits, columns=list(feature_names))
    frame.insert(0, "visit_index", patient.visit_index.astype(np.int64))
    frame.insert(0, "patient_id", patient.patient_id)
    return frame


def write_csv(ds, records_path, labels_path, groups_path=None):
    """Write a dataset in the load_csv layout."""
    if not len(ds):
        raise DataError("cannot write an empty dataset")
    records = pd.concat([_records_frame(p, ds.feature_names) for p in ds], ignore_index=True)
    labelled = [(p.patient_id, int(p.visit_index[t]), int(p.labels[t]))
                for p in ds for t in np.nonzero(p.mask > 0)[0]]
    labels = pd.DataFrame(labelled, columns=["patient_id", "visit_index", "label"])
    try:
        for path in (records_path, labels_path, groups_path):
            if path is not None:
                Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_table(records, records_path)
        write_table(labels, labels_path)
        if groups_path is not None:
            groups = pd.DataFrame({"patient_id": ds.patient_ids, "group": [p.group_tag for p in ds]})
            write_table(groups, groups_path)
    except OSError as e:
        raise ArtifactError(f"cannot write dataset ({e.strerror or e})", path=getattr(e, "filename", None))

# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def select_features(ds, min_observed_frac=0.6):
    """
    Keep features observed in more than ``min_observed_frac`` of all visits.

    Raises:
        DataError: If no feature survives
    """
    if not len(ds):
        raise DataError("cannot select features of an empty dataset")
    stacked = np.concatenate([p.visits for p in ds], axis=0)
    observed = (~np.isnan(stacked)).mean(axis=0)
    keep = np.nonzero(observed > min_observed_frac)[0]
    kept = set(keep.tolist())
    dropped = [ds.feature_names[j] for j in range(ds.n_features) if j not in kept]
    if keep.size == 0:
        raise DataError(f"no feature is observed in more than {min_observed_frac:.0%} of visits")
    if dropped:
        logger.warning(f"Dropping {len(dropped)} sparsely observed features: {', '.join(dropped)}")
    patients = [p.with_visits(p.visits[:, keep]) for p in ds]
    return ds.with_patients(patients, feature_names=tuple(ds.feature_names[j] for j in keep))


def impute_visits(visits, patient_id="?", feature_names=None):
    """
    Carry the last observation forward per feature; leading gaps take the first observed value.

    Raises:
        DataError: If a feature has no observation at all
    """
    missing = np.isnan(visits)
    if not missing.any():
        return visits
    never = np.nonzero(missing.all(axis=0))[0]
    if never.size:
        name = feature_names[never[0]] if feature_names else str(never[0])
        raise DataError(f"patient {patient_id}: feature '{name}' is never observed")
    n_visits, n_features = visits.shape
    cols = np.arange(n_features)
    last_seen = np.where(missing, 0, np.arange(n_visits)[:, None])
    last_seen = np.maximum.accumulate(last_seen, axis=0)
    filled = visits[last_seen, cols]
    first_seen = np.argmax(~missing, axis=0)
    return np.where(np.isnan(filled), visits[first_seen, cols], filled)


def impute(ds):
    """Impute every patient; the result contains no NaN."""
    patients = []
    n_filled = 0
    for p in ds:
        filled = impute_visits(p.visits, p.patient_id, ds.feature_names)
        n_filled += int(np.isnan(p.visits).sum())
        patients.append(p if filled is p.visits else p.with_visits(filled))
    if n_filled:
        logger.info(f"Imputed {n_filled} missing cells across {len(ds)} patients")
    return ds.with_patients(patients)


def split_counts(n, fractions):
    """Largest-remainder apportionment of ``n`` items to ``fractions``."""
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _check_fractions(split):
    split = tuple(float(f) for f in split)
    if len(split) != 3 or any(f < 0 for f in split) or abs(sum(split) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    return split


def _require_imputed(ds):
    for p in ds:
        if p.has_missing:
            raise DataError(f"patient {p.patient_id} still has missing values; impute before splitting")


def fit_norm(train):
    """Per-feature mean and population std over all training visits."""
    stacked = np.concatenate([p.visits for p in train], axis=0)
    return NormStats(stacked.mean(axis=0), stacked.std(axis=0))


def normalize_splits(train, valid, test):
    """
    Fit z-score statistics on ``train`` and apply them to all three splits.

    Features with zero training std are dropped from every split with a warning.
    """
    stats = fit_norm(train)
    keep = np.nonzero(stats.std > 0.0)[0]
    if keep.size < train.n_features:
        dropped = [train.feature_names[j] for j in range(train.n_features) if stats.std[j] <= 0.0]
        if keep.size == 0:
            raise DataError("every feature is constant on the training split")
        logger.warning(f"Dropping {len(dropped)} constant features: {', '.join(dropped)}")
    stats = NormStats(stats.mean[keep], stats.std[keep])
    names = tuple(train.feature_names[j] for j in keep)

    def apply(ds, split_name):
        patients = [p.with_visits(stats.apply(p.visits[:, keep])) for p in ds]
        return ds.with_patients(patients, feature_names=names, norm=stats,
                                metadata={**ds.metadata, "split": split_name})

    return apply(train, "train"), apply(valid, "valid"), apply(test, "test")


def prepare(ds, max_len=400, split=(0.7225, 0.1275, 0.15), seed=0):
    """
    Truncate, split at patient level, and normalize with train-only statistics.

    Args:
        ds: Imputed Dataset
        max_len: Visits kept per patient (the first ``max_len``)
        split: (train, valid, test) fractions summing to 1
        seed: Root seed; the shuffle uses its 'split' stream

    Returns:
        (train, valid, test) Datasets; patients keep their input order within a split

    Raises:
        DataError: On bad fractions, missing values, or an empty split
    """
    split = _check_fractions(split)
    _require_imputed(ds)
    n = len(ds)
    counts = split_counts(n, split)
    for name, count in zip(SPLIT_NAMES, counts):
        if count == 0:
            raise DataError(f"the {name} split receives no patients ({n} patients, fractions {split})")
    truncated = ds.with_patients([p.truncated(max_len) for p in ds])
    order = rng_for(seed, "split").permutation(n)
    bounds = np.cumsum(counts)
    parts = np.split(order, bounds[:-1])
    train, valid, test = (truncated.subset(np.sort(part)) for part in parts)
    logger.info(f"Split {n} patients into {len(train)}/{len(valid)}/{len(test)} (train/valid/test)")
    return normalize_splits(train, valid, test)


def prepare_folds(ds, k=10, max_len=400, valid_frac=0.15, seed=0):
    """
    Patient-level k-fold cross-validation splits.

    Fold i holds out the i-th block of a seeded permutation as its test set; the
    remaining patients are divided into train/valid by ``valid_frac``.

    Returns:
        List of k (train, valid, test) tuples, each normalized on its own train split
    """
    _require_imputed(ds)
    n = len(ds)
    if k < 2 or k > n:
        raise DataError(f"k-fold needs 2 <= k <= {n} patients, got k={k}")
    truncated = ds.with_patients([p.truncated(max_len) for p in ds])
    order = rng_for(seed, "split").permutation(n)
    blocks = np.array_split(order, k)
    folds = []
    for i, test_idx in enumerate(blocks):
        rest = np.concatenate([b for j, b in enumerate(blocks) if j != i])
        n_train, n_valid = split_counts(rest.size, (1.0 - valid_frac, valid_frac))
        if n_train == 0 or n_valid == 0:
            raise DataError(f"fold {i}: {rest.size} remaining patients cannot fill train and valid splits")
        train = truncated.subset(np.sort(rest[:n_train]))
        valid = truncated.subset(np.sort(rest[n_train:]))
        test = truncated.subset(np.sort(test_idx))
        folds.append(normalize_splits(train, valid, test))
    return folds


def bootstrap_resample(test, n=1000, seed=0):
    """
    ``n`` with-replacement samples of patient indices, each of size ``len(test)``.

    Args:
        test: Dataset (or anything with a length, e.g. a patient count via range)
        n: Number of resamples
        seed: Root seed; draws come from its 'bootstrap' stream

    Returns:
        Generator of index arrays

    Raises:
        DataError: If ``test`` is empty (raised on the call, before any draw)
    """
    size = len(test)
    if size == 0:
        raise DataError("cannot bootstrap an empty test set")
    return _resamples(size, n, rng_for(seed, "bootstrap"))


def _resamples(size, n, rng):
    for _ in range(n):
        yield rng.integers(0, size, size=size)
