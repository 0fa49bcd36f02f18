# adacare/services/interpret_service.py
"""
Feature-importance summaries from recalibration weights.

Traces are captured with an eval-mode forward pass and averaged into a
feature x outcome-group matrix (raw scope) or a dilation-rate x group matrix
(conv scope, each rate's block mean-pooled first).
"""
from dataclasses import replace
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from adacare.errors import ArtifactError, ConfigError, DataError, ShapeError
from adacare.models.network import Mode, forward
from adacare.models.reports import ImportanceMatrix
from adacare.services.data_service import write_table

logger = logging.getLogger(__name__)

SCOPES = ("raw", "conv")
AVERAGES = ("visit", "patient")


def _trace_of(patient, params, mcfg, feature_names):
    trace = forward(patient, params, mcfg, mode=Mode.EVAL).trace
    return replace(trace, feature_names=tuple(feature_names)), patient.group_tag


def collect_traces(ds, params, mcfg, n_jobs=1):
    """(RecalibrationTrace, group tag) for every patient, in dataset order."""
    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_trace_of)(patient, params, mcfg, ds.feature_names) for patient in ds
    )


def _weights(trace, scope):
    if scope == "raw":
        labels = trace.feature_names or tuple(f"r{i}" for i in range(trace.raw_weights.shape[1]))
        return labels, trace.raw_weights
    if not trace.rate_labels:
        raise ShapeError(f"patient {trace.patient_id}: no conv weights in trace (convolution path is off)")
    return trace.rate_labels, trace.block_means()


def aggregate_importance(traces, scope="raw", average="visit"):
    """
    Average recalibration weights per row and outcome group.

    Args:
        traces: List of (RecalibrationTrace, group tag)
        scope: 'raw' (rows are features) or 'conv' (rows are dilation rates)
        average: 'visit' pools all visits of a group; 'patient' averages per-patient means

    Returns:
        ImportanceMatrix with columns in sorted group order

    Raises:
        ConfigError: Unknown scope or averaging
        ShapeError: Traces of inconsistent width
        DataError: Empty input or a missing group tag
    """
    if scope not in SCOPES:
        raise ConfigError(f"unknown scope '{scope}' (choose from {', '.join(SCOPES)})", key="scope")
    if average not in AVERAGES:
        raise ConfigError(f"unknown averaging '{average}' (choose from {', '.join(AVERAGES)})", key="average")
    if not traces:
        raise DataError("no traces to aggregate")

    row_labels = None
    sums, counts = {}, {}
    for trace, group in traces:
        if group is None:
            raise DataError(f"patient {trace.patient_id}: trace has no group tag")
        labels, weights = _weights(trace, scope)
        if row_labels is None:
            row_labels = labels
        elif len(labels) != len(row_labels):
            raise ShapeError(f"patient {trace.patient_id}: {len(labels)} weights per visit, "
                             f"expected {len(row_labels)}")
        if average == "visit":
            contribution, count = weights.sum(axis=0), weights.shape[0]
        else:
            contribution, count = weights.mean(axis=0), 1
        sums[group] = sums.get(group, 0.0) + contribution
        counts[group] = counts.get(group, 0) + count

    columns = tuple(sorted(g for g in counts if counts[g] > 0))
    values = np.column_stack([sums[g] / counts[g] for g in columns])
    return ImportanceMatrix(row_labels, columns, values, [counts[g] for g in columns], scope, average)


def export_report(matrix, path, fingerprint=None):
    """
    Write the matrix as CSV (17 significant digits, LF) plus a JSON sidecar.

    Args:
        matrix: ImportanceMatrix
        path: CSV path; the sidecar takes the same name with a .json suffix
        fingerprint: Model configuration fingerprint recorded in the sidecar

    Returns:
        (csv path, json path)

    Raises:
        ArtifactError: On I/O failure, naming the path
    """
    csv_path = Path(path)
    json_path = csv_path.with_suffix(".json")
    first_column = "feature" if matrix.scope == "raw" else "dilation"
    sidecar = {
        "scope": matrix.scope,
        "average": matrix.average,
        "rows": list(matrix.row_labels),
        "columns": list(matrix.columns),
        "counts": {g: int(c) for g, c in zip(matrix.columns, matrix.counts)},
        "config_fingerprint": fingerprint,
    }
    table = pd.DataFrame(matrix.values, columns=list(matrix.columns))
    table.insert(0, first_column, list(matrix.row_labels))
    try:
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        write_table(table, csv_path)
        json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"cannot write importance report ({e.strerror or e})", path=csv_path)
    logger.info(f"Wrote {matrix.scope} importance ({len(matrix.row_labels)} x {len(matrix.columns)}) to {csv_path}")
    return csv_path, json_path


def load_report(path):
    """Read an exported matrix back; counts, scope and averaging come from the sidecar."""
    csv_path = Path(path)
    try:
        table = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
        sidecar = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
    except OSError as e:
        raise ArtifactError(f"cannot read importance report ({e.strerror or e})", path=csv_path)
    columns = tuple(table.columns[1:])
    labels = tuple(table.iloc[:, 0])
    # str -> float64 parses each cell exactly
    values = table.iloc[:, 1:].astype(np.float64).to_numpy()
    counts = [sidecar["counts"][g] for g in columns]
    return ImportanceMatrix(labels, columns, values.reshape(len(labels), len(columns)), counts,
                            sidecar["scope"], sidecar["average"], {"config_fingerprint": sidecar["config_fingerprint"]})
