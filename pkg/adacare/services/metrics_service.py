# adacare/services/metrics_service.py
"""Threshold-free metrics: AUROC, the step-wise PR curve, min(Se, P+), and patient-level bootstrap."""
from dataclasses import astuple
import logging

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import precision_recall_curve, roc_auc_score, roc_curve

from adacare.errors import ArtifactError, MetricError
from adacare.models.reports import METRIC_NAMES, BootstrapStat, CurvePoint, EvalReport
from adacare.services.data_service import write_table

logger = logging.getLogger(__name__)

MAX_SKIPPED_FRACTION = 0.5

CURVE_COLUMNS = ["threshold", "precision", "recall", "tpr", "fpr"]


def auroc(s):
    """
    Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 * P(tie).

    Raises:
        MetricError: If ``s`` holds a single class
    """
    n_pos, n_neg = s.n_positive, s.n_negative
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    return float(roc_auc_score(s.labels, s.scores))


def pr_curve(s):
    """
    Precision-recall curve with one point per distinct score threshold.

    A visit is predicted positive when its score is >= the threshold. Thresholds
    run from the highest score down.

    Returns:
        (list of CurvePoint, auprc, min_se_pp); auprc is the step-wise sum
        of (R_i - R_{i-1}) * P_i with R_0 = 0, accumulated from the top threshold

    Raises:
        MetricError: If there are no positive labels
    """
    n_pos, n_neg = s.n_positive, s.n_negative
    if n_pos == 0:
        raise MetricError("the precision-recall curve needs at least one positive label")
    precision, recall, thresholds = precision_recall_curve(s.labels, s.scores)
    # ascending thresholds plus a final (P=1, R=0) point; flip to highest first
    precision, recall, thresholds = precision[-2::-1], recall[-2::-1], thresholds[::-1]
    if n_neg:
        fpr, _, _ = roc_curve(s.labels, s.scores, drop_intermediate=False)
        fpr = fpr[1:]
    else:
        fpr = np.zeros_like(recall)

    steps = np.diff(recall, prepend=0.0) * precision
    auprc = float(np.cumsum(steps)[-1])
    min_se_pp = float(np.max(np.minimum(precision, recall)))
    points = [CurvePoint(float(t), float(p), float(r), float(r), float(f))
              for t, p, r, f in zip(thresholds, precision, recall, fpr)]
    return points, auprc, min_se_pp


def metric_values(s):
    """(auprc, auroc, min_se_pp) of one scored set."""
    _, auprc, min_se_pp = pr_curve(s)
    return auprc, auroc(s), min_se_pp


def _resample_metrics(s, indices):
    sample = s.resample(indices)
    if not sample.has_both_classes():
        return None
    return metric_values(sample)


def bootstrap_eval(s, resamples, seed=0, n_jobs=1):
    """
    Point estimates plus bootstrap mean/std over patient-level resamples.

    Args:
        s: ScoredSet with patient offsets
        resamples: Iterable of patient index arrays (see data_service.bootstrap_resample)
        seed: Recorded in the report
        n_jobs: Worker threads; results are merged in resample order

    Returns:
        EvalReport

    Raises:
        MetricError: If the full set is single-class or more than half of the resamples are
    """
    auprc, auroc_value, min_se_pp = metric_values(s)
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_resample_metrics)(s, indices) for indices in resamples
    )
    total = len(results)
    valid = [r for r in results if r is not None]
    skipped = total - len(valid)
    if total and skipped > MAX_SKIPPED_FRACTION * total:
        raise MetricError(f"{skipped} of {total} bootstrap resamples lost a class")
    if skipped:
        logger.warning(f"Skipped {skipped} of {total} single-class bootstrap resamples")

    table = np.array(valid, dtype=np.float64).reshape(len(valid), len(METRIC_NAMES))
    bootstrap = {}
    for j, name in enumerate(METRIC_NAMES):
        column = table[:, j]
        bootstrap[name] = BootstrapStat(
            mean=float(column.mean()) if column.size else float("nan"),
            std=float(column.std()) if column.size else float("nan"),
        )
    report = EvalReport(
        auprc=auprc,
        auroc=auroc_value,
        min_se_pp=min_se_pp,
        bootstrap=bootstrap,
        n_samples=len(s),
        n_patients=s.n_patients,
        n_positive=s.n_positive,
        n_resamples=total,
        n_skipped=skipped,
        seed=seed,
    )
    logger.info(f"AUPRC {auprc:.4f} ({bootstrap['auprc'].std:.4f}), AUROC {auroc_value:.4f} "
                f"({bootstrap['auroc'].std:.4f}), min(Se,P+) {min_se_pp:.4f} over {total} resamples")
    return report


def write_curves(points, path):
    """Curve points as CSV: threshold,precision,recall,tpr,fpr."""
    table = pd.DataFrame([astuple(p) for p in points], columns=CURVE_COLUMNS)
    try:
        write_table(table, path)
    except OSError as e:
        raise ArtifactError(f"cannot write curves ({e})", path=path)
    return path
