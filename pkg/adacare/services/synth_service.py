# adacare/services/synth_service.py
"""
Synthetic EMR cohorts with planted risk signals.

Chronic patients carry a slow descending drift on the trend feature; acute
patients carry a short spike on the spike feature late in their stay; stable
patients carry neither. Per-visit risk is logistic in the drift accumulated so
far and the presence of a spike in the trailing window, with the intercept
calibrated so the expected label rate matches the requested prevalence.
"""
import json
import logging
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from adacare.errors import ArtifactError, SynthError
from adacare.models.sequence import Dataset, PatientSequence
from adacare.services.data_service import write_csv
from adacare.utils.environment import rng_for

logger = logging.getLogger(__name__)

GROUPS = ("chronic", "acute", "stable")

# Label probabilities are clipped to this band
PROB_FLOOR = 1e-4
PROB_CEIL = 1.0 - PROB_FLOOR


def trailing_window(indicator, window):
    """1.0 at visit t when ``indicator`` is set anywhere in visits t-window+1..t."""
    cumulative = np.concatenate([[0.0], np.cumsum(indicator)])
    t = np.arange(indicator.shape[0])
    start = np.maximum(t - window + 1, 0)
    return (cumulative[t + 1] - cumulative[start] > 0).astype(np.float64)


def _draw_patient(rng, spec):
    """Features plus the label-rule inputs (drift, spike window) of one patient."""
    n_visits = int(rng.integers(spec.min_visits, spec.max_visits + 1))
    u = rng.random()
    if u < spec.chronic_frac:
        group = "chronic"
    elif u < spec.chronic_frac + spec.acute_frac:
        group = "acute"
    else:
        group = "stable"
    visits = rng.normal(0.0, spec.noise_std, size=(n_visits, spec.n_features))
    rate = spec.trend_rate * rng.uniform(0.5, 1.5)
    onset = int(rng.integers(n_visits // 2, n_visits))

    drift = np.zeros(n_visits)
    spike = np.zeros(n_visits)
    if group == "chronic":
        drift = rate * np.arange(n_visits)
        visits[:, spec.trend_feature] -= drift
    elif group == "acute":
        spike[onset:onset + spec.spike_duration] = 1.0
        visits[:, spec.spike_feature] += spec.spike_magnitude * spike
    return n_visits, group, visits, drift, trailing_window(spike, spec.spike_window)


def calibrate_intercept(linear, prevalence):
    """
    Intercept b with mean(clip(expit(b + linear))) == prevalence.

    Raises:
        SynthError: If no intercept reaches the target within the clipped band
    """
    if linear.size == 0:
        raise SynthError("cohort has no visits")

    def gap(b):
        return np.clip(expit(b + linear), PROB_FLOOR, PROB_CEIL).mean() - prevalence

    lo = -60.0 - float(linear.max())
    hi = 60.0 - float(linear.min())
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo > 0 or g_hi < 0:
        raise SynthError(f"prevalence {prevalence} is unreachable: clipped label rate spans "
                         f"[{g_lo + prevalence:.3g}, {g_hi + prevalence:.3g}]")
    if g_lo == 0:
        return lo
    if g_hi == 0:
        return hi
    return brentq(gap, lo, hi, xtol=1e-12)


def synth_generate(spec):
    """
    Generate a cohort; the same spec always yields a bit-identical Dataset.

    Args:
        spec: SynthSpec

    Returns:
        Dataset with every visit labelled (mask 1) and patients tagged chronic/acute/stable

    Raises:
        SynthError: If the prevalence target cannot be met
    """
    rng = rng_for(spec.seed, "synth")
    drawn = [_draw_patient(rng, spec) for _ in range(spec.n_patients)]
    linear = [spec.trend_risk * drift + spec.spike_risk * window for _, _, _, drift, window in drawn]
    intercept = calibrate_intercept(np.concatenate(linear), spec.prevalence)

    patients = []
    for i, ((n_visits, group, visits, _, _), lin) in enumerate(zip(drawn, linear)):
        prob = np.clip(expit(intercept + lin), PROB_FLOOR, PROB_CEIL)
        labels = (rng.random(n_visits) < prob).astype(np.float64)
        patients.append(PatientSequence(
            patient_id=f"p{i:05d}",
            visits=visits,
            labels=labels,
            mask=np.ones(n_visits),
            group=group,
        ))
    dataset = Dataset(tuple(patients), tuple(spec.names()),
                      metadata={"intercept": float(intercept), "synth_seed": spec.seed})
    counts = {g: sum(p.group == g for p in patients) for g in GROUPS}
    logger.info(f"Generated {len(dataset)} synthetic patients ({counts}), "
                f"{dataset.n_visits} visits, prevalence {dataset.prevalence():.4f}")
    return dataset


def write_synth(dataset, spec, out_dir):
    """
    Write records.csv, labels.csv, groups.csv and synth_spec.json into ``out_dir``.

    Returns:
        Dict of artifact name -> path
    """
    out_dir = Path(out_dir)
    paths = {
        "records": out_dir / "records.csv",
        "labels": out_dir / "labels.csv",
        "groups": out_dir / "groups.csv",
        "spec": out_dir / "synth_spec.json",
    }
    write_csv(dataset, paths["records"], paths["labels"], paths["groups"])
    try:
        paths["spec"].write_text(json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"cannot write synth spec ({e})", path=paths["spec"])
    logger.info(f"Wrote synthetic cohort to {out_dir}")
    return paths
