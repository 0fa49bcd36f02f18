# adacare/services/training_service.py
"""
Training engine: Adam, the mini-batch loop with early stopping on validation
AUPRC, prediction helpers, the finite-difference gradient check, and k-fold
cross-validation.

Per-patient forward/backward passes in a batch run on a joblib thread pool;
results come back in submission order and are reduced serially, so the outcome
does not depend on the number of threads.
"""
from dataclasses import dataclass
import logging
import math

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from adacare.errors import ArtifactError, MetricError, NumericError, ShapeError, TrainingDivergedError
from adacare.models.network import backward, bce_loss, forward, init_params, predict
from adacare.models.params import ParamSet
from adacare.models.reports import (METRIC_NAMES, BootstrapStat, CVReport, EpochRecord,
                                    FoldResult, GradcheckReport, ScoredSet)
from adacare.models.sequence import PatientSequence
from adacare.services.data_service import prepare_folds, write_table
from adacare.services.metrics_service import auroc, metric_values, pr_curve
from adacare.utils.environment import derive_seed, rng_for
from adacare.utils.numeric import finite_diff_grad

logger = logging.getLogger(__name__)

# gradient entries below this fraction of the largest one are compared on its scale
GRADCHECK_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params, grads, state, cfg):
    """
    One bias-corrected Adam update.

    Args:
        params: ParamSet
        grads: ParamSet aligned with ``params``
        state: AdamState aligned with ``params``
        cfg: TrainConfig (learning_rate, beta1, beta2, epsilon)

    Returns:
        (new ParamSet, new AdamState); the inputs are left untouched

    Raises:
        NumericError: If a gradient holds NaN or inf (names the parameter)
    """
    params.check_aligned(grads, "parameters and gradients")
    params.check_aligned(state.m, "parameters and Adam moments")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"gradient of '{name}' contains non-finite values")

    step = state.step + 1
    bias1 = 1.0 - cfg.beta1 ** step
    bias2 = 1.0 - cfg.beta2 ** step
    new_params, new_m, new_v = ParamSet(), ParamSet(), ParamSet()
    for name, value in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# Batched gradients and predictions
# ---------------------------------------------------------------------------

def batch_loss_and_grads(patients, params, mcfg, dropout_seeds=None, n_jobs=1):
    """
    Mean loss and gradient over patients with at least one labelled visit.

    Args:
        patients: Sequence of PatientSequence
        params: ParamSet
        mcfg: ModelConfig
        dropout_seeds: One seed per patient, or None to disable dropout
        n_jobs: Worker threads for the per-patient passes

    Returns:
        (loss, gradient ParamSet, number of contributing patients)
    """
    if dropout_seeds is None:
        dropout_seeds = [None] * len(patients)
    work = []
    for patient, seed in zip(patients, dropout_seeds):
        if patient.n_labelled == 0:
            logger.warning(f"Patient {patient.patient_id} has no labelled visits; skipped")
            continue
        work.append((patient, seed))
    if not work:
        return float("nan"), params.zeros_like(), 0

    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(backward)(patient, None, None, params, mcfg, seed) for patient, seed in work
    )
    total_loss = 0.0
    total = params.zeros_like()
    for loss, grads in results:
        total_loss += loss
        for name, g in grads.items():
            total[name] += g
    n = len(results)
    return total_loss / n, total.map(lambda g: g / n), n


def batch_loss(patients, params, mcfg):
    """Mean eval-mode loss over patients with labelled visits (no gradients)."""
    losses = [bce_loss(forward(p, params, mcfg).predictions, p.labels, p.mask)
              for p in patients if p.n_labelled > 0]
    return math.fsum(losses) / len(losses) if losses else float("nan")


def predict_dataset(ds, params, mcfg, n_jobs=1):
    """Eval-mode per-visit scores for every patient, in dataset order."""
    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(predict)(patient, params, mcfg) for patient in ds
    )


def score_dataset(ds, params, mcfg, n_jobs=1):
    """ScoredSet of the masked-in visits, grouped by patient."""
    predictions = predict_dataset(ds, params, mcfg, n_jobs)
    keep = [patient.mask > 0 for patient in ds]
    return ScoredSet.from_patients(
        [pred[k] for pred, k in zip(predictions, keep)],
        [patient.labels[k] for patient, k in zip(ds, keep)],
        patient_ids=ds.patient_ids,
    )


def validation_metrics(ds, params, mcfg, n_jobs=1):
    """(auprc, auroc or None when single-class, min_se_pp) on a validation split."""
    scored = score_dataset(ds, params, mcfg, n_jobs)
    _, auprc, min_se_pp = pr_curve(scored)
    auroc_value = auroc(scored) if scored.has_both_classes() else None
    return auprc, auroc_value, min_se_pp


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _check_training_data(train, valid, mcfg):
    if not len(train) or not len(valid):
        raise ShapeError(f"fit needs non-empty splits (train={len(train)}, valid={len(valid)})")
    if train.n_features != valid.n_features:
        raise ShapeError(f"train has {train.n_features} features, valid has {valid.n_features}")
    if mcfg.n_features is not None and mcfg.n_features != train.n_features:
        raise ShapeError(f"model expects {mcfg.n_features} features, data has {train.n_features}")
    if not any((p.labels[p.mask > 0] == 1.0).any() for p in valid):
        raise MetricError("validation split has no positive labels; AUPRC is undefined")


def fit(train, valid, mcfg, tcfg, on_epoch=None):
    """
    Train with Adam on seeded-shuffled mini-batches, early-stopping on validation AUPRC.

    Args:
        train: Dataset
        valid: Dataset with at least one positive labelled visit
        mcfg: ModelConfig (n_features is filled in from the data)
        tcfg: TrainConfig
        on_epoch: Optional callback receiving each EpochRecord

    Returns:
        (best ParamSet, list of EpochRecord)

    Raises:
        TrainingDivergedError: If a batch loss, gradient or parameter update turns non-finite
    """
    _check_training_data(train, valid, mcfg)
    mcfg = mcfg.with_features(train.n_features)
    params = init_params(mcfg, derive_seed(tcfg.seed, "init"))
    state = AdamState.zeros(params)
    best_params, best_auprc = params.copy(), -np.inf
    stale = 0
    history = []
    logger.info(f"Training variant {mcfg.variant_name} ({params.size} parameters) on {len(train)} patients, "
                f"validating on {len(valid)}")

    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng_for(tcfg.seed, "shuffle", epoch).permutation(len(train))
        epoch_loss, epoch_count = 0.0, 0
        for batch, start in enumerate(range(0, len(train), tcfg.batch_size)):
            indices = order[start:start + tcfg.batch_size]
            patients = [train[i] for i in indices]
            seeds = [derive_seed(tcfg.seed, "dropout", epoch, int(i)) for i in indices]
            try:
                loss, grads, n = batch_loss_and_grads(patients, params, mcfg, seeds, tcfg.threads)
            except NumericError as e:
                logger.error(f"Non-finite forward pass at epoch {epoch}, batch {batch}: {e}")
                raise TrainingDivergedError(epoch, batch, float("nan")) from e
            if n == 0:
                continue
            if not np.isfinite(loss) or grads.non_finite_names():
                raise TrainingDivergedError(epoch, batch, loss)
            params, state = adam_step(params, grads, state, tcfg)
            if params.non_finite_names():
                logger.error(f"Adam step produced non-finite values in {params.non_finite_names()}")
                raise TrainingDivergedError(epoch, batch, loss)
            epoch_loss += loss * n
            epoch_count += n
            logger.debug(f"epoch {epoch} batch {batch}: loss {loss:.6f}")

        auprc, auroc_value, min_se_pp = validation_metrics(valid, params, mcfg, tcfg.threads)
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / epoch_count if epoch_count else float("nan"),
            val_auprc=auprc,
            val_auroc=auroc_value,
            val_min_se_pp=min_se_pp,
        )
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info(f"Epoch {epoch}: train loss {record.train_loss:.5f}, val AUPRC {auprc:.4f}")

        if auprc > best_auprc:
            best_auprc, best_params, stale = auprc, params.copy(), 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                logger.info(f"Early stopping after epoch {epoch} (best val AUPRC {best_auprc:.4f})")
                break
    return best_params, history


def best_epoch(history):
    """Epoch number of the first maximum of validation AUPRC."""
    return max(history, key=lambda r: (r.val_auprc, -r.epoch)).epoch


def write_history(history, path):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in history:
            handle.write(record.to_line())
    return path


def write_predictions(ds, predictions, path):
    """One row per labelled visit: patient_id, visit_index, label, score."""
    rows = [(p.patient_id, int(p.visit_index[t]), int(p.labels[t]), float(scores[t]))
            for p, scores in zip(ds, predictions) for t in np.nonzero(p.mask > 0)[0]]
    table = pd.DataFrame(rows, columns=["patient_id", "visit_index", "label", "score"])
    try:
        write_table(table, path)
    except OSError as e:
        raise ArtifactError(f"cannot write predictions ({e.strerror or e})", path=path)
    return path


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def random_patients(n_features, n_patients, seq_len, seed):
    """Gaussian visits with random 0/1 labels on every visit."""
    rng = np.random.default_rng(seed)
    return [
        PatientSequence(
            patient_id=f"gc{i}",
            visits=rng.normal(size=(seq_len, n_features)),
            labels=rng.integers(0, 2, size=seq_len).astype(np.float64),
            mask=np.ones(seq_len),
        )
        for i in range(n_patients)
    ]


def relative_errors(analytic, numeric, floor=GRADCHECK_FLOOR):
    """
    Per-entry ``|a - n| / max(|a|, |n|, floor * max|n|, 1e-8)``.

    Central differences carry an absolute roundoff of roughly 1e-10 at eps=1e-5,
    so entries far below the largest gradient are measured on that gradient's scale.
    """
    scale = max(floor * float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)


def gradient_check(mcfg, seed, n_patients=2, seq_len=5, eps=1e-5, grad_hook=None):
    """
    Compare analytic gradients against central differences on a random batch.

    Args:
        mcfg: ModelConfig with n_features set; dropout is disabled for the check
        seed: Seeds both the parameters and the batch
        n_patients, seq_len: Batch shape
        eps: Finite-difference step
        grad_hook: Optional callable applied to the analytic gradient ParamSet (fault injection)

    Returns:
        GradcheckReport with the worst entry of relative_errors
    """
    mcfg = mcfg.updated(dropout=0.0) if mcfg.dropout else mcfg
    n_features = mcfg.require_features()
    params = init_params(mcfg, seed)
    patients = random_patients(n_features, n_patients, seq_len, derive_seed(seed, "gradcheck"))

    _, grads, _ = batch_loss_and_grads(patients, params, mcfg)
    if grad_hook is not None:
        grads = grad_hook(grads)
    analytic = grads.flatten()

    def loss_at(vector):
        return batch_loss(patients, params.unflatten(vector), mcfg)

    numeric = finite_diff_grad(loss_at, params.flatten(), eps)
    rel_err = relative_errors(analytic, numeric)
    worst = int(np.argmax(rel_err))
    name, index = params.locate(worst)
    report = GradcheckReport(
        max_rel_err=float(rel_err[worst]),
        worst_param=name,
        worst_index=index,
        n_params=params.size,
        seed=seed,
        eps=eps,
    )
    logger.info(f"Gradient check (seed {seed}): max relative error {report.max_rel_err:.3e} "
                f"at {name}{list(index)} over {params.size} parameters")
    return report


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def evaluate_split(ds, params, mcfg, n_jobs=1):
    """(auprc, auroc, min_se_pp) on a held-out split."""
    return metric_values(score_dataset(ds, params, mcfg, n_jobs))


def cross_validate(ds, mcfg, tcfg, k=10, max_len=400, valid_frac=0.15):
    """
    Fit and evaluate one model per fold of a patient-level k-fold split.

    Returns:
        CVReport with per-fold test metrics and their mean/std across folds
    """
    folds = prepare_folds(ds, k=k, max_len=max_len, valid_frac=valid_frac, seed=tcfg.seed)
    results = []
    for i, (train, valid, test) in enumerate(folds):
        fold_cfg = tcfg.model_copy(update={"seed": derive_seed(tcfg.seed, "shuffle", i)})
        params, history = fit(train, valid, mcfg.with_features(train.n_features), fold_cfg)
        auprc, auroc_value, min_se_pp = evaluate_split(test, params, mcfg.with_features(train.n_features),
                                                       tcfg.threads)
        results.append(FoldResult(
            fold=i, n_train=len(train), n_valid=len(valid), n_test=len(test),
            best_epoch=best_epoch(history), auprc=auprc, auroc=auroc_value, min_se_pp=min_se_pp,
        ))
        logger.info(f"Fold {i + 1}/{k}: test AUPRC {auprc:.4f}, AUROC {auroc_value:.4f}")
    summary = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in results])
        summary[name] = BootstrapStat(mean=float(values.mean()), std=float(values.std()))
    return CVReport(k=k, seed=tcfg.seed, folds=results, summary=summary)
