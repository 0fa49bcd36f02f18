# adacare/cli.py
import functools
import json
import logging
import sys
from pathlib import Path

import click

from adacare import __version__, load_settings
from adacare.errors import AdaCareError, ConfigError
from adacare.models.configs import ModelConfig, RunConfig, SynthSpec
from adacare.models.network import check_params
from adacare.models.params import ParamSet
from adacare.services.data_service import (bootstrap_resample, impute, load_csv, prepare,
                                           select_features)
from adacare.services.experiment_service import run_ablation
from adacare.services.interpret_service import aggregate_importance, collect_traces, export_report
from adacare.services.metrics_service import bootstrap_eval, pr_curve, write_curves
from adacare.services.synth_service import synth_generate, write_synth
from adacare.services.training_service import (best_epoch, cross_validate, fit, gradient_check,
                                               predict_dataset, score_dataset, write_history,
                                               write_predictions)

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def handle_errors(fn):
    """Map configuration problems to exit status 2 and every other failure to 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            click.echo(f"❌ Configuration error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except AdaCareError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
        except Exception as e:
            logger.exception(f"Unexpected failure: {str(e)}")
            click.echo(f"❌ Unexpected failure: {e}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def run_options(fn):
    """Options shared by every command."""
    fn = click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                      help='Override a config entry, e.g. --set train.max_epochs=5')(fn)
    fn = click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                      help='Output directory')(fn)
    fn = click.option('--threads', type=click.IntRange(min=1), default=None, help='Worker threads')(fn)
    fn = click.option('--seed', type=click.IntRange(min=0), default=None, help='Root seed')(fn)
    fn = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                      help='JSON run configuration')(fn)
    return fn


def load_run_config(config_path, overrides, seed, threads, out_dir):
    """Validated RunConfig; unset output directory and thread count fall back to the settings class."""
    settings = load_settings()
    cfg = RunConfig.load(config_path, overrides, seed=seed, threads=threads, out_dir=out_dir)
    defaults = {}
    if 'out_dir' not in cfg.model_fields_set:
        defaults['out_dir'] = settings.DEFAULT_OUT_DIR
    if 'threads' not in cfg.model_fields_set:
        defaults['threads'] = settings.DEFAULT_THREADS
    return cfg.model_copy(update=defaults) if defaults else cfg


def synth_spec_for(cfg):
    """The run's SynthSpec; its seed follows the root seed unless set explicitly."""
    if 'seed' in cfg.synth.model_fields_set:
        return cfg.synth
    return cfg.synth.model_copy(update={'seed': cfg.seed})


def load_dataset(cfg):
    """Read the configured CSVs (or the run's synth/ output), select features and impute."""
    synth_dir = cfg.out_path / 'synth'
    records = cfg.data.records or str(synth_dir / 'records.csv')
    labels = cfg.data.labels or str(synth_dir / 'labels.csv')
    groups = cfg.data.groups
    if groups is None and cfg.data.records is None and (synth_dir / 'groups.csv').exists():
        groups = str(synth_dir / 'groups.csv')
    for key, path in (('data.records', records), ('data.labels', labels), ('data.groups', groups)):
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"file not found: {path}", key=key)
    ds = load_csv(records, labels, groups)
    if cfg.data.min_observed_frac is not None:
        ds = select_features(ds, cfg.data.min_observed_frac)
    return impute(ds)


def load_splits(cfg):
    ds = load_dataset(cfg)
    return prepare(ds, max_len=cfg.data.max_len, split=cfg.data.split, seed=cfg.seed)


def load_trained(cfg):
    """(ParamSet, ModelConfig, metadata) from the run's params file."""
    path = cfg.params_path
    if not path.is_file():
        raise ConfigError(f"params file not found: {path}", key='params_file')
    params, metadata = ParamSet.load(path)
    if 'model' not in metadata:
        raise ConfigError(f"params file has no model configuration: {path}", key='params_file')
    mcfg = ModelConfig(**metadata['model'])
    check_params(params, mcfg)
    return params, mcfg, metadata


def check_features(split, metadata):
    if list(split.feature_names) != metadata.get('feature_names'):
        raise ConfigError("data features differ from those the model was trained on", key='data.records')


def write_json(payload, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    return path


@click.group()
@click.version_option(__version__)
def cli():
    """Multi-scale recalibrated GRU for per-visit clinical risk prediction."""


@cli.command()
@run_options
@click.option('--schema', is_flag=True, help='Print the SynthSpec JSON schema and exit')
@handle_errors
def synth(config_path, seed, threads, out_dir, overrides, schema):
    """Generate a synthetic cohort into OUT/synth."""
    if schema:
        click.echo(json.dumps(SynthSpec.model_json_schema(), indent=2, sort_keys=True))
        return
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    spec = synth_spec_for(cfg)
    dataset = synth_generate(spec)
    paths = write_synth(dataset, spec, cfg.out_path / 'synth')
    click.echo(f"✅ Wrote {len(dataset)} patients ({dataset.n_visits} visits, "
               f"prevalence {dataset.prevalence():.3f}) to {paths['records'].parent}")


@cli.command()
@run_options
@handle_errors
def train(config_path, seed, threads, out_dir, overrides):
    """Fit the model and write params.bin and history.jsonl."""
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    train_split, valid_split, _ = load_splits(cfg)
    mcfg = cfg.model.with_features(train_split.n_features)
    params, history = fit(train_split, valid_split, mcfg, cfg.train_config())
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    metadata = {
        'model': mcfg.model_dump(mode='json', exclude={'preset', 'variant'}),
        'feature_names': list(train_split.feature_names),
        'fingerprint': mcfg.fingerprint(),
        'best_epoch': best_epoch(history),
        'seed': cfg.seed,
    }
    params.save(cfg.params_path, metadata)
    write_history(history, cfg.out_path / 'history.jsonl')
    best = max(r.val_auprc for r in history)
    click.echo(f"✅ Trained {mcfg.variant_name} for {len(history)} epochs; best val AUPRC {best:.4f} "
               f"(epoch {metadata['best_epoch']})")


@cli.command(name='eval')
@run_options
@handle_errors
def evaluate(config_path, seed, threads, out_dir, overrides):
    """Evaluate a trained model with bootstrap standard deviations."""
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    params, mcfg, metadata = load_trained(cfg)
    _, valid_split, test_split = load_splits(cfg)
    split = test_split if cfg.eval.split == 'test' else valid_split
    check_features(split, metadata)

    scored = score_dataset(split, params, mcfg, cfg.threads)
    resamples = bootstrap_resample(split, n=cfg.eval.n_bootstrap, seed=cfg.seed)
    report = bootstrap_eval(scored, resamples, seed=cfg.seed, n_jobs=cfg.threads)
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    (cfg.out_path / 'eval_report.json').write_text(report.to_json(), encoding='utf-8')

    predictions = predict_dataset(split, params, mcfg, cfg.threads)
    write_predictions(split, predictions, cfg.out_path / 'predictions.csv')
    if cfg.eval.write_curves:
        points, _, _ = pr_curve(scored)
        write_curves(points, cfg.out_path / 'curves.csv')

    for name in ('auprc', 'min_se_pp', 'auroc'):
        click.echo(f"{name:>10}: {report.metric(name):.4f} ({report.bootstrap[name].std:.4f})")


@cli.command()
@run_options
@handle_errors
def explain(config_path, seed, threads, out_dir, overrides):
    """Export feature and time-scale importance per outcome group."""
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    params, mcfg, metadata = load_trained(cfg)
    splits = dict(zip(('train', 'valid', 'test'), load_splits(cfg)))
    split = splits[cfg.explain.split]
    check_features(split, metadata)

    traces = collect_traces(split, params, mcfg, cfg.threads)
    raw = aggregate_importance(traces, scope='raw', average=cfg.explain.average)
    export_report(raw, cfg.out_path / 'importance_raw.csv', mcfg.fingerprint())
    if mcfg.use_conv:
        conv = aggregate_importance(traces, scope='conv', average=cfg.explain.average)
        export_report(conv, cfg.out_path / 'importance_conv.csv', mcfg.fingerprint())
    click.echo(f"✅ Importance over {len(traces)} patients in groups {', '.join(raw.columns)}")


@cli.command()
@run_options
@handle_errors
def gradcheck(config_path, seed, threads, out_dir, overrides):
    """Verify analytic gradients against central finite differences."""
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    section = cfg.gradcheck
    tolerance = section.tolerance
    if 'tolerance' not in section.model_fields_set:
        tolerance = load_settings().GRADCHECK_TOLERANCE
    reports = [
        gradient_check(section.model, cfg.seed + i, n_patients=section.n_patients,
                       seq_len=section.seq_len, eps=section.eps)
        for i in range(section.n_seeds)
    ]
    worst = max(reports, key=lambda r: r.max_rel_err)
    passed = worst.max_rel_err < tolerance
    write_json({
        'tolerance': tolerance,
        'passed': passed,
        'max_rel_err': worst.max_rel_err,
        'worst_param': worst.worst_param,
        'worst_index': list(worst.worst_index),
        'runs': [r.model_dump(mode='json') for r in reports],
    }, cfg.out_path / 'gradcheck.json')
    if not passed:
        click.echo(f"❌ Gradient check failed: max relative error {worst.max_rel_err:.3e} at "
                   f"{worst.worst_param}{list(worst.worst_index)} (tolerance {tolerance:g})", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"✅ Gradient check passed: max relative error {worst.max_rel_err:.3e} over "
               f"{len(reports)} seeds ({worst.n_params} parameters)")


@cli.command()
@run_options
@handle_errors
def cv(config_path, seed, threads, out_dir, overrides):
    """Patient-level k-fold cross-validation."""
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    ds = load_dataset(cfg)
    report = cross_validate(ds, cfg.model, cfg.train_config(), k=cfg.data.folds, max_len=cfg.data.max_len)
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    (cfg.out_path / 'cv_report.json').write_text(report.to_json(), encoding='utf-8')
    for name, stat in report.summary.items():
        click.echo(f"{name:>10}: {stat.mean:.4f} ({stat.std:.4f}) over {report.k} folds")


@cli.command()
@run_options
@handle_errors
def ablation(config_path, seed, threads, out_dir, overrides):
    """Train every configured variant on synthetic cohorts across seeds."""
    cfg = load_run_config(config_path, overrides, seed, threads, out_dir)
    section = cfg.ablation
    spec = SynthSpec.preset(section.cohort, n_patients=section.n_patients)
    report = run_ablation(spec, section.variants, section.seeds, cfg.model, cfg.train_config(),
                          max_len=cfg.data.max_len, split=cfg.data.split)
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    (cfg.out_path / 'ablation_report.json').write_text(report.to_json(), encoding='utf-8')
    for row in report.results:
        click.echo(f"{row.variant:>15}: median AUPRC {row.median_auprc:.4f}, AUROC {row.median_auroc:.4f}, "
                   f"min(Se,P+) {row.median_min_se_pp:.4f}")
