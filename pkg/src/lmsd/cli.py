"""Command-line front end for the two-stage diagnosis pipeline.

Exit codes: 0 on success, 2 on usage errors, 3 when a pipeline prerequisite
is missing (the message names the file and the command that creates it).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .config import RunConfig, resolve_work_dir
from .synth import FAULT_KINDS, SynthSpec
from .training import STAGES
from .workflow import (
    MissingArtifactError,
    evaluate_fold,
    explain_flight,
    make_folds,
    preprocess,
    run_cv,
    run_diagnosis,
    run_stability,
    synth_to_csv,
    train_fold_stage,
)

EXIT_MISSING_ARTIFACT = 3


def _pipeline_errors(fn):
    """Map pipeline errors to stable exit codes with one-line messages."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MissingArtifactError as exc:
            click.echo(
                f"lmsd: missing-artifact: {exc.artifact}: {exc.path}: run: lmsd {exc.hint}",
                err=True,
            )
            sys.exit(EXIT_MISSING_ARTIFACT)
        except (ValueError, FileNotFoundError, RuntimeError, KeyError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            raise click.ClickException(str(msg)) from exc

    return wrapper


def _work_option(fn):
    return click.option(
        "--work",
        type=click.Path(path_type=Path),
        default=None,
        help="Working directory (default: $LMSD_WORK_DIR or ./lmsd_work).",
    )(fn)


def _config_option(fn):
    return click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        default=None,
        help="YAML config overriding the built-in defaults.",
    )(fn)


@click.group()
@click.version_option("0.1.0", prog_name="lmsd")
def main() -> None:
    """Two-stage flight diagnosis: screening, routing, fault classification."""


@main.command()
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--healthy", type=int, default=600, show_default=True)
@click.option("--per-class", "per_class", type=int, default=75, show_default=True)
@click.option("--length", type=int, default=512, show_default=True)
@click.option("--channels", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--classes",
    default=",".join(FAULT_KINDS),
    show_default=True,
    help="Comma-separated fault kinds to include.",
)
@click.option(
    "--echo-lag",
    type=int,
    default=None,
    help="Echo delay in steps (default: 48, shrunk to length/12 for short series).",
)
@_pipeline_errors
def synth(out, healthy, per_class, length, channels, seed, classes, echo_lag):
    """Generate a synthetic fleet of flight CSVs plus a labels manifest."""
    kinds = [c.strip() for c in classes.split(",") if c.strip()]
    unknown = sorted(set(kinds) - set(FAULT_KINDS))
    if unknown:
        raise click.BadParameter(f"unknown fault kinds {unknown}; choose from {list(FAULT_KINDS)}")
    if echo_lag is None:
        echo_lag = 48 if length >= 240 else max(2, length // 12)
    full = SynthSpec(
        n_healthy=healthy,
        fault_counts=(per_class,) * len(FAULT_KINDS),
        length=length,
        n_channels=channels,
        seed=seed,
        echo_lag=echo_lag,
    )
    by_kind = {sig.kind: sig for sig in full.resolved_signatures()}
    spec = SynthSpec(
        n_healthy=healthy,
        fault_counts=(per_class,) * len(kinds),
        length=length,
        n_channels=channels,
        seed=seed,
        echo_lag=echo_lag,
        class_names=tuple(kinds),
        signatures=tuple(by_kind[k] for k in kinds),
    )
    manifest, n = synth_to_csv(spec, out)
    click.echo(f"wrote {n} flights under {out}")
    click.echo(f"labels manifest: {manifest}")


@main.command(name="preprocess")
@click.option(
    "--data",
    "data_root",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="Directory of flight CSVs.",
)
@click.option(
    "--labels",
    type=click.Path(path_type=Path),
    default=None,
    help="Labels manifest (default: <data>/labels.csv).",
)
@_work_option
@_config_option
@_pipeline_errors
def preprocess_cmd(data_root, labels, work, config_path):
    """Ingest, filter, gap-fill, and resample raw flights into the store."""
    cfg = RunConfig.load(config_path)
    summary = preprocess(resolve_work_dir(work), data_root, cfg, labels=labels)
    click.echo(
        f"processed {summary['n_samples']} flights "
        f"({summary['n_healthy']} healthy, {summary['n_anomalous']} anomalous) "
        f"to length {summary['target_len']}"
    )
    if summary["excluded_missing"]:
        click.echo(f"excluded for missing data: {summary['excluded_missing']}")
    if summary["skipped_unreadable"]:
        click.echo(f"skipped unreadable files: {summary['skipped_unreadable']}")
    click.echo(f"fault classes: {', '.join(summary['class_names'])}")


@main.command()
@_work_option
@_config_option
@_pipeline_errors
def fold(work, config_path):
    """Build the stratified cross-validation plan with flight isolation."""
    cfg = RunConfig.load(config_path)
    plan = make_folds(resolve_work_dir(work), cfg)
    sizes = [len(plan.test_ids(i)) for i in range(plan.k)]
    click.echo(f"fold plan: k={plan.k} seed={plan.seed} test sizes={sizes}")


@main.command()
@click.option("--stage", type=click.Choice(list(STAGES)), required=True)
@click.option("--fold", "fold_index", type=int, required=True)
@_work_option
@_config_option
@_pipeline_errors
def train(stage, fold_index, work, config_path):
    """Train one cascade stage on one fold's training split."""
    cfg = RunConfig.load(config_path)
    report = train_fold_stage(resolve_work_dir(work), stage, fold_index, cfg)
    click.echo(
        f"stage={report.stage} fold={fold_index} epochs={report.epochs_run} "
        f"best_epoch={report.best_epoch} best_val_loss={report.best_val_loss:.6f}"
    )
    click.echo(f"checkpoint: {report.checkpoint_path}")


@main.command()
@click.option("--fold", "fold_index", type=int, required=True)
@_work_option
@_pipeline_errors
def diagnose(fold_index, work):
    """Run the cascade over one fold's held-out flights; write JSONL records."""
    path = run_diagnosis(resolve_work_dir(work), fold_index)
    records = [json.loads(line) for line in Path(path).read_text().splitlines()]
    routed = sum(1 for r in records if r["path"] == "anomalous")
    click.echo(f"diagnosed {len(records)} flights ({routed} routed to fault analysis)")
    click.echo(f"records: {path}")


@main.command()
@click.option("--fold", "fold_index", type=int, required=True)
@_work_option
@_config_option
@_pipeline_errors
def evaluate(fold_index, work, config_path):
    """Score one fold's diagnosis records and render figures."""
    cfg = RunConfig.load(config_path)
    payload = evaluate_fold(resolve_work_dir(work), fold_index, cfg)
    diag = payload["diagnosis"]
    ad = payload["ad"]
    click.echo(
        f"fold {fold_index}: diagnosis acc={diag['acc']:.4f} "
        f"macro_f1={diag['macro_f1']:.4f} mcwpm={diag['mcwpm']:.4f} "
        f"| screening acc={ad['acc']:.4f} fnr={ad['fnr']:.4f}"
    )


@main.command()
@click.option("--force", is_flag=True, help="Retrain even when checkpoints already exist.")
@click.option("--no-timing", is_flag=True, help="Skip the timed inference benchmark.")
@_work_option
@_config_option
@_pipeline_errors
def cv(force, no_timing, work, config_path):
    """Train, diagnose, and evaluate every fold; write the aggregate report."""
    cfg = RunConfig.load(config_path)
    summary = run_cv(
        resolve_work_dir(work), cfg, force=force, time_inference=not no_timing
    )
    for name, agg in summary["aggregate"].items():
        click.echo(f"{name}: {agg['mean']:.4f} +/- {agg['std']:.4f}")
    eff = summary["efficiency"]
    click.echo(
        f"TTT={eff['TTT']:.2f}s ET={eff['ET']:.2f}s MSize={eff['MSize_MB']:.2f}MB"
        + (f" IT32={eff['IT32']:.4f}s" if "IT32" in eff else "")
    )


@main.command()
@click.option("--stage", type=click.Choice(list(STAGES)), required=True)
@click.option("--flight", required=True, help="Flight id to explain.")
@click.option("--channels", default=None, help="Comma-separated channel names to draw.")
@click.option("--baseline", default=None, help="Healthy flight id to overlay (default: top match).")
@_work_option
@_config_option
@_pipeline_errors
def explain(stage, flight, channels, baseline, work, config_path):
    """Render the keyness figure + sidecar for one flight and stage."""
    cfg = RunConfig.load(config_path)
    channel_list = [c.strip() for c in channels.split(",")] if channels else None
    result = explain_flight(
        resolve_work_dir(work),
        stage,
        flight,
        cfg,
        channels=channel_list,
        baseline_id=baseline,
    )
    click.echo(f"figure:  {result['figure']}")
    click.echo(f"sidecar: {result['sidecar']}")
    if result["baseline"]:
        click.echo(f"baseline flight: {result['baseline']}")
    top = ", ".join(f"{fid} ({sim:.3f})" for fid, sim in result["baselines"][:3])
    if top:
        click.echo(f"closest healthy flights: {top}")


@main.command()
@click.option("--rounds", type=int, default=10, show_default=True)
@click.option("--fold", "fold_index", type=int, default=0, show_default=True)
@_work_option
@_config_option
@_pipeline_errors
def stability(rounds, fold_index, work, config_path):
    """Retrain one fold repeatedly and bucket flights by outcome consistency."""
    cfg = RunConfig.load(config_path)
    payload = run_stability(resolve_work_dir(work), cfg, rounds=rounds, fold=fold_index)
    for cat, n in payload["counts"].items():
        click.echo(f"{cat}: {n}")


if __name__ == "__main__":
    main()
