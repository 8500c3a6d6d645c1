"""Command line entry point: synth, train, prune, eval, run, compare, report-layers"""
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click

from . import harness
from .config import Config, load_config
from .data import save_csv, synthesize_biased
from .errors import ConfigError, FairGrapeError
from .metrics import attach_bias, evaluate
from .models import PRUNE_METHODS, ExperimentConfig, SyntheticSpec
from .storage import load_checkpoint, save_checkpoint, write_json

logger = logging.getLogger(__name__)


def setup_logging(level: str):
    numeric = logging.getLevelName(level.upper())
    logging.basicConfig(level=numeric if isinstance(numeric, int) else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _overrides(seed: Optional[int], method: Optional[str], sparsity: Optional[float],
               out: Optional[str]) -> Dict[str, Any]:
    values: Dict[str, Any] = {"prune.method": method, "output_dir": out}
    if seed is not None:
        values["seeds"] = [seed]
    if sparsity is not None:
        if not 0 < sparsity < 1:
            raise ConfigError(f"--sparsity must lie in (0, 1), got {sparsity}")
        values["prune.target_keep"] = round(1.0 - sparsity, 12)
    return values


def _experiment(config_path, seed=None, method=None, sparsity=None, out=None) -> ExperimentConfig:
    return load_config(config_path, _overrides(seed, method, sparsity, out))


def handle_errors(fn):
    """Map toolkit errors to their exit codes"""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FairGrapeError as exc:
            click.echo(f"❌ {type(exc).__name__}: {exc}", err=True)
            sys.exit(exc.exit_code)
    return wrapper


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="Flat YAML experiment file")
seed_option = click.option("--seed", type=int, default=None, help="Trial seed (overrides the seed list)")
method_option = click.option("--method", type=click.Choice(PRUNE_METHODS), default=None, help="Pruning method")
sparsity_option = click.option("--sparsity", type=float, default=None, help="Fraction of weights removed, e.g. 0.9")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")


@click.group(invoke_without_command=True)
@click.option("--log-level", default=None, help="Logging level (default from FAIRGRAPE_LOG_LEVEL)")
@click.option("--validate-config", is_flag=True, help="Print environment configuration and exit")
@click.pass_context
def cli(ctx, log_level, validate_config):
    """Fairness-aware pruning experiments."""
    setup_logging(log_level or Config.LOG_LEVEL)
    if validate_config:
        is_valid, messages = Config.validate()
        click.echo(json.dumps(Config.get_summary(), indent=2))
        for message in messages:
            click.echo(f"⚠️  {message}")
        click.echo("✅ Configuration valid" if is_valid else "❌ Configuration invalid")
        ctx.exit(0 if is_valid else ConfigError.exit_code)
    elif ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@cli.command()
@config_option
@seed_option
@out_option
@click.option("--unbiased", is_flag=True, help="Symmetric control dataset without group-exclusive features")
@handle_errors
def synth(config_path, seed, out, unbiased):
    """Generate the synthetic grouped dataset as CSV."""
    config = _experiment(config_path, seed=seed, out=out)
    seed = config.seeds[0]
    if unbiased:
        spec = SyntheticSpec.unbiased_control(seed)
    else:
        spec = config.data.synthetic or SyntheticSpec.biased_default()
        spec = spec.model_copy(update={"seed": spec.seed + seed})
    data = harness.split_for_export(synthesize_biased(spec), config, seed)
    path = save_csv(data, Path(config.output_dir) / f"synthetic-seed-{seed}.csv")
    click.echo(f"📦 {data.n} rows, {data.dim} features, groups {', '.join(data.group_names)}")
    click.echo(f"💾 {path}")


@cli.command("train")
@config_option
@seed_option
@out_option
@handle_errors
def train_command(config_path, seed, out):
    """Train and checkpoint the reference model."""
    config = _experiment(config_path, seed=seed, out=out)
    seed = config.seeds[0]
    data = harness.load_dataset(config, seed)
    model = harness.train_reference(config, data, seed)
    path = save_checkpoint(model, Path(config.output_dir) / f"seed-{seed}-pretrained.fgpk")
    final_loss = model.loss_history[-1] if model.loss_history else float("nan")
    click.echo(f"🧠 trained {model.num_weights} weights for {config.train.epochs} epochs, loss {final_loss:.4f}")
    click.echo(f"💾 {path}")


@cli.command("prune")
@config_option
@seed_option
@method_option
@sparsity_option
@out_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Reference checkpoint to prune")
@handle_errors
def prune_command(config_path, seed, method, sparsity, out, checkpoint):
    """Prune (and retrain) a checkpointed model."""
    config = _experiment(config_path, seed=seed, method=method, sparsity=sparsity, out=out)
    seed = config.seeds[0]
    data = harness.load_dataset(config, seed)
    reference = load_checkpoint(checkpoint)
    train_part = data.partition("train")
    prune_cfg = harness.seed_prune_config(config, seed)
    scoring = harness.scoring_data(config, train_part, reference, seed)
    result = harness.prune(reference, scoring, prune_cfg, train_part, config.train)
    out_dir = Path(config.output_dir)
    path = save_checkpoint(result.model, out_dir / f"seed-{seed}-{prune_cfg.method}.fgpk")
    if result.traces:
        result.export_traces(out_dir / f"seed-{seed}-{prune_cfg.method}-trace.csv")
    model = result.model
    click.echo(f"✂️  {prune_cfg.method}: kept {model.nonzero_count}/{model.num_weights} weights "
               f"in {len(result.iterations)} iteration(s)")
    click.echo(f"💾 {path}")


@cli.command("eval")
@config_option
@seed_option
@out_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reference checkpoint for bias statistics")
@handle_errors
def eval_command(config_path, seed, out, checkpoint, reference_path):
    """Evaluate a checkpoint per group (and against a reference)."""
    config = _experiment(config_path, seed=seed, out=out)
    seed = config.seeds[0]
    data = harness.load_dataset(config, seed).partition(config.evaluation_partition)
    model = load_checkpoint(checkpoint)
    keep = model.nonzero_count / model.num_weights
    report = evaluate(model, data, Path(checkpoint).stem, keep, seed)
    if reference_path:
        attach_bias(report, evaluate(load_checkpoint(reference_path), data, harness.REFERENCE_LABEL, None, seed))
    path = write_json(report, Path(config.output_dir) / f"{Path(checkpoint).stem}-report.json")
    click.echo(f"📊 All: {report.overall.accuracy:.2f}")
    for g in report.groups:
        click.echo(f"   {g.name}: " + ("missing" if g.missing else f"{g.accuracy:.2f}"))
    if report.bias is not None:
        click.echo(f"   rho(A) {report.bias.rho_accuracy:.3f}  rho(delta) {report.bias.rho_delta:.3f}")
    click.echo(f"💾 {path}")


@cli.command("run")
@config_option
@seed_option
@method_option
@sparsity_option
@out_option
@click.option("--workers", type=int, default=None, help="Seeds run concurrently")
@handle_errors
def run_command(config_path, seed, method, sparsity, out, workers):
    """Full pipeline for every seed (and every sweep value)."""
    config = _experiment(config_path, seed=seed, method=method, sparsity=sparsity, out=out)
    if workers is not None:
        config = config.model_copy(update={"workers": max(1, workers)})
    elif config.workers == 1 and Config.WORKERS > 1:
        config = config.model_copy(update={"workers": Config.WORKERS})
    manifests = harness.run_sweep(config) if config.prune.sweep else [harness.run(config)]
    exit_code = 0
    for manifest in manifests:
        click.echo(f"🚀 {manifest.method} keep {manifest.keep_fraction:g} → {manifest.run_dir}")
        for s in manifest.seeds:
            click.echo(f"   {'✅' if s.success else '❌'} {s.message}")
            if not s.success and exit_code == 0:
                exit_code = s.exit_code or 1
    sys.exit(exit_code)


@cli.command("compare")
@click.argument("manifests", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="CSV file to write")
@handle_errors
def compare_command(manifests, out_path):
    """Median-over-seeds comparison table of several runs."""
    table = harness.compare([harness.load_manifest(m) for m in manifests])
    click.echo(harness.format_table(table))
    if out_path:
        harness.write_table(table, out_path)
        click.echo(f"💾 {out_path}")


@cli.command("report-layers")
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="CSV file to write")
@handle_errors
def report_layers(manifest, out_path):
    """Per-layer group importance shares kept by a run."""
    run_manifest = harness.load_manifest(manifest)
    summary = harness.layer_share_summary(run_manifest)
    out_path = Path(out_path) if out_path else Path(run_manifest.run_dir) / "tables" / "layer_shares.csv"
    harness.write_table(summary, out_path)
    for layer_id, deviation in harness.max_share_deviation(summary).items():
        click.echo(f"   layer {layer_id}: max share deviation {deviation:.4f}")
    click.echo(f"💾 {out_path}")


def main():
    cli()


if __name__ == "__main__":
    main()
