"""Seeded end-to-end experiments: train → snapshot → evaluate → prune/retrain → evaluate.

Every run owns a directory under the output dir named from the experiment name,
method, keep fraction and config hash::

    <out>/<slug>/manifest.json
    <out>/<slug>/checkpoints/seed-<s>-{pretrained,iter-<i>,final}.fgpk
    <out>/<slug>/reports/seed-<s>-{reference,pruned}.json
    <out>/<slug>/tables/seed-<s>-{rates,layer-shares,importance,trace}.csv
    <out>/<slug>/tables/aggregate.csv
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data import GroupedDataset, load_csv, pseudo_groups, split, synthesize_biased
from .database import STATUS_DONE, STATUS_FAILED, STATUS_RUNNING, DatabaseSession, RunDatabase
from .errors import ConfigError, DataError, FairGrapeError, GroupMismatchError
from .importance import dump_importance, importance_tables, load_importance
from .metrics import aggregate, attach_bias, evaluate, rate_changes_frame
from .models import ExperimentConfig, FairnessReport, PruneConfig, RunManifest, SeedRun
from .network import Model, build_model, snapshot_init, train
from .pruners import IterationReport, prune
from .storage import (artifact, load_checkpoint, read_report, save_checkpoint, verify_artifact, write_json,
                      write_table)
from .utils import config_hash, err, ok, run_slug

logger = logging.getLogger(__name__)

REFERENCE_LABEL = "No-pruning"


# =============== Stages ===============

def load_dataset(config: ExperimentConfig, seed: int) -> GroupedDataset:
    """Dataset for one trial, split and checked for empty groups"""
    data_cfg = config.data
    if data_cfg.csv_path:
        data = load_csv(data_cfg.csv_path, data_cfg.label_column, data_cfg.group_columns)
    else:
        spec = data_cfg.synthetic.model_copy(update={"seed": data_cfg.synthetic.seed + seed})
        data = synthesize_biased(spec)
    if data.split_tags is None:
        data = split(data, data_cfg.split_fractions, seed)
    return data.check_groups_nonempty()


def split_for_export(data: GroupedDataset, config: ExperimentConfig, seed: int) -> GroupedDataset:
    return split(data, config.data.split_fractions, seed)


def train_reference(config: ExperimentConfig, data: GroupedDataset, seed: int) -> Model:
    model = build_model(config.model, data.dim, data.n_classes, seed)
    snapshot_init(model)
    return train(model, data.partition("train"), config.train.epochs, config.train.batch_size, seed, config.train)


def seed_prune_config(config: ExperimentConfig, seed: int) -> PruneConfig:
    return config.prune.model_copy(update={"seed": config.prune.seed + seed})


def scoring_data(config: ExperimentConfig, train_part: GroupedDataset, reference: Model, seed: int) -> GroupedDataset:
    if config.prune.group_source == "pseudo_kmeans":
        return pseudo_groups(train_part, reference, config.prune.kmeans_k, seed,
                             layer=config.prune.embedding_layer, n_init=config.prune.kmeans_restarts)
    return train_part


def layer_share_report(importance: pd.DataFrame, masks: Dict[int, np.ndarray]) -> pd.DataFrame:
    """Per layer and group: share of importance held by all weights (``reference_share``)
    and by the weights a pruned mask keeps (``kept_share``).

    Both columns score weights with ``importance``, the reference model's gradients.
    ``kept_share`` restricts those scores to the mask, which is the quantity FairGRAPE
    balances; it is not recomputed on the retrained pruned model.
    """
    rows = []
    for layer_id, frame in importance.groupby("layer_id", sort=True):
        mask = np.asarray(masks[int(layer_id)]).reshape(-1).astype(bool)
        groups = list(dict.fromkeys(frame["group"]))
        ref_totals, kept_totals = [], []
        for group in groups:
            scores = frame[frame["group"] == group].sort_values("weight_index")["score"].to_numpy()
            ref_totals.append(scores.sum())
            kept_totals.append(scores[mask].sum())
        ref_shares = _shares_or_uniform(ref_totals)
        kept_shares = _shares_or_uniform(kept_totals)
        for group, ref, kept in zip(groups, ref_shares, kept_shares):
            rows.append({"layer_id": int(layer_id), "group": group, "reference_share": float(ref),
                         "kept_share": float(kept), "deviation": float(abs(kept - ref))})
    return pd.DataFrame(rows, columns=["layer_id", "group", "reference_share", "kept_share", "deviation"])


def _shares_or_uniform(totals: Sequence[float]) -> np.ndarray:
    totals = np.asarray(totals, dtype=np.float64)
    total = totals.sum()
    return totals / total if total > 0 else np.full(totals.size, 1.0 / totals.size)


def max_share_deviation(shares: pd.DataFrame) -> pd.Series:
    return shares.groupby("layer_id")["deviation"].max()


# =============== One seed ===============

class _SeedRunner:
    def __init__(self, config: ExperimentConfig, seed: int, run_dir: Path):
        self.config = config
        self.seed = seed
        self.run_dir = run_dir
        self.record = SeedRun(seed=seed, success=False)
        self.stage = "setup"

    def _timed(self, stage: str):
        self.stage = stage
        return _Timer(self.record.wall_clock, stage)

    def _path(self, kind: str, name: str) -> Path:
        return self.run_dir / kind / f"seed-{self.seed}-{name}"

    def _checkpoint(self, key: str, model: Model):
        path = save_checkpoint(model, self._path("checkpoints", f"{key}.fgpk"))
        self.record.checkpoints[key] = artifact(path, self.run_dir)

    def _table(self, key: str, frame: pd.DataFrame):
        self.record.tables[key] = artifact(write_table(frame, self._path("tables", f"{key}.csv")), self.run_dir)

    def _report(self, key: str, report: FairnessReport):
        self.record.reports[key] = artifact(write_json(report, self._path("reports", f"{key}.json")), self.run_dir)

    def execute(self) -> Dict:
        config, seed = self.config, self.seed
        with self._timed("data"):
            data = load_dataset(config, seed)
            train_part = data.partition("train")
            eval_part = data.partition(config.evaluation_partition).evaluation_view()
            if eval_part.n == 0:
                raise DataError(f"evaluation partition '{config.evaluation_partition}' is empty")
        with self._timed("pretrain"):
            reference = train_reference(config, data, seed)
            self._checkpoint("pretrained", reference)
        with self._timed("evaluate_reference"):
            reference_report = evaluate(reference, eval_part, REFERENCE_LABEL, None, seed)
            self._report("reference", reference_report)
        prune_cfg = seed_prune_config(config, seed)
        with self._timed("importance"):
            tables = importance_tables(reference, train_part.evaluation_view(),
                                       prune_cfg.importance_sample_fraction, prune_cfg.batch_size,
                                       prune_cfg.seed, prune_cfg.workers)
            importance_path = dump_importance(tables, self._path("tables", "importance.csv"))
            self.record.tables["importance"] = artifact(importance_path, self.run_dir)
        with self._timed("prune"):
            scoring = scoring_data(config, train_part, reference, seed)

            def on_iteration(iteration: int, model: Model, report: IterationReport):
                self._checkpoint(f"iter-{iteration}", model)

            result = prune(reference, scoring, prune_cfg, train_part, config.train, on_iteration)
            self._checkpoint("final", result.model)
            if result.traces:
                trace_path = result.export_traces(self._path("tables", "trace.csv"))
                self.record.tables["trace"] = artifact(trace_path, self.run_dir)
        with self._timed("evaluate_pruned"):
            pruned_report = evaluate(result.model, eval_part, prune_cfg.method, prune_cfg.target_keep, seed)
            attach_bias(pruned_report, reference_report)
            self._report("pruned", pruned_report)
            self._table("rates", rate_changes_frame(pruned_report))
            masks = {i: layer.mask for i, layer in enumerate(result.model.layers)}
            self._table("layer-shares", layer_share_report(load_importance(importance_path), masks))
        bias = pruned_report.bias
        return ok(f"seed {seed}: accuracy {pruned_report.overall.accuracy:.2f}, rho(delta) {bias.rho_delta:.3f}",
                  data={"iterations": len(result.iterations)})

    def run(self) -> SeedRun:
        started = time.perf_counter()
        try:
            result = self.execute()
            exit_code = 0
        except FairGrapeError as exc:
            logger.error("seed %d failed in stage %s: %s", self.seed, self.stage, exc)
            result = err(str(exc), {"stage": self.stage, "type": type(exc).__name__},
                         hints=[f"stage '{self.stage}' aborted; other seeds are unaffected"])
            exit_code = exc.exit_code
        except Exception as exc:  # keep the other seeds running
            logger.exception("seed %d crashed in stage %s", self.seed, self.stage)
            result = err(f"{type(exc).__name__}: {exc}", {"stage": self.stage})
            exit_code = 1
        self.record.wall_clock["total"] = time.perf_counter() - started
        self.record.success = result["success"]
        self.record.exit_code = exit_code
        self.record.message = result["message"]
        self.record.hints = result["hints"]
        return self.record


class _Timer:
    def __init__(self, sink: Dict[str, float], stage: str):
        self.sink, self.stage = sink, stage

    def __enter__(self):
        self.started = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.sink[self.stage] = time.perf_counter() - self.started


# =============== Runs and manifests ===============

# Settings that change where or how fast a run executes, not what it computes
_UNHASHED_FIELDS = {"output_dir", "seeds", "workers"}


def experiment_hash(config: ExperimentConfig) -> str:
    return config_hash(config.model_dump(mode="json", exclude=_UNHASHED_FIELDS))


def run_directory(config: ExperimentConfig) -> Path:
    digest = experiment_hash(config)
    return Path(config.output_dir) / run_slug(config.name, config.prune.method, config.prune.target_keep, digest)


def load_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    manifest = RunManifest.model_validate_json(path.read_text())
    manifest.run_dir = str(path.parent)
    return manifest


def _seed_intact(seed_run: SeedRun, run_dir: Path) -> bool:
    refs = list(seed_run.checkpoints.values()) + list(seed_run.reports.values()) + list(seed_run.tables.values())
    return seed_run.success and all(verify_artifact(ref, run_dir) for ref in refs)


def seed_reports(manifest: RunManifest, key: str) -> List[FairnessReport]:
    root = Path(manifest.run_dir)
    return [read_report(root / s.reports[key].path) for s in manifest.completed() if key in s.reports]


def _write_aggregate(manifest: RunManifest, run_dir: Path) -> None:
    reports = seed_reports(manifest, "reference") + seed_reports(manifest, "pruned")
    if reports:
        path = write_table(aggregate(reports), run_dir / "tables" / "aggregate.csv")
        manifest.aggregate = artifact(path, run_dir)


def run(config: ExperimentConfig, database_path: Optional[Union[str, Path]] = None) -> RunManifest:
    """All seeds of one experiment. Seeds already completed under the same config
    hash, with intact files, are reused rather than recomputed."""
    digest = experiment_hash(config)
    run_dir = run_directory(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    previous: Dict[int, SeedRun] = {}
    manifest_path = run_dir / "manifest.json"
    if manifest_path.is_file():
        old = load_manifest(manifest_path)
        if old.config_hash == digest:
            previous = {s.seed: s for s in old.seeds if _seed_intact(s, run_dir)}

    with DatabaseSession(database_path or Path(config.output_dir) / "runs.db"):
        pending = [s for s in config.seeds if not (s in previous and RunDatabase.is_done(digest, s))]
        for s in config.seeds:
            if s not in pending:
                logger.info("seed %d already complete for %s, skipping", s, run_dir.name)
        for s in pending:
            RunDatabase.record(digest, s, config.name, config.prune.method, config.prune.target_keep,
                               STATUS_RUNNING, str(manifest_path))

        if config.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                fresh = list(pool.map(lambda s: _SeedRunner(config, s, run_dir).run(), pending))
        else:
            fresh = [_SeedRunner(config, s, run_dir).run() for s in pending]

        by_seed = dict(previous)
        for record in fresh:
            by_seed[record.seed] = record
            RunDatabase.record(digest, record.seed, config.name, config.prune.method, config.prune.target_keep,
                               STATUS_DONE if record.success else STATUS_FAILED, str(manifest_path),
                               None if record.success else record.message)

    group_names = _group_names(config)
    manifest = RunManifest(config_hash=digest, name=config.name, method=config.prune.method,
                           keep_fraction=config.prune.target_keep, run_dir=str(run_dir), groups=group_names,
                           seeds=[by_seed[s] for s in config.seeds])
    if fresh or not (run_dir / "tables" / "aggregate.csv").is_file():
        _write_aggregate(manifest, run_dir)
    elif manifest_path.is_file():
        manifest.aggregate = load_manifest(manifest_path).aggregate
    if fresh or not manifest_path.is_file():
        write_json(manifest, manifest_path)
    failed = [s.seed for s in manifest.seeds if not s.success]
    if failed:
        logger.warning("%s: seeds %s failed", run_dir.name, failed)
    return manifest


def _group_names(config: ExperimentConfig) -> List[str]:
    if config.data.synthetic is not None:
        return config.data.synthetic.names()
    try:
        return list(load_csv(config.data.csv_path, config.data.label_column, config.data.group_columns).group_names)
    except FairGrapeError:
        return []


def run_sweep(config: ExperimentConfig, database_path: Optional[Union[str, Path]] = None) -> List[RunManifest]:
    """One run per keep fraction in ``prune.sweep`` plus tables/sparsity_sweep.csv"""
    if not config.prune.sweep:
        raise ConfigError("prune.sweep lists no keep fractions")
    manifests = []
    for keep in config.prune.sweep:
        prune_cfg = config.prune.model_copy(update={"target_keep": keep, "sweep": None})
        manifests.append(run(config.model_copy(update={"prune": prune_cfg}), database_path))
    write_table(sweep_table(manifests), Path(config.output_dir) / "tables" / "sparsity_sweep.csv")
    return manifests


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def sweep_table(manifests: Sequence[RunManifest]) -> pd.DataFrame:
    rows = []
    for manifest in manifests:
        reports = seed_reports(manifest, "pruned")
        rows.append({
            "keep_fraction": manifest.keep_fraction,
            "method": manifest.method,
            "All": _median([r.overall.accuracy for r in reports]),
            "rho_A": _median([r.bias.rho_accuracy for r in reports if r.bias]),
            "rho_delta": _median([r.bias.rho_delta for r in reports if r.bias]),
        })
    return pd.DataFrame(rows, columns=["keep_fraction", "method", "All", "rho_A", "rho_delta"])


# =============== Comparison ===============

def _comparison_row(label: str, reports: List[FairnessReport], groups: List[str], with_delta: bool) -> Dict:
    row = {"method": label, "All": _median([r.overall.accuracy for r in reports])}
    for g in groups:
        row[g] = _median([r.group(g).accuracy for r in reports if g in r.present_groups()])
    if with_delta:
        row["rho_A"] = _median([r.bias.rho_accuracy for r in reports if r.bias])
        row["rho_delta"] = _median([r.bias.rho_delta for r in reports if r.bias])
    else:
        row["rho_A"] = _median([float(np.std([g.accuracy for g in r.groups if not g.missing])) for r in reports])
        row["rho_delta"] = None
    return row


def compare(manifests: Sequence[RunManifest]) -> pd.DataFrame:
    """Median-over-seeds table: a No-pruning row, then one row per manifest"""
    if not manifests:
        raise ConfigError("compare needs at least one manifest")
    groups = list(manifests[0].groups)
    for m in manifests[1:]:
        if sorted(m.groups) != sorted(groups):
            raise GroupMismatchError(f"{m.run_dir} has groups {m.groups}, expected {groups}")
    keeps = {m.keep_fraction for m in manifests}
    rows = [_comparison_row(REFERENCE_LABEL, seed_reports(manifests[0], "reference"), groups, False)]
    for m in manifests:
        label = m.method if len(keeps) == 1 else f"{m.method}@{m.keep_fraction:g}"
        rows.append(_comparison_row(label, seed_reports(m, "pruned"), groups, True))
    numeric = ["All"] + groups + ["rho_A", "rho_delta"]
    return pd.DataFrame(rows, columns=["method"] + numeric).astype({c: float for c in numeric})


def format_table(frame: pd.DataFrame) -> str:
    """Aligned plain-text rendering with blanks for undefined cells"""
    return frame.to_string(index=False, na_rep="", float_format=lambda v: f"{v:.2f}")


def layer_shares_for_run(manifest: RunManifest) -> pd.DataFrame:
    """Seed-wise layer share tables of a run, stacked with a seed column"""
    root = Path(manifest.run_dir)
    frames = []
    for s in manifest.completed():
        if "layer-shares" in s.tables:
            frame = pd.read_csv(root / s.tables["layer-shares"].path)
        elif "importance" in s.tables and "final" in s.checkpoints:
            model = load_checkpoint(root / s.checkpoints["final"].path)
            masks = {i: layer.mask for i, layer in enumerate(model.layers)}
            frame = layer_share_report(load_importance(root / s.tables["importance"].path), masks)
        else:
            continue
        frames.append(frame.assign(seed=s.seed))
    if not frames:
        raise DataError(f"{manifest.run_dir} has no completed seed with importance tables")
    return pd.concat(frames, ignore_index=True)


def layer_share_summary(manifest: RunManifest) -> pd.DataFrame:
    shares = layer_shares_for_run(manifest)
    return (shares.groupby(["layer_id", "group"], sort=True)[["reference_share", "kept_share", "deviation"]]
            .mean().reset_index())
