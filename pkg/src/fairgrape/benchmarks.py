"""Directional desk-scale checks on the synthetic data.

Each check runs whole experiments through the harness and returns an ``ok``/``err``
result dict whose ``data`` holds the numbers it judged. Runs share one output
directory, so a baseline computed by one check is reused by the next.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from sklearn.metrics import adjusted_rand_score

from . import harness
from .models import (ArchitectureConfig, DataConfig, ExperimentConfig, PruneConfig, RunManifest, SyntheticSpec,
                     TrainConfig)
from .utils import err, ok

logger = logging.getLogger(__name__)

DESK_SEEDS = list(range(10))
DESK_KEEP = 0.1


def desk_config(method: str, out_dir: Union[str, Path], seeds: Sequence[int] = DESK_SEEDS,
                unbiased: bool = False, keep: float = DESK_KEEP, group_source: str = "true_labels",
                epochs: int = 20, retrain_epochs: int = 5) -> ExperimentConfig:
    """Biased (n=8000, 9:1) or unbiased control synthetic set, 64-32 MLP, 90% sparsity by default"""
    spec = SyntheticSpec.unbiased_control() if unbiased else SyntheticSpec.biased_default()
    return ExperimentConfig(
        name="desk-unbiased" if unbiased else "desk-biased",
        data=DataConfig(synthetic=spec),
        model=ArchitectureConfig(hidden=[64, 32]),
        train=TrainConfig(epochs=epochs, batch_size=64, lr=1e-3),
        prune=PruneConfig(method=method, target_keep=keep, retrain_epochs=retrain_epochs,
                          group_source=group_source),
        output_dir=str(out_dir),
        seeds=list(seeds),
    )


def rho_delta_by_seed(manifest: RunManifest) -> Dict[int, float]:
    return {r.seed: r.bias.rho_delta for r in harness.seed_reports(manifest, "pruned") if r.bias is not None}


def accuracy_by_seed(manifest: RunManifest) -> Dict[int, float]:
    return {r.seed: r.overall.accuracy for r in harness.seed_reports(manifest, "pruned")}


def _paired(a: Dict[int, float], b: Dict[int, float]) -> List[int]:
    return sorted(set(a) & set(b))


def bias_mitigation(out_dir: Union[str, Path], seeds: Sequence[int] = DESK_SEEDS, **overrides) -> Dict:
    """FairGRAPE's median ρ(Δ) beats magnitude and SNIP at no more than 2 points of accuracy"""
    manifests = {m: harness.run(desk_config(m, out_dir, seeds, **overrides)) for m in ("fairgrape", "magnitude", "snip")}
    rho = {m: float(np.median(list(rho_delta_by_seed(manifest).values()))) for m, manifest in manifests.items()}
    accuracy = {m: float(np.median(list(accuracy_by_seed(manifest).values()))) for m, manifest in manifests.items()}
    best_baseline = max(accuracy["magnitude"], accuracy["snip"])
    data = {"median_rho_delta": rho, "median_accuracy": accuracy}
    fairer = rho["fairgrape"] < rho["magnitude"] and rho["fairgrape"] < rho["snip"]
    accurate = accuracy["fairgrape"] >= best_baseline - 2.0
    if fairer and accurate:
        return ok(f"FairGRAPE rho(delta) {rho['fairgrape']:.3f} vs magnitude {rho['magnitude']:.3f}, "
                  f"SNIP {rho['snip']:.3f}", data=data)
    hints = [] if fairer else ["FairGRAPE is not the least biased method"]
    if not accurate:
        hints.append(f"FairGRAPE accuracy {accuracy['fairgrape']:.2f} trails the best baseline {best_baseline:.2f}")
    return err("bias mitigation check failed", data, hints)


def symmetry_control(out_dir: Union[str, Path], seeds: Sequence[int] = DESK_SEEDS, **overrides) -> Dict:
    """Without group-exclusive features FairGRAPE shows no systematic edge over magnitude pruning.

    The comparison only counts when pruning moved some group's accuracy: if every
    ρ(Δ) is zero the control cannot fail and is reported as an error.
    """
    fair = rho_delta_by_seed(harness.run(desk_config("fairgrape", out_dir, seeds, unbiased=True, **overrides)))
    magnitude = rho_delta_by_seed(harness.run(desk_config("magnitude", out_dir, seeds, unbiased=True, **overrides)))
    differences = np.array([fair[s] - magnitude[s] for s in _paired(fair, magnitude)])
    gap = float(abs(np.median(differences)))
    spread = float(np.std(differences))
    moved = sum(v > 0 for v in list(fair.values()) + list(magnitude.values()))
    data = {"median_gap": gap, "seed_std": spread, "differences": differences.tolist(), "nonzero_rho_delta": moved}
    if moved == 0:
        return err("symmetry control is degenerate", data, ["every rho(delta) is 0, the unbiased task is too easy"])
    if gap <= 2.0 * spread:
        return ok(f"median gap {gap:.3f} within 2 x seed std {spread:.3f}", data=data)
    return err("FairGRAPE differs systematically on unbiased data", data,
               [f"median gap {gap:.3f} exceeds 2 x seed std {spread:.3f}"])


def pseudo_group_recovery(config: ExperimentConfig, seed: int) -> float:
    """Adjusted rand index between k-means pseudo-groups and the true groups of the training split"""
    data = harness.load_dataset(config, seed)
    train_part = data.partition("train")
    reference = harness.train_reference(config, data, seed)
    pseudo = harness.scoring_data(config, train_part, reference, seed)
    return float(adjusted_rand_score(train_part.groups, pseudo.groups))


def pseudo_group_pipeline(out_dir: Union[str, Path], seeds: Sequence[int] = DESK_SEEDS,
                          min_ari: float = 0.6, min_wins: Optional[int] = None, **overrides) -> Dict:
    """k-means pseudo-groups recover the true groups, and FairGRAPE on them is no more
    biased (on the true groups) than magnitude pruning in most seeds"""
    config = desk_config("fairgrape", out_dir, seeds, group_source="pseudo_kmeans", **overrides)
    aris = [pseudo_group_recovery(config, s) for s in seeds]
    fair = rho_delta_by_seed(harness.run(config))
    magnitude = rho_delta_by_seed(harness.run(desk_config("magnitude", out_dir, seeds, **overrides)))
    paired = _paired(fair, magnitude)
    wins = sum(fair[s] <= magnitude[s] for s in paired)
    needed = min_wins if min_wins is not None else int(np.ceil(0.7 * len(seeds)))
    median_ari = float(np.median(aris))
    data = {"median_ari": median_ari, "aris": aris, "wins": wins, "paired_seeds": len(paired)}
    if median_ari >= min_ari and wins >= needed:
        return ok(f"median ARI {median_ari:.3f}, FairGRAPE no worse in {wins}/{len(paired)} seeds", data=data)
    hints = []
    if median_ari < min_ari:
        hints.append(f"median ARI {median_ari:.3f} below {min_ari}")
    if wins < needed:
        hints.append(f"FairGRAPE no worse in only {wins}/{len(paired)} seeds, {needed} needed")
    return err("pseudo-group check failed", data, hints)


CHECKS = {
    "bias-mitigation": bias_mitigation,
    "symmetry-control": symmetry_control,
    "pseudo-groups": pseudo_group_pipeline,
}
