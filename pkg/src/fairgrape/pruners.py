"""FairGRAPE and the baseline pruners (magnitude/WS, SNIP, GraSP, Lottery).

Layer-wise methods (FairGRAPE, magnitude, Lottery) follow one iterative schedule:
each iteration keeps round((1 − r) · remaining) weights per layer, the last iteration
lands every layer on its share of round(c · m), and the network is retrained for e
epochs after each iteration. SNIP and GraSP rank all layers together in one shot.

Ties are always broken by the lowest index (group index, then flat weight index).
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data import GroupedDataset, subset_groups
from .errors import ConfigError, ContractError, DegenerateImportanceError
from .importance import ImportanceTable, all_group_gradients, layer_table, importance_tables, share_delta
from .models import PruneConfig, TrainConfig
from .network import Model, apply_masks, loss_and_gradients, reset_to_snapshot, train

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iteration", "layer_id", "step", "group", "weight_index"]


# =============== Schedule ===============

def compute_iterations(r: float, c: float) -> int:
    """Iterations needed to shrink to keep fraction c when each removes a fraction r"""
    if not (0 < r < 1 and 0 < c < 1):
        raise ConfigError(f"r and c must lie in (0, 1), got r={r}, c={c}")
    # tolerance keeps exact powers (e.g. r=0.5, c=0.25) from rounding up an extra step
    return max(1, math.ceil(math.log(c) / math.log(1.0 - r) - 1e-9))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def allocate_keep_counts(layer_sizes: Sequence[int], keep_fraction: float) -> List[int]:
    """Per-layer keep counts summing to round(c · m), each within one of c · n_layer.

    Largest-remainder rounding; a layer that would keep nothing keeps one weight,
    taken from a layer that was rounded up.
    """
    exact = [keep_fraction * n for n in layer_sizes]
    counts = [int(math.floor(e)) for e in exact]
    total = min(sum(layer_sizes), max(1, _round_half_up(keep_fraction * sum(layer_sizes))))
    by_remainder = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in by_remainder[:max(0, total - sum(counts))]:
        counts[i] += 1
    for i, n in enumerate(counts):
        if n == 0 and layer_sizes[i] > 0:
            donors = [j for j in range(len(counts)) if counts[j] > max(1, math.floor(exact[j]))]
            if donors:
                counts[max(donors, key=lambda j: counts[j])] -= 1
                counts[i] = 1
    return counts


def iteration_keep_count(remaining: int, final: int, r: float, is_last: bool) -> int:
    if is_last:
        return min(final, remaining)
    return min(remaining, max(final, _round_half_up((1.0 - r) * remaining)))


# =============== Selection ===============

@dataclass(frozen=True)
class TraceStep:
    step: int
    group: int
    weight_index: int
    deltas: Tuple[float, ...]


@dataclass
class SelectionTrace:
    """Greedy choices per layer for one pruning iteration"""
    iteration: int = 0
    layers: Dict[int, List[TraceStep]] = field(default_factory=dict)

    def rows(self) -> List[Dict[str, int]]:
        return [
            {"iteration": self.iteration, "layer_id": layer_id, "step": s.step,
             "group": s.group, "weight_index": s.weight_index}
            for layer_id, steps in sorted(self.layers.items()) for s in steps
        ]


def fairgrape_select_layer(table: ImportanceTable, keep_count: int) -> Tuple[np.ndarray, List[TraceStep]]:
    """Greedy share-balancing selection of ``keep_count`` weights in one layer.

    Current shares start at 1/|K|. Each step picks the group with the smallest ΔP_k,
    adds that group's best unselected weight, credits the weight's score to every
    group's selected total and recomputes shares and deltas.
    """
    candidates = np.flatnonzero(table.mask)
    if not 0 <= keep_count <= candidates.size:
        raise ContractError(f"cannot keep {keep_count} of {candidates.size} unpruned weights")
    target = table.target_shares if table.target_shares is not None else table.shares
    k_count = table.n_groups
    scores = table.scores
    orders = [candidates[np.lexsort((candidates, -scores[k, candidates]))] for k in range(k_count)]
    pointers = [0] * k_count
    selected = np.zeros(table.n_weights, dtype=bool)
    totals = np.zeros(k_count)
    current = np.full(k_count, 1.0 / k_count)
    deltas = share_delta(current, target)
    steps: List[TraceStep] = []
    for step in range(keep_count):
        k = int(np.argmin(deltas))
        order, p = orders[k], pointers[k]
        while selected[order[p]]:
            p += 1
        w = int(order[p])
        pointers[k] = p + 1
        selected[w] = True
        steps.append(TraceStep(step, k, w, tuple(float(d) for d in deltas)))
        totals += scores[:, w]
        total = totals.sum()
        if total > 0:
            current = totals / total
        deltas = share_delta(current, target)
    return selected.astype(np.uint8), steps


def top_k_mask(scores: np.ndarray, mask: np.ndarray, keep_count: int,
               secondary: Optional[np.ndarray] = None) -> np.ndarray:
    """Keep the highest-scoring unpruned entries (ties: secondary desc, then lowest index)"""
    flat_scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    candidates = np.flatnonzero(np.asarray(mask).reshape(-1))
    if not 0 <= keep_count <= candidates.size:
        raise ContractError(f"cannot keep {keep_count} of {candidates.size} unpruned weights")
    keys = [candidates]
    if secondary is not None:
        keys.append(-np.asarray(secondary, dtype=np.float64).reshape(-1)[candidates])
    keys.append(-flat_scores[candidates])
    chosen = candidates[np.lexsort(tuple(keys))[:keep_count]]
    out = np.zeros(flat_scores.size, dtype=np.uint8)
    out[chosen] = 1
    return out


def hessian_gradient_product(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                             g: np.ndarray, eps_scale: float = 1e-4) -> np.ndarray:
    """H·g by a forward difference of gradients along the unit direction of g"""
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return np.zeros_like(theta)
    eps = eps_scale * max(1.0, float(np.linalg.norm(theta)))
    direction = g / norm
    return norm * (grad_fn(theta + eps * direction) - grad_fn(theta)) / eps


# =============== Results ===============

@dataclass
class IterationReport:
    iteration: int
    kept_per_layer: List[int]
    kept_total: int
    retrain_loss: Optional[float] = None
    fallback_layers: List[int] = field(default_factory=list)


@dataclass
class PruneResult:
    model: Model
    method: str
    iterations: List[IterationReport] = field(default_factory=list)
    traces: List[SelectionTrace] = field(default_factory=list)

    def export_traces(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = [row for trace in self.traces for row in trace.rows()]
        pd.DataFrame(rows, columns=TRACE_COLUMNS).to_csv(path, index=False, lineterminator="\n")
        return path


IterationHook = Callable[[int, Model, IterationReport], None]


# =============== Shared driver ===============

def _derived_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _retrain(model: Model, data: Optional[GroupedDataset], config: PruneConfig,
             train_config: Optional[TrainConfig], iteration: int) -> Optional[float]:
    if config.retrain_epochs == 0:
        return None
    if data is None:
        raise ContractError("retraining requested but no training data was given")
    train_config = train_config or TrainConfig()
    before = len(model.loss_history)
    train(model, data, config.retrain_epochs, batch_size=train_config.batch_size,
          seed=_derived_seed(config.seed, iteration), config=train_config)
    return model.loss_history[-1] if len(model.loss_history) > before else None


def _report(model: Model, iteration: int, loss: Optional[float], fallback: List[int]) -> IterationReport:
    kept = [layer.nonzero_count for layer in model.layers]
    return IterationReport(iteration, kept, sum(kept), loss, fallback)


LayerSelector = Callable[[Model, int, int, int], Tuple[np.ndarray, Optional[List[TraceStep]], bool]]


def _iterative_prune(model: Model, config: PruneConfig, select: LayerSelector, method: str,
                     retrain_data: Optional[GroupedDataset], train_config: Optional[TrainConfig],
                     after_select: Optional[Callable[[Model], None]] = None,
                     on_iteration: Optional[IterationHook] = None) -> PruneResult:
    r = config.effective_step
    iterations = compute_iterations(r, config.target_keep)
    final = allocate_keep_counts(model.layer_sizes(), config.target_keep)
    result = PruneResult(model, method)
    logger.info("%s: %d iteration(s), r=%.4g, keep=%.4g of %d weights",
                method, iterations, r, config.target_keep, model.num_weights)
    for it in range(iterations):
        trace = SelectionTrace(iteration=it)
        fallback = []
        for layer_id, layer in enumerate(model.layers):
            keep = iteration_keep_count(layer.nonzero_count, final[layer_id], r, it == iterations - 1)
            mask, steps, fell_back = select(model, layer_id, keep, it)
            layer.mask = mask.reshape(layer.weights.shape).astype(np.uint8)
            if steps is not None:
                trace.layers[layer_id] = steps
            if fell_back:
                fallback.append(layer_id)
        apply_masks(model)
        if after_select is not None:
            after_select(model)
        loss = _retrain(model, retrain_data, config, train_config, it)
        report = _report(model, it, loss, fallback)
        result.iterations.append(report)
        if trace.layers:
            result.traces.append(trace)
        logger.debug("%s iteration %d kept %s", method, it, report.kept_per_layer)
        if on_iteration is not None:
            on_iteration(it, model, report)
    return result


def importance_data(data: GroupedDataset, config: PruneConfig, pooled: bool = False) -> GroupedDataset:
    """Rows and group labels used to score weights under the config's restrictions"""
    if config.importance_groups:
        data = subset_groups(data, config.importance_groups)
    if pooled:
        data = data.with_groups(np.zeros(data.n, dtype=np.int64), ["all"])
    return data


def _magnitude_layer(model: Model, layer_id: int, keep: int) -> np.ndarray:
    layer = model.layers[layer_id]
    return top_k_mask(np.abs(layer.weights.data), layer.mask, keep)


# =============== Methods ===============

def fairgrape_prune(model: Model, data: GroupedDataset, config: PruneConfig,
                    retrain_data: Optional[GroupedDataset] = None,
                    train_config: Optional[TrainConfig] = None,
                    on_iteration: Optional[IterationHook] = None) -> PruneResult:
    """Iterative layer-wise greedy selection that keeps group importance shares balanced"""
    model = model.clone()
    scoring = importance_data(data, config, pooled=not config.group_importance)
    retrain_data = retrain_data if retrain_data is not None else data
    sample = dict(sample_fraction=config.importance_sample_fraction, batch_size=config.batch_size,
                  workers=config.workers)
    original_targets: Dict[int, np.ndarray] = {}
    if config.target_shares == "original":
        for table in importance_tables(model, scoring, seed=config.seed, **sample):
            if table.target_shares is not None:
                original_targets[table.layer_id] = table.target_shares

    def select(current: Model, layer_id: int, keep: int, iteration: int):
        grads = all_group_gradients(current, scoring, seed=_derived_seed(config.seed, iteration), **sample)
        table = layer_table(current, layer_id, grads, scoring.group_names)
        try:
            if config.target_shares == "original" and layer_id in original_targets:
                table.target_shares = original_targets[layer_id]
            else:
                table.with_current_target()
            mask, steps = fairgrape_select_layer(table, keep)
            return mask, steps, False
        except DegenerateImportanceError as exc:
            logger.warning("layer %d: %s; falling back to magnitude selection", layer_id, exc)
            return _magnitude_layer(current, layer_id, keep), None, True

    return _iterative_prune(model, config, select, "fairgrape", retrain_data, train_config,
                            on_iteration=on_iteration)


def magnitude_prune(model: Model, config: PruneConfig, data: Optional[GroupedDataset] = None,
                    train_config: Optional[TrainConfig] = None,
                    on_iteration: Optional[IterationHook] = None) -> PruneResult:
    """WS baseline: per layer keep the largest |w| on the same iterative schedule"""
    model = model.clone()

    def select(current: Model, layer_id: int, keep: int, iteration: int):
        return _magnitude_layer(current, layer_id, keep), None, False

    return _iterative_prune(model, config, select, "magnitude", data, train_config, on_iteration=on_iteration)


def lottery_prune(model: Model, data: Optional[GroupedDataset], config: PruneConfig,
                  train_config: Optional[TrainConfig] = None,
                  on_iteration: Optional[IterationHook] = None) -> PruneResult:
    """Iterative magnitude pruning with survivors rewound to their initial values"""
    if model.initial_snapshot is None:
        reset_to_snapshot(model)  # raises MissingSnapshotError
    model = model.clone()

    def select(current: Model, layer_id: int, keep: int, iteration: int):
        return _magnitude_layer(current, layer_id, keep), None, False

    return _iterative_prune(model, config, select, "lottery", data, train_config,
                            after_select=reset_to_snapshot, on_iteration=on_iteration)


def _global_prune(model: Model, scores: List[np.ndarray], config: PruneConfig, method: str,
                  secondary: Optional[List[np.ndarray]], retrain_data: Optional[GroupedDataset],
                  train_config: Optional[TrainConfig], on_iteration: Optional[IterationHook]) -> PruneResult:
    sizes = model.layer_sizes()
    keep_total = sum(allocate_keep_counts(sizes, config.target_keep))
    flat_mask = np.concatenate([layer.mask.reshape(-1) for layer in model.layers])
    flat_scores = np.concatenate([s.reshape(-1) for s in scores])
    flat_secondary = None if secondary is None else np.concatenate([s.reshape(-1) for s in secondary])
    keep = top_k_mask(flat_scores, flat_mask, min(keep_total, int(flat_mask.sum())), flat_secondary)
    offset = 0
    for layer, n in zip(model.layers, sizes):
        layer.mask = keep[offset:offset + n].reshape(layer.weights.shape)
        offset += n
    apply_masks(model)
    loss = _retrain(model, retrain_data, config, train_config, 0)
    report = _report(model, 0, loss, [])
    logger.info("%s kept %d of %d weights, per layer %s", method, report.kept_total, model.num_weights,
                report.kept_per_layer)
    if on_iteration is not None:
        on_iteration(0, model, report)
    return PruneResult(model, method, [report])


def _scoring_batch(data: GroupedDataset, batch_size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(data.n, size=min(batch_size, data.n), replace=False))


def snip_scores(model: Model, features: np.ndarray, labels: np.ndarray) -> List[np.ndarray]:
    """Connection sensitivity |g · w| from one mini-batch"""
    _, grads, _ = loss_and_gradients(model, features, labels)
    return [np.abs(g * layer.weights.data) * layer.mask for g, layer in zip(grads, model.layers)]


def snip_prune(model: Model, data: GroupedDataset, config: PruneConfig,
               retrain_data: Optional[GroupedDataset] = None,
               train_config: Optional[TrainConfig] = None,
               on_iteration: Optional[IterationHook] = None) -> PruneResult:
    """Single-shot global pruning by connection sensitivity, then retraining"""
    model = model.clone()
    scoring = importance_data(data, config)
    rows = _scoring_batch(scoring, config.batch_size, config.seed)
    scores = snip_scores(model, scoring.features[rows], scoring.labels[rows])
    return _global_prune(model, scores, config, "snip", None,
                         retrain_data if retrain_data is not None else data, train_config, on_iteration)


def grasp_scores(model: Model, features: np.ndarray, labels: np.ndarray, eps_scale: float = 1e-4) -> List[np.ndarray]:
    """−w · (H g)_w with H·g from a finite difference of weight gradients"""
    shifted = model.clone()
    shapes = [layer.weights.shape for layer in shifted.layers]
    sizes = [layer.num_weights for layer in shifted.layers]

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        offset = 0
        for layer, n, shape in zip(shifted.layers, sizes, shapes):
            layer.weights.data[...] = theta[offset:offset + n].reshape(shape)
            offset += n
        _, grads, _ = loss_and_gradients(shifted, features, labels)
        return np.concatenate([g.reshape(-1) for g in grads])

    theta = np.concatenate([layer.weights.data.reshape(-1) for layer in model.layers])
    g = grad_fn(theta)
    hg = hessian_gradient_product(grad_fn, theta, g, eps_scale)
    flat = -theta * hg
    out, offset = [], 0
    for layer, n, shape in zip(model.layers, sizes, shapes):
        out.append(flat[offset:offset + n].reshape(shape) * layer.mask)
        offset += n
    return out


def grasp_prune(model: Model, data: GroupedDataset, config: PruneConfig,
                retrain_data: Optional[GroupedDataset] = None,
                train_config: Optional[TrainConfig] = None,
                on_iteration: Optional[IterationHook] = None) -> PruneResult:
    """Single-shot global pruning keeping the highest Hessian-gradient scores"""
    model = model.clone()
    scoring = importance_data(data, config)
    totals: Optional[List[np.ndarray]] = None
    for b in range(config.grasp_batches):
        rows = _scoring_batch(scoring, config.batch_size, _derived_seed(config.seed, b))
        scores = grasp_scores(model, scoring.features[rows], scoring.labels[rows], config.grasp_epsilon)
        totals = scores if totals is None else [t + s for t, s in zip(totals, scores)]
    if all(not np.any(s) for s in totals):
        logger.warning("grasp: all scores are zero; ranking falls back to weight magnitude")
    magnitudes = [np.abs(layer.weights.data) for layer in model.layers]
    return _global_prune(model, totals, config, "grasp", magnitudes,
                         retrain_data if retrain_data is not None else data, train_config, on_iteration)


def prune(model: Model, data: GroupedDataset, config: PruneConfig,
          retrain_data: Optional[GroupedDataset] = None, train_config: Optional[TrainConfig] = None,
          on_iteration: Optional[IterationHook] = None) -> PruneResult:
    """Run the method named by ``config.method``; ``data`` drives scoring, ``retrain_data``
    (default: ``data``) drives retraining"""
    retrain_data = retrain_data if retrain_data is not None else data
    if config.method == "fairgrape":
        return fairgrape_prune(model, data, config, retrain_data, train_config, on_iteration)
    if config.method == "magnitude":
        return magnitude_prune(model, config, retrain_data, train_config, on_iteration)
    if config.method == "lottery":
        return lottery_prune(model, retrain_data, config, train_config, on_iteration)
    if config.method == "snip":
        return snip_prune(model, data, config, retrain_data, train_config, on_iteration)
    if config.method == "grasp":
        return grasp_prune(model, data, config, retrain_data, train_config, on_iteration)
    raise ConfigError(f"unknown pruning method '{config.method}'")
