"""Per-group weight importance and the share bookkeeping that drives FairGRAPE.

For group k and weight w the importance is the squared loss change from removing w,
approximated to first order by (g_w · w)². Within one layer, group totals I_k give
shares P_k = I_k / Σ I_k, and share deltas compare a selection's shares with a
target: ΔP_k = (P_k − P_k^target) / P_k^target.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data import GroupedDataset
from .errors import ContractError, DataError, DegenerateImportanceError
from .network import Model, loss_and_gradients, loss_value

logger = logging.getLogger(__name__)

IMPORTANCE_COLUMNS = ["layer_id", "group", "weight_index", "score"]


@dataclass
class ImportanceTable:
    """Scores I_{k,w} for one layer: one row per group, one column per flat weight"""
    layer_id: int
    scores: np.ndarray
    mask: np.ndarray
    group_names: Tuple[str, ...] = ()
    target_shares: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8).reshape(-1)
        if self.scores.ndim != 2 or self.scores.shape[1] != self.mask.size:
            raise ContractError(f"scores {self.scores.shape} do not match a mask of {self.mask.size} weights")
        if np.any(self.scores < 0):
            raise ContractError("importance scores must be non-negative")
        if not self.group_names:
            self.group_names = tuple(f"group-{k}" for k in range(self.n_groups))

    @property
    def n_groups(self) -> int:
        return self.scores.shape[0]

    @property
    def n_weights(self) -> int:
        return self.scores.shape[1]

    @property
    def group_totals(self) -> np.ndarray:
        return self.scores.sum(axis=1)

    @property
    def shares(self) -> np.ndarray:
        return shares(self.group_totals)

    @property
    def deltas(self) -> np.ndarray:
        if self.target_shares is None:
            raise ContractError("deltas need stored target shares")
        return share_delta(self.shares, self.target_shares)

    def with_current_target(self) -> "ImportanceTable":
        """Target = shares of the weights this table currently holds (unpruned entries)"""
        self.target_shares = self.shares
        return self


def shares(totals: Sequence[float]) -> np.ndarray:
    totals = np.asarray(totals, dtype=np.float64)
    total = totals.sum()
    if not total > 0:
        raise DegenerateImportanceError("all group importance totals are zero")
    return totals / total


def share_delta(current: Sequence[float], target: Sequence[float]) -> np.ndarray:
    current = np.asarray(current, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if current.shape != target.shape:
        raise ContractError(f"share vectors differ in length: {current.shape} vs {target.shape}")
    if np.any(target <= 0):
        raise DegenerateImportanceError("a target share is zero; relative change is undefined")
    return (current - target) / target


def taylor_importance(gradients: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(g_w · w)² on unpruned entries, exactly 0 on pruned ones"""
    if gradients.shape != weights.shape or weights.shape != mask.shape:
        raise ContractError(f"shapes differ: grad {gradients.shape}, weights {weights.shape}, mask {mask.shape}")
    product = gradients * weights
    return np.where(mask.astype(bool), product * product, 0.0)


def group_gradients(model: Model, data: GroupedDataset, group: int, sample_fraction: float = 0.2,
                    batch_size: int = 64, seed: int = 0) -> List[np.ndarray]:
    """Weight gradients of the mean loss over a seeded sample of one group's rows.

    Mini-batch gradients are weighted by batch size, which makes the sum equal to the
    gradient of the mean over the whole sample.
    """
    if not 0 < sample_fraction <= 1:
        raise ContractError(f"sample_fraction must lie in (0, 1], got {sample_fraction}")
    rows = data.group_rows(group)
    if rows.size == 0:
        raise DataError(f"group {group} has no rows")
    count = max(1, math.ceil(sample_fraction * rows.size))
    rng = np.random.default_rng([seed, group])
    sample = np.sort(rng.choice(rows, size=count, replace=False))
    totals = [np.zeros_like(layer.weights.data) for layer in model.layers]
    for start in range(0, count, batch_size):
        batch = sample[start:start + batch_size]
        _, grads, _ = loss_and_gradients(model, data.features[batch], data.labels[batch])
        weight = len(batch) / count
        for acc, g in zip(totals, grads):
            acc += weight * g
    return totals


def all_group_gradients(model: Model, data: GroupedDataset, sample_fraction: float = 0.2,
                        batch_size: int = 64, seed: int = 0, workers: int = 1) -> List[List[np.ndarray]]:
    """``group_gradients`` for every group; with workers > 1 each pass runs on its own clone"""
    groups = range(data.n_groups)
    if workers <= 1:
        return [group_gradients(model, data, k, sample_fraction, batch_size, seed) for k in groups]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(group_gradients, model.clone(), data, k, sample_fraction, batch_size, seed)
                   for k in groups]
        return [f.result() for f in futures]


def layer_table(model: Model, layer_id: int, per_group_grads: List[List[np.ndarray]],
                group_names: Sequence[str] = ()) -> ImportanceTable:
    layer = model.layers[layer_id]
    scores = np.vstack([
        taylor_importance(grads[layer_id], layer.weights.data, layer.mask).reshape(-1)
        for grads in per_group_grads
    ])
    return ImportanceTable(layer_id, scores, layer.mask.reshape(-1), tuple(group_names))


def importance_tables(model: Model, data: GroupedDataset, sample_fraction: float = 0.2,
                      batch_size: int = 64, seed: int = 0, workers: int = 1) -> List[ImportanceTable]:
    """One table per layer, all computed from the same gradient passes, targets = current shares"""
    grads = all_group_gradients(model, data, sample_fraction, batch_size, seed, workers)
    tables = []
    for layer_id in range(len(model.layers)):
        table = layer_table(model, layer_id, grads, data.group_names)
        if table.group_totals.sum() > 0:
            table.with_current_target()
        tables.append(table)
    return tables


def exact_importance(model: Model, data: GroupedDataset, group: int, layer_id: int, weight_index: int) -> float:
    """Squared change of group loss from zeroing one weight (brute force, tiny nets only)"""
    if not 0 <= layer_id < len(model.layers):
        raise ContractError(f"layer {layer_id} out of range")
    weights = model.layers[layer_id].weights.data.reshape(-1)
    if not 0 <= weight_index < weights.size:
        raise ContractError(f"weight index {weight_index} out of range for layer {layer_id}")
    rows = data.group_rows(group)
    if rows.size == 0:
        raise DataError(f"group {group} has no rows")
    x, y = data.features[rows], data.labels[rows]
    base = loss_value(model, x, y)
    original = weights[weight_index]
    weights[weight_index] = 0.0
    try:
        removed = loss_value(model, x, y)
    finally:
        weights[weight_index] = original
    return (base - removed) ** 2


def dump_importance(tables: Sequence[ImportanceTable], path: Union[str, Path]) -> Path:
    """Write layer_id, group, weight_index, score rows"""
    frames = []
    for table in tables:
        k, w = np.meshgrid(np.arange(table.n_groups), np.arange(table.n_weights), indexing="ij")
        frames.append(pd.DataFrame({
            "layer_id": table.layer_id,
            "group": np.asarray(table.group_names, dtype=object)[k.ravel()],
            "weight_index": w.ravel(),
            "score": table.scores.ravel(),
        }))
    frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=IMPORTANCE_COLUMNS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def load_importance(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"group": str}, float_precision="round_trip")
    missing = [c for c in IMPORTANCE_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path} is not an importance dump (missing {', '.join(missing)})")
    return frame
