"""Group-labeled datasets: CSV ingestion, biased synthetic data, stratified splits
and pseudo-group discovery by k-means on model embeddings."""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError
from .models import SyntheticSpec
from .tensor import no_grad

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "val", "test")
SPLIT_COLUMN = "split"


@dataclass(frozen=True, eq=False)
class GroupedDataset:
    """Rows (x_i, y_i, k_i) with name tables for classes and sensitive groups.

    ``true_groups`` is only set when ``groups`` holds pseudo-groups; evaluation then
    goes through ``evaluation_view`` so reports stay keyed by the real groups.
    """
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    group_names: Tuple[str, ...]
    class_names: Tuple[str, ...]
    feature_names: Tuple[str, ...] = ()
    split_tags: Optional[np.ndarray] = None
    true_groups: Optional[np.ndarray] = None
    true_group_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise DataError(f"features must be an n×d matrix, got shape {features.shape}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int64))
        object.__setattr__(self, "group_names", tuple(self.group_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(features.shape[1])))
        n = features.shape[0]
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise DataError("features, labels and groups must have the same number of rows")
        if len(self.feature_names) != features.shape[1]:
            raise DataError("feature_names must name every feature column")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain NaN or Inf")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index outside the class table")
        if n and (self.groups.min() < 0 or self.groups.max() >= len(self.group_names)):
            raise DataError("group index outside the group table")
        if self.split_tags is not None and len(self.split_tags) != n:
            raise DataError("split_tags must tag every row")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def check_groups_nonempty(self) -> "GroupedDataset":
        counts = np.bincount(self.groups, minlength=self.n_groups)
        empty = [self.group_names[k] for k in np.flatnonzero(counts == 0)]
        if empty:
            raise DataError(f"sensitive groups without rows: {', '.join(empty)}")
        return self

    def subset(self, rows: np.ndarray) -> "GroupedDataset":
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            labels=self.labels[rows],
            groups=self.groups[rows],
            split_tags=None if self.split_tags is None else self.split_tags[rows],
            true_groups=None if self.true_groups is None else self.true_groups[rows],
        )

    def partition(self, tag: str) -> "GroupedDataset":
        if self.split_tags is None:
            raise DataError("dataset has not been split")
        return self.subset(np.flatnonzero(self.split_tags == tag))

    def group_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.groups == k)

    def with_groups(self, groups: np.ndarray, names: Sequence[str]) -> "GroupedDataset":
        """Swap in new group labels, remembering the originals for evaluation"""
        keep_true = self.true_groups is None
        return replace(
            self,
            groups=np.asarray(groups, dtype=np.int64),
            group_names=tuple(names),
            true_groups=self.groups.copy() if keep_true else self.true_groups,
            true_group_names=self.group_names if keep_true else self.true_group_names,
        )

    def evaluation_view(self) -> "GroupedDataset":
        if self.true_groups is None:
            return self
        return replace(self, groups=self.true_groups, group_names=self.true_group_names,
                       true_groups=None, true_group_names=None)

    def equals(self, other: "GroupedDataset") -> bool:
        tags_equal = (self.split_tags is None and other.split_tags is None) or (
            self.split_tags is not None and other.split_tags is not None
            and np.array_equal(self.split_tags, other.split_tags))
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.groups, other.groups)
                and self.group_names == other.group_names
                and self.class_names == other.class_names
                and tags_equal)


# =============== CSV ===============

def names_path(path: Union[str, Path]) -> Path:
    """Name-table sidecar written next to a saved CSV"""
    path = Path(path)
    return path.with_name(path.name + ".names.json")


def _index_by_first_appearance(values: pd.Series) -> Tuple[np.ndarray, Tuple[str, ...]]:
    names = tuple(pd.unique(values))
    lookup = {name: i for i, name in enumerate(names)}
    return values.map(lookup).to_numpy(dtype=np.int64), names


def _index_by_table(values: pd.Series, names: Sequence[str], what: str) -> Tuple[np.ndarray, Tuple[str, ...]]:
    names = tuple(str(name) for name in names)
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise DataError(f"{what} value(s) missing from the name table: {', '.join(unknown)}")
    lookup = {name: i for i, name in enumerate(names)}
    return values.map(lookup).to_numpy(dtype=np.int64), names


def _name_tables(path: Path, label_column: str, group_columns: List[str]) -> Optional[dict]:
    sidecar = names_path(path)
    if not sidecar.exists():
        return None
    try:
        tables = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{sidecar} is not valid JSON: {exc}") from None
    if tables.get("label_column") != label_column or tables.get("group_columns") != group_columns:
        logger.debug("ignoring %s, it was written for other columns", sidecar)
        return None
    return tables


def load_csv(path: Union[str, Path], label_column: str = "label",
             group_columns: Sequence[str] = ("group",)) -> GroupedDataset:
    """Read a CSV with a label column, one or more group columns and numeric features.

    Several group columns form intersectional groups named ``a|b``. An optional
    ``split`` column is read back as split tags. Class and group indices follow the
    ``<name>.names.json`` sidecar written by ``save_csv`` when one is present, and
    the order of first appearance otherwise.
    """
    group_columns = list(group_columns)
    try:
        # everything as text: feature cells are converted with float() so 17-digit values round-trip
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    except FileNotFoundError:
        raise DataError(f"{path} does not exist") from None
    missing = [c for c in [label_column, *group_columns] if c not in frame.columns]
    if missing:
        raise DataError(f"{path} lacks required column(s): {', '.join(missing)}")
    if frame.empty:
        raise DataError(f"{path} has a header but no rows")

    feature_columns = [c for c in frame.columns if c not in {label_column, SPLIT_COLUMN, *group_columns}]
    features = np.zeros((len(frame), len(feature_columns)))
    for j, column in enumerate(feature_columns):
        try:
            features[:, j] = np.asarray(frame[column].to_numpy(dtype=object), dtype=np.float64)
        except (ValueError, TypeError):
            raise DataError(f"column '{column}' has a non-numeric cell") from None

    group_keys = frame[group_columns[0]] if len(group_columns) == 1 else \
        frame[group_columns].agg("|".join, axis=1)
    tables = _name_tables(Path(path), label_column, group_columns)
    if tables is None:
        labels, class_names = _index_by_first_appearance(frame[label_column])
        groups, group_names = _index_by_first_appearance(group_keys)
    else:
        labels, class_names = _index_by_table(frame[label_column], tables["class_names"], "label")
        groups, group_names = _index_by_table(group_keys, tables["group_names"], "group")
    split_tags = None
    if SPLIT_COLUMN in frame.columns:
        split_tags = frame[SPLIT_COLUMN].to_numpy(dtype=object).astype(str)
        unknown = set(split_tags) - set(SPLIT_TAGS)
        if unknown:
            raise DataError(f"unknown split tag(s): {', '.join(sorted(unknown))}")
    data = GroupedDataset(features, labels, groups, group_names, class_names,
                          tuple(feature_columns), split_tags)
    logger.info("loaded %d rows, %d features, %d groups from %s", data.n, data.dim, data.n_groups, path)
    return data.check_groups_nonempty()


def save_csv(data: GroupedDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(data.features, columns=list(data.feature_names))
    frame.insert(0, "group", np.asarray(data.group_names, dtype=object)[data.groups])
    frame.insert(0, "label", np.asarray(data.class_names, dtype=object)[data.labels])
    if data.split_tags is not None:
        frame[SPLIT_COLUMN] = data.split_tags
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    # first-appearance order would lose the name tables, so they go next to the CSV
    names_path(path).write_text(json.dumps({
        "label_column": "label", "group_columns": ["group"],
        "class_names": list(data.class_names), "group_names": list(data.group_names),
    }, indent=2) + "\n")
    return path


# =============== Synthetic data ===============

def _class_code(positions: int, c: int, n_classes: int) -> np.ndarray:
    """+1 on positions congruent to c mod n_classes, -1 elsewhere"""
    return np.where(np.arange(positions) % n_classes == c, 1.0, -1.0)


def synthesize_biased(spec: SyntheticSpec) -> GroupedDataset:
    """Gaussian cells where a group's class signal lives only in its exclusive features.

    Shared features (in no exclusive or signature set) carry noise plus
    ``common_signal``, so a model needs weights that matter for one group only.
    Signature features shift with the group and ignore the class.
    """
    owned = [j for indices in spec.exclusive_features for j in indices]
    if len(owned) != len(set(owned)):
        raise DataError("exclusive feature sets overlap")
    signature = np.array(spec.signature_features, dtype=np.int64)
    taken = set(owned) | set(spec.signature_features)
    shared = np.array([j for j in range(spec.feature_dim) if j not in taken], dtype=np.int64)
    separations = spec.separations()
    rng = np.random.default_rng(spec.seed)
    blocks, labels, groups = [], [], []
    for k, counts in enumerate(spec.counts()):
        exclusive = np.array(spec.exclusive_features[k], dtype=np.int64)
        for c, count in enumerate(counts):
            mean = np.zeros(spec.feature_dim)
            mean[exclusive] = separations[k] * _class_code(len(exclusive), c, spec.n_classes)
            mean[shared] = spec.common_signal * _class_code(len(shared), c, spec.n_classes)
            mean[signature] = spec.signature_shift * _class_code(len(signature), k, spec.n_groups)
            blocks.append(mean + spec.noise * rng.standard_normal((count, spec.feature_dim)))
            labels.append(np.full(count, c))
            groups.append(np.full(count, k))
    features = np.vstack(blocks)
    groups = np.concatenate(groups)
    names = [f"x{j}" for j in range(spec.feature_dim)]
    if spec.append_group_onehot:
        features = np.hstack([features, np.eye(spec.n_groups)[groups]])
        names += [f"member_{name}" for name in spec.names()]
    data = GroupedDataset(features, np.concatenate(labels), groups, spec.names(),
                          [f"class-{c}" for c in range(spec.n_classes)], tuple(names))
    logger.info("synthesized %d rows over %d groups (seed %d)", data.n, data.n_groups, spec.seed)
    return data.check_groups_nonempty()


# =============== Splits and subsets ===============

def split(data: GroupedDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> GroupedDataset:
    """Tag rows train/val/test, stratified by (group, class) cell.

    Validation and test take floor(n·f) rows of every cell; train takes the rest, so a
    nonempty cell always contributes to train.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be three non-negative numbers, got {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")
    rng = np.random.default_rng(seed)
    tags = np.empty(data.n, dtype=object)
    cells = data.groups * data.n_classes + data.labels
    for cell in np.unique(cells):
        rows = rng.permutation(np.flatnonzero(cells == cell))
        n_val = int(np.floor(len(rows) * fractions[1]))
        n_test = int(np.floor(len(rows) * fractions[2]))
        if n_val + n_test >= len(rows):
            n_val, n_test = max(0, len(rows) - 1 - n_test), min(n_test, len(rows) - 1)
        tags[rows[:n_val]] = "val"
        tags[rows[n_val:n_val + n_test]] = "test"
        tags[rows[n_val + n_test:]] = "train"
    return replace(data, split_tags=tags.astype(str))


def subset_groups(data: GroupedDataset, names: Sequence[str]) -> GroupedDataset:
    """Keep only rows of the named groups, re-indexed in the order given"""
    unknown = [name for name in names if name not in data.group_names]
    if unknown:
        raise DataError(f"unknown group(s): {', '.join(unknown)}")
    if not names:
        raise DataError("subset_groups needs at least one group name")
    old = [data.group_names.index(name) for name in names]
    remap = np.full(data.n_groups, -1, dtype=np.int64)
    remap[old] = np.arange(len(old))
    rows = np.flatnonzero(np.isin(data.groups, old))
    sub = data.subset(rows)
    return replace(sub, groups=remap[sub.groups], group_names=tuple(names))


# =============== Embeddings and clustering ===============

def extract_embeddings(model, data: Union[GroupedDataset, np.ndarray], layer: int = -1,
                       batch_size: int = 1024) -> np.ndarray:
    """Activations of hidden layer ``layer`` (default penultimate), one row per input row"""
    features = data.features if isinstance(data, GroupedDataset) else np.asarray(data, dtype=np.float64)
    chunks = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            chunks.append(model.embed(features[start:start + batch_size], layer).data)
    return np.vstack(chunks)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_trace: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1]


def _kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = cdist(points, centroids[:1], "sqeuclidean").ravel()
    for i in range(1, k):
        total = closest.sum()
        choice = rng.choice(n, p=closest / total) if total > 0 else int(rng.integers(n))
        centroids[i] = points[choice]
        closest = np.minimum(closest, cdist(points, centroids[i:i + 1], "sqeuclidean").ravel())
    return centroids


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iters: int) -> KMeansResult:
    centroids = _kmeans_plusplus(points, k, rng)
    rows = np.arange(len(points))
    labels: Optional[np.ndarray] = None
    trace: List[float] = []
    converged = False
    for _ in range(max_iters):
        distances = cdist(points, centroids, "sqeuclidean")
        assignment = distances.argmin(axis=1)
        trace.append(float(distances[rows, assignment].sum()))
        if labels is not None and np.array_equal(assignment, labels):
            converged = True
            break
        labels = assignment
        own = distances[rows, labels].copy()
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(own.argmax())
                centroids[j] = points[far]
                own[far] = -1.0
    if not converged:
        distances = cdist(points, centroids, "sqeuclidean")
        labels = distances.argmin(axis=1)
        trace.append(float(distances[rows, labels].sum()))
    return KMeansResult(labels, centroids, trace, converged)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100, n_init: int = 1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its own centroid. With
    ``n_init`` > 1 the seeding is repeated from one seeded stream and the run with the
    lowest final inertia wins (earliest on ties). Labels are renumbered by descending
    cluster size (ties: lower original label first).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise DataError("kmeans needs a non-empty n×h point matrix")
    if not 1 <= k <= len(points):
        raise DataError(f"kmeans needs 1 <= k <= n, got k={k}, n={len(points)}")
    if n_init < 1:
        raise DataError(f"kmeans needs n_init >= 1, got {n_init}")
    rng = np.random.default_rng(seed)
    best: Optional[KMeansResult] = None
    for _ in range(n_init):
        result = _lloyd(points, k, rng, max_iters)
        if best is None or result.inertia < best.inertia:
            best = result

    sizes = np.bincount(best.labels, minlength=k)
    order = sorted(range(k), key=lambda j: (-sizes[j], j))
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    return KMeansResult(relabel[best.labels], best.centroids[order], best.inertia_trace, best.converged)


def pseudo_groups(data: GroupedDataset, model, k: int, seed: int = 0, max_iters: int = 100,
                  layer: int = -1, n_init: int = 1) -> GroupedDataset:
    """Replace group labels by k-means clusters of hidden-layer embeddings"""
    result = kmeans(extract_embeddings(model, data, layer), k, seed=seed, max_iters=max_iters, n_init=n_init)
    logger.info("pseudo-groups: k=%d on hidden layer %d, inertia %.4f after %d iterations",
                k, layer, result.inertia, len(result.inertia_trace))
    return data.with_groups(result.labels, [f"cluster-{j}" for j in range(k)])
