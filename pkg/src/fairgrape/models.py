"""Pydantic models for experiment configuration, reports and run manifests"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PruneMethod = Literal["fairgrape", "magnitude", "snip", "grasp", "lottery"]
PRUNE_METHODS = ("fairgrape", "magnitude", "snip", "grasp", "lottery")


class StrictModel(BaseModel):
    """Base for config sections: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


# =============== Data Models ===============

class SyntheticSpec(StrictModel):
    """Recipe for a group-labeled synthetic dataset whose class signal lives in
    group-exclusive feature indices"""
    n_per_cell: int = Field(default=1000, ge=1, description="Rows per (group, class) cell")
    cell_counts: Optional[List[List[int]]] = Field(
        default=None,
        description="Explicit rows per [group][class]; overrides n_per_cell (use it to make minorities)"
    )
    n_classes: int = Field(default=2, ge=2)
    feature_dim: int = Field(default=24, ge=1)
    exclusive_features: List[List[int]] = Field(
        default_factory=lambda: [list(range(0, 6)), list(range(6, 12))],
        description="Per-group feature indices carrying that group's class signal"
    )
    noise: float = Field(default=1.0, ge=0.0, description="Std-dev of the Gaussian noise on every feature")
    separation: float = Field(default=1.0, ge=0.0, description="Class-mean offset on exclusive features")
    group_separation: Optional[List[float]] = Field(
        default=None, description="Per-group class-mean offset on exclusive features; overrides separation"
    )
    common_signal: float = Field(default=0.25, ge=0.0, description="Weak class offset on shared features")
    signature_features: List[int] = Field(
        default_factory=list, description="Feature indices whose mean marks group membership, not the class"
    )
    signature_shift: float = Field(default=0.0, ge=0.0, description="Group-mean offset on signature features")
    group_names: Optional[List[str]] = None
    append_group_onehot: bool = Field(default=True, description="Append group membership as one-hot features")
    seed: int = 0

    @model_validator(mode="after")
    def _check_layout(self):
        groups = len(self.exclusive_features)
        if groups < 1:
            raise ValueError("at least one group is required")
        seen = set()
        for indices in self.exclusive_features:
            for j in indices:
                if j < 0 or j >= self.feature_dim:
                    raise ValueError(f"exclusive feature {j} outside feature_dim {self.feature_dim}")
                if j in seen:
                    raise ValueError(f"exclusive feature {j} is shared by several groups")
                seen.add(j)
        if self.group_names is not None and len(self.group_names) != groups:
            raise ValueError("group_names must name every group")
        if self.group_separation is not None:
            if len(self.group_separation) != groups or any(s < 0 for s in self.group_separation):
                raise ValueError("group_separation needs one non-negative offset per group")
        for j in self.signature_features:
            if j < 0 or j >= self.feature_dim:
                raise ValueError(f"signature feature {j} outside feature_dim {self.feature_dim}")
            if j in seen:
                raise ValueError(f"signature feature {j} is also an exclusive feature")
        if len(set(self.signature_features)) != len(self.signature_features):
            raise ValueError("signature features repeat an index")
        if self.cell_counts is not None:
            if len(self.cell_counts) != groups or any(len(row) != self.n_classes for row in self.cell_counts):
                raise ValueError("cell_counts must be a [groups][n_classes] table")
            if any(count < 1 for row in self.cell_counts for count in row):
                raise ValueError("every (group, class) cell needs at least one row")
        return self

    @property
    def n_groups(self) -> int:
        return len(self.exclusive_features)

    def counts(self) -> List[List[int]]:
        if self.cell_counts is not None:
            return [list(row) for row in self.cell_counts]
        return [[self.n_per_cell] * self.n_classes for _ in range(self.n_groups)]

    def names(self) -> List[str]:
        return list(self.group_names) if self.group_names else [f"group-{k}" for k in range(self.n_groups)]

    def separations(self) -> List[float]:
        if self.group_separation is not None:
            return list(self.group_separation)
        return [self.separation] * self.n_groups

    @classmethod
    def biased_default(cls, seed: int = 0) -> "SyntheticSpec":
        """Two groups at 9:1, n=8000. The minority's class signal is spread thin over
        twelve exclusive features, the majority's sits in six stronger ones, and eight
        signature features mark group membership without carrying the class."""
        return cls(cell_counts=[[3600, 3600], [400, 400]], feature_dim=32,
                   exclusive_features=[list(range(0, 6)), list(range(6, 18))],
                   group_separation=[0.6, 0.35], common_signal=0.1,
                   signature_features=list(range(18, 26)), signature_shift=2.5,
                   group_names=["majority", "minority"], seed=seed)

    @classmethod
    def unbiased_control(cls, seed: int = 0) -> "SyntheticSpec":
        """Symmetric control: no exclusive features, a weak signal shared by both groups
        so neither group is classified perfectly"""
        return cls(cell_counts=[[1000, 1000], [1000, 1000]], exclusive_features=[[], []],
                   common_signal=0.2, group_names=["group-a", "group-b"], seed=seed)


class DataConfig(StrictModel):
    csv_path: Optional[str] = Field(default=None, description="CSV with label/group columns; exclusive with synthetic")
    synthetic: Optional[SyntheticSpec] = None
    label_column: str = "label"
    group_columns: List[str] = Field(default_factory=lambda: ["group"])
    split_fractions: List[float] = Field(default_factory=lambda: [0.8, 0.1, 0.1])

    @model_validator(mode="after")
    def _one_source(self):
        if self.csv_path and self.synthetic is not None:
            raise ValueError("set either data.csv_path or data.synthetic, not both")
        if not self.csv_path and self.synthetic is None:
            self.synthetic = SyntheticSpec.biased_default()
        if len(self.split_fractions) != 3:
            raise ValueError("split_fractions needs train/val/test entries")
        if not self.group_columns:
            raise ValueError("group_columns cannot be empty")
        return self


class ArchitectureConfig(StrictModel):
    kind: Literal["mlp", "conv"] = "mlp"
    hidden: List[int] = Field(default_factory=lambda: [64, 32], description="MLP hidden widths")
    conv_channels: List[int] = Field(default_factory=lambda: [4, 8])
    kernel_size: int = Field(default=3, ge=1)
    input_shape: Optional[List[int]] = Field(default=None, description="C,H,W view of the features for conv nets")

    @field_validator("hidden", "conv_channels")
    @classmethod
    def _positive(cls, v):
        if any(width < 1 for width in v):
            raise ValueError("layer widths must be positive")
        return v


class TrainConfig(StrictModel):
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


class PruneConfig(StrictModel):
    """Pruning method and schedule: keep fraction c, step r, retrain epochs e"""
    method: PruneMethod = "fairgrape"
    target_keep: float = Field(default=0.1, gt=0, lt=1, description="c: fraction of weights kept")
    step_prune_fraction: float = Field(default=0.5, gt=0, lt=1,
                                       description="r: fraction of remaining weights removed per iteration")
    retrain_epochs: int = Field(default=5, ge=0, description="e: epochs of retraining per iteration")
    importance_sample_fraction: float = Field(default=0.2, gt=0, le=1)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    group_source: Literal["true_labels", "pseudo_kmeans"] = "true_labels"
    kmeans_k: int = Field(default=2, ge=1)
    embedding_layer: int = Field(default=0, description="Hidden layer clustered for pseudo-groups: 0 = first, -1 = penultimate")
    kmeans_restarts: int = Field(default=10, ge=1, description="k-means++ restarts; lowest inertia wins")
    target_shares: Literal["current", "original"] = "current"
    group_importance: bool = Field(default=True, description="False pools all groups into one (ablation)")
    iterative: bool = Field(default=True, description="False prunes once with r = 1 - c (ablation)")
    importance_groups: Optional[List[str]] = Field(
        default=None, description="Restrict importance/sensitivity data to these groups"
    )
    grasp_batches: int = Field(default=1, ge=1)
    grasp_epsilon: float = Field(default=1e-4, gt=0)
    workers: int = Field(default=1, ge=1, description="Threads for per-group gradient passes")
    sweep: Optional[List[float]] = Field(default=None, description="Keep fractions to sweep over")

    @field_validator("sweep")
    @classmethod
    def _sweep_range(cls, v):
        if v is not None and any(not 0 < c < 1 for c in v):
            raise ValueError("sweep keep fractions must lie in (0, 1)")
        return v

    @property
    def effective_step(self) -> float:
        return self.step_prune_fraction if self.iterative else 1.0 - self.target_keep


class ExperimentConfig(StrictModel):
    name: str = "experiment"
    data: DataConfig = Field(default_factory=DataConfig)
    model: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    evaluation_partition: Literal["train", "val", "test"] = "test"
    output_dir: str = "runs"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    workers: int = Field(default=1, ge=1, description="Seeds evaluated concurrently")

    @field_validator("seeds")
    @classmethod
    def _seeds_nonempty(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v


# =============== Report Models ===============

class GroupMetrics(BaseModel):
    """Accuracy (percentage points) and error rates for one group or the whole partition"""
    name: str
    n: int = 0
    missing: bool = False
    accuracy: Optional[float] = None
    fnr: Optional[float] = None
    fpr: Optional[float] = None
    confusion: List[List[int]] = Field(default_factory=list, description="Per class [tp, fn, fp, tn]")


class BiasStats(BaseModel):
    deltas: Dict[str, float]
    mean_delta: float
    var_delta: float
    rho_accuracy: float
    rho_delta: float
    reference_rho_accuracy: float
    class_deltas: Dict[str, float] = Field(default_factory=dict)
    class_rho_accuracy: Optional[float] = None
    class_rho_delta: Optional[float] = None


class RateChange(BaseModel):
    group: str
    fnr_change: Optional[float] = None
    fpr_change: Optional[float] = None
    fnr_absolute: bool = False
    fpr_absolute: bool = False


class FairnessReport(BaseModel):
    method: str
    keep_fraction: Optional[float] = None
    seed: Optional[int] = None
    overall: GroupMetrics
    groups: List[GroupMetrics]
    class_accuracy: Dict[str, Optional[float]] = Field(default_factory=dict)
    nonzero_weights: Optional[int] = None
    total_weights: Optional[int] = None
    bias: Optional[BiasStats] = None
    rate_changes: List[RateChange] = Field(default_factory=list)

    def group(self, name: str) -> GroupMetrics:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def present_groups(self) -> List[str]:
        return [g.name for g in self.groups if not g.missing]


# =============== Manifest Models ===============

class ArtifactRef(BaseModel):
    path: str
    sha256: str


class SeedRun(BaseModel):
    seed: int
    success: bool
    exit_code: int = 0
    message: str = ""
    hints: List[str] = Field(default_factory=list)
    checkpoints: Dict[str, ArtifactRef] = Field(default_factory=dict)
    reports: Dict[str, ArtifactRef] = Field(default_factory=dict)
    tables: Dict[str, ArtifactRef] = Field(default_factory=dict)
    wall_clock: Dict[str, float] = Field(default_factory=dict)


class RunManifest(BaseModel):
    config_hash: str
    name: str
    method: str
    keep_fraction: float
    run_dir: str
    groups: List[str] = Field(default_factory=list)
    seeds: List[SeedRun] = Field(default_factory=list)
    aggregate: Optional[ArtifactRef] = None

    def completed(self) -> List[SeedRun]:
        return [s for s in self.seeds if s.success]
