"""Shared fixtures: a tiny biased dataset, a trained tiny MLP and a fast experiment config"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fairgrape.data import split, synthesize_biased  # noqa: E402
from fairgrape.models import (ArchitectureConfig, DataConfig, ExperimentConfig, PruneConfig,  # noqa: E402
                              SyntheticSpec, TrainConfig)
from fairgrape.network import build_mlp, snapshot_init, train  # noqa: E402


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(cell_counts=[[60, 60], [20, 20]], feature_dim=8,
                         exclusive_features=[[0, 1, 2], [3, 4, 5]],
                         group_names=["majority", "minority"], seed=0)


@pytest.fixture
def tiny_data(tiny_spec):
    return split(synthesize_biased(tiny_spec), (0.8, 0.1, 0.1), seed=0)


@pytest.fixture
def tiny_model(tiny_data):
    model = snapshot_init(build_mlp(tiny_data.dim, [8], tiny_data.n_classes, seed=0))
    return train(model, tiny_data.partition("train"), epochs=3, batch_size=32, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fast_config(tmp_path, tiny_spec):
    """Full pipeline in well under a second per seed"""
    return ExperimentConfig(
        name="tiny",
        data=DataConfig(synthetic=tiny_spec),
        model=ArchitectureConfig(hidden=[8]),
        train=TrainConfig(epochs=2, batch_size=32, lr=0.01),
        prune=PruneConfig(method="fairgrape", target_keep=0.25, step_prune_fraction=0.5,
                          retrain_epochs=1, importance_sample_fraction=0.5, batch_size=32),
        output_dir=str(tmp_path / "runs"),
        seeds=[0, 1],
    )
