import numpy as np
import pytest

from fairgrape import benchmarks, harness
from fairgrape.benchmarks import bias_mitigation, desk_config, pseudo_group_recovery, symmetry_control
from fairgrape.data import synthesize_biased
from fairgrape.models import SyntheticSpec


def _mean_direction_accuracy(spec, group):
    """Accuracy of the sign of the projection on the true class-mean difference, per group"""
    data = synthesize_biased(spec)
    rows = data.group_rows(group)
    x, y = data.features[rows, :spec.feature_dim], data.labels[rows]
    direction = x[y == 0].mean(axis=0) - x[y == 1].mean(axis=0)
    midpoint = (x[y == 0].mean(axis=0) + x[y == 1].mean(axis=0)) / 2
    predicted = np.where((x - midpoint) @ direction > 0, 0, 1)
    return float(np.mean(predicted == y))


def test_desk_config_defaults(tmp_path):
    config = desk_config("snip", tmp_path)
    assert config.prune.target_keep == 0.1
    assert config.model.hidden == [64, 32]
    assert sum(map(sum, config.data.synthetic.counts())) == 8000
    assert desk_config("snip", tmp_path, unbiased=True).data.synthetic.exclusive_features == [[], []]


@pytest.mark.parametrize("group", [0, 1])
def test_biased_default_is_not_saturated(group):
    accuracy = _mean_direction_accuracy(SyntheticSpec.biased_default(), group)
    assert 0.8 < accuracy < 0.97


@pytest.mark.parametrize("group", [0, 1])
def test_unbiased_control_is_not_saturated(group):
    accuracy = _mean_direction_accuracy(SyntheticSpec.unbiased_control(), group)
    assert 0.75 < accuracy < 0.92


def test_minority_signal_is_thinner_per_feature():
    spec = SyntheticSpec.biased_default()
    majority, minority = spec.exclusive_features
    assert len(minority) > len(majority)
    assert spec.separations()[1] < spec.separations()[0]
    counts = spec.counts()
    assert sum(counts[0]) == 9 * sum(counts[1])


def test_bias_mitigation_reports_every_method(tmp_path):
    result = bias_mitigation(tmp_path, [0], epochs=1, retrain_epochs=0)
    numbers = result["data"] if result["success"] else result["data"]["error_details"]
    assert set(numbers["median_rho_delta"]) == {"fairgrape", "magnitude", "snip"}


def test_symmetry_control_pairs_seeds(tmp_path):
    result = symmetry_control(tmp_path, [0, 1], epochs=1, retrain_epochs=0)
    numbers = result["data"] if result["success"] else result["data"]["error_details"]
    assert len(numbers["differences"]) == 2


def test_symmetry_control_rejects_all_zero_rho_delta(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, "run", lambda config: config)
    monkeypatch.setattr(benchmarks, "rho_delta_by_seed", lambda manifest: {0: 0.0, 1: 0.0})
    result = symmetry_control(tmp_path, [0, 1])
    assert not result["success"]
    assert "degenerate" in result["message"]
    assert result["data"]["error_details"]["nonzero_rho_delta"] == 0


def test_symmetry_control_passes_on_noisy_equal_methods(tmp_path, monkeypatch):
    values = iter([{0: 0.5, 1: 1.0, 2: 0.0}, {0: 1.0, 1: 0.5, 2: 0.0}])
    monkeypatch.setattr(harness, "run", lambda config: config)
    monkeypatch.setattr(benchmarks, "rho_delta_by_seed", lambda manifest: next(values))
    result = symmetry_control(tmp_path, [0, 1, 2])
    assert result["success"], result
    assert result["data"]["nonzero_rho_delta"] == 4


def test_pseudo_groups_recover_true_groups(tmp_path):
    config = desk_config("fairgrape", tmp_path, [0], group_source="pseudo_kmeans", epochs=1)
    assert pseudo_group_recovery(config, 0) >= 0.6
