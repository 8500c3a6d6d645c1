import math

import numpy as np
import pandas as pd
import pytest

from fairgrape.errors import ConfigError, ContractError, MissingSnapshotError
from fairgrape.importance import ImportanceTable
from fairgrape.data import split, synthesize_biased
from fairgrape.models import PruneConfig, SyntheticSpec, TrainConfig
from fairgrape.network import build_mlp, loss_and_gradients, predict, snapshot_init, train
from fairgrape.pruners import (allocate_keep_counts, compute_iterations, fairgrape_prune, fairgrape_select_layer,
                               grasp_prune, hessian_gradient_product, lottery_prune, magnitude_prune, prune,
                               snip_prune, snip_scores, top_k_mask)


def _config(**kwargs):
    defaults = dict(target_keep=0.1, step_prune_fraction=0.5, retrain_epochs=0,
                    importance_sample_fraction=0.5, batch_size=32)
    defaults.update(kwargs)
    return PruneConfig(**defaults)


def _table(scores, mask=None):
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape[1], dtype=np.uint8) if mask is None else np.asarray(mask, dtype=np.uint8)
    return ImportanceTable(0, scores * mask, mask).with_current_target()


def replay_selection(scores, mask, keep, target):
    """Step-by-step greedy replay written with plain lists"""
    groups, weights = len(scores), len(scores[0])
    chosen, steps = set(), []
    selected_totals = [0.0] * groups
    current = [1.0 / groups] * groups
    for _ in range(keep):
        deltas = [(current[k] - target[k]) / target[k] for k in range(groups)]
        group = min(range(groups), key=lambda k: (deltas[k], k))
        options = [w for w in range(weights) if mask[w] and w not in chosen]
        weight = max(options, key=lambda w: (scores[group][w], -w))
        chosen.add(weight)
        steps.append((group, weight))
        for k in range(groups):
            selected_totals[k] += scores[k][weight]
        total = sum(selected_totals)
        if total > 0:
            current = [t / total for t in selected_totals]
    return [1 if w in chosen else 0 for w in range(weights)], steps


class TestSchedule:
    @pytest.mark.parametrize("r,c,expected", [(0.1, 0.1, 22), (0.9, 0.1, 1), (0.5, 0.1, 4), (0.5, 0.25, 2)])
    def test_iteration_counts(self, r, c, expected):
        assert compute_iterations(r, c) == expected

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            compute_iterations(1.0, 0.1)

    @pytest.mark.parametrize("c", [0.5, 0.1, 0.01])
    def test_allocation_is_exact(self, c):
        sizes = [784 * 3, 300, 100, 10]
        counts = allocate_keep_counts(sizes, c)
        assert sum(counts) == round(c * sum(sizes))
        for n, kept in zip(sizes, counts):
            assert abs(kept - c * n) <= 1
            assert kept >= 1


class TestFairGrapeSelection:
    def test_one_top_weight_per_group(self):
        mask, steps = fairgrape_select_layer(_table([[10, 1, 1], [1, 1, 10]]), 2)
        assert mask.tolist() == [1, 0, 1]
        assert [(s.group, s.weight_index) for s in steps] == [(0, 0), (1, 2)]
        assert steps[0].deltas == (0.0, 0.0)

    def test_single_group_is_top_k(self, rng):
        scores = rng.uniform(size=(1, 12))
        mask, _ = fairgrape_select_layer(_table(scores), 5)
        np.testing.assert_array_equal(np.flatnonzero(mask), np.sort(np.argsort(-scores[0])[:5]))

    def test_matches_step_replay(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            groups, weights = int(rng.integers(2, 4)), int(rng.integers(4, 17))
            mask = (rng.uniform(size=weights) < 0.8).astype(np.uint8)
            mask[0] = 1
            table = _table(rng.uniform(size=(groups, weights)), mask)
            keep = int(rng.integers(1, mask.sum() + 1))
            got_mask, got_steps = fairgrape_select_layer(table, keep)
            want_mask, want_steps = replay_selection(table.scores.tolist(), mask.tolist(), keep,
                                                     table.target_shares.tolist())
            assert got_mask.tolist() == want_mask, seed
            assert [(s.group, s.weight_index) for s in got_steps] == want_steps, seed

    def test_scale_invariance(self):
        for seed in range(20):
            scores = np.random.default_rng(seed).uniform(size=(3, 16))
            base_mask, base_steps = fairgrape_select_layer(_table(scores), 9)
            for factor in (1e-6, 1.0, 1e6):
                mask, steps = fairgrape_select_layer(_table(scores * factor), 9)
                np.testing.assert_array_equal(mask, base_mask)
                assert [(s.group, s.weight_index) for s in steps] == \
                       [(s.group, s.weight_index) for s in base_steps]

    def test_never_selects_pruned_entries(self, rng):
        mask = np.array([1, 0, 1, 0, 1, 1], dtype=np.uint8)
        selected, _ = fairgrape_select_layer(_table(rng.uniform(size=(2, 6)), mask), 4)
        assert selected.tolist() == mask.tolist()

    def test_cannot_keep_more_than_available(self, rng):
        with pytest.raises(ContractError):
            fairgrape_select_layer(_table(rng.uniform(size=(2, 3)), [1, 0, 1]), 3)


class TestTopK:
    def test_keeps_largest_magnitudes(self):
        weights = np.array([3.0, -4.0, 1.0, 2.0])
        assert top_k_mask(np.abs(weights), np.ones(4), 2).tolist() == [1, 1, 0, 0]

    def test_ties_keep_lowest_indices(self):
        assert top_k_mask(np.ones(5), np.ones(5), 3).tolist() == [1, 1, 1, 0, 0]

    def test_keep_all_is_a_no_op(self):
        mask = np.array([1, 0, 1, 1])
        assert top_k_mask(np.array([0.1, 0.2, 0.3, 0.4]), mask, 3).tolist() == mask.tolist()

    def test_secondary_breaks_zero_score_ties(self):
        kept = top_k_mask(np.zeros(4), np.ones(4), 2, secondary=np.array([0.1, 0.9, 0.5, 0.2]))
        assert kept.tolist() == [0, 1, 1, 0]


class TestHessianGradientProduct:
    def test_quadratic_loss(self, rng):
        a = rng.normal(size=(6, 6))
        a = a @ a.T + np.eye(6)
        theta = rng.normal(size=6)
        g = a @ theta
        hg = hessian_gradient_product(lambda t: a @ t, theta, g)
        assert np.linalg.norm(hg - a @ g) / np.linalg.norm(a @ g) < 1e-3

    def test_zero_gradient(self):
        np.testing.assert_array_equal(
            hessian_gradient_product(lambda t: t, np.ones(3), np.zeros(3)), np.zeros(3))


class TestMethods:
    def test_magnitude_schedule_counts(self, tiny_model, tiny_data):
        result = magnitude_prune(tiny_model, _config(), tiny_data.partition("train"))
        assert [r.kept_per_layer for r in result.iterations] == [[40, 8], [20, 4], [10, 2], [8, 2]]
        assert tiny_model.nonzero_count == tiny_model.num_weights  # input untouched

    def test_magnitude_keeps_largest_per_layer(self, tiny_model):
        pruned = magnitude_prune(tiny_model, _config(iterative=False)).model
        for before, after in zip(tiny_model.layers, pruned.layers):
            kept = np.abs(before.weights.data[after.mask == 1])
            dropped = np.abs(before.weights.data[after.mask == 0])
            assert kept.min() >= dropped.max()

    @pytest.mark.parametrize("method", ["fairgrape", "magnitude", "snip", "grasp", "lottery"])
    @pytest.mark.parametrize("keep", [0.5, 0.1, 0.01])
    def test_sparsity_is_exact(self, method, keep, tiny_model, tiny_data):
        config = _config(method=method, target_keep=keep, retrain_epochs=1)
        model = prune(tiny_model, tiny_data.partition("train"), config).model
        m = model.num_weights
        assert abs(model.nonzero_count / m - keep) <= 1 / m
        assert model.nonzero_count == round(keep * m)
        if method in ("fairgrape", "magnitude", "lottery"):
            for layer in model.layers:
                assert abs(layer.nonzero_count - keep * layer.num_weights) <= 1
        for layer in model.layers:
            assert np.all(layer.weights.data[layer.mask == 0] == 0.0)

    def test_one_shot_ablation_runs_one_iteration(self, tiny_model, tiny_data):
        result = fairgrape_prune(tiny_model, tiny_data.partition("train"), _config(iterative=False))
        assert len(result.iterations) == 1
        assert len(result.traces) == 1

    def test_fairgrape_traces_record_every_kept_weight(self, tiny_model, tiny_data, tmp_path):
        result = fairgrape_prune(tiny_model, tiny_data.partition("train"), _config())
        last = result.traces[-1]
        assert {layer_id: len(steps) for layer_id, steps in last.layers.items()} == {0: 8, 1: 2}
        frame = pd.read_csv(result.export_traces(tmp_path / "trace.csv"))
        assert list(frame.columns) == ["iteration", "layer_id", "step", "group", "weight_index"]
        assert sorted(frame.iteration.unique()) == [0, 1, 2, 3]

    def test_pooled_groups_ablation(self, tiny_model, tiny_data):
        result = fairgrape_prune(tiny_model, tiny_data.partition("train"), _config(group_importance=False))
        groups = {s.group for trace in result.traces for steps in trace.layers.values() for s in steps}
        assert groups == {0}

    def test_minority_only_importance(self, tiny_model, tiny_data):
        config = _config(importance_groups=["minority"], retrain_epochs=1)
        result = fairgrape_prune(tiny_model, tiny_data.partition("train"), config)
        assert result.model.nonzero_count == 10

    def test_original_target_policy(self, tiny_model, tiny_data):
        config = _config(target_shares="original")
        assert fairgrape_prune(tiny_model, tiny_data.partition("train"), config).model.nonzero_count == 10

    def test_degenerate_layers_fall_back_to_magnitude(self, tiny_data):
        model = build_mlp(tiny_data.dim, [8], 2, seed=0)
        model.layers[1].weights.data[...] = 0.0
        result = fairgrape_prune(model, tiny_data, _config(iterative=False))
        assert result.iterations[0].fallback_layers == [0, 1]
        assert result.model.nonzero_count == 10

    def test_deterministic(self, tiny_model, tiny_data):
        a = fairgrape_prune(tiny_model, tiny_data.partition("train"), _config(retrain_epochs=1)).model
        b = fairgrape_prune(tiny_model, tiny_data.partition("train"), _config(retrain_epochs=1)).model
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.weights.data, lb.weights.data)

    def test_unknown_method(self, tiny_model, tiny_data):
        with pytest.raises(ConfigError):
            prune(tiny_model, tiny_data, _config().model_copy(update={"method": "random"}))


class TestSnip:
    def test_duplicated_batch_gives_same_mask(self, tiny_model, tiny_data):
        x, y = tiny_data.features[:32], tiny_data.labels[:32]
        once = snip_scores(tiny_model, x, y)
        twice = snip_scores(tiny_model, np.vstack([x, x]), np.concatenate([y, y]))
        for a, b in zip(once, twice):
            np.testing.assert_array_equal(top_k_mask(a, np.ones(a.size), 7), top_k_mask(b, np.ones(b.size), 7))

    def test_mask_matches_sorted_sensitivities(self, tiny_model, tiny_data):
        config = _config(method="snip", target_keep=0.25, batch_size=10_000)
        pruned = snip_prune(tiny_model, tiny_data, config).model
        _, grads, _ = loss_and_gradients(tiny_model, tiny_data.features, tiny_data.labels)
        flat = np.concatenate([np.abs(g * l.weights.data).reshape(-1) for g, l in zip(grads, tiny_model.layers)])
        order = sorted(range(flat.size), key=lambda i: (-flat[i], i))[:round(0.25 * flat.size)]
        expected = np.zeros(flat.size, dtype=np.uint8)
        expected[order] = 1
        got = np.concatenate([l.mask.reshape(-1) for l in pruned.layers])
        np.testing.assert_array_equal(got, expected)


class TestGrasp:
    def test_scores_use_hessian_gradient_direction(self, tiny_model, tiny_data):
        config = _config(method="grasp", target_keep=0.5, batch_size=64)
        result = grasp_prune(tiny_model, tiny_data, config)
        assert result.model.nonzero_count == round(0.5 * tiny_model.num_weights)
        assert len(result.iterations) == 1

    def test_mask_matches_two_pass_finite_difference_oracle(self, tiny_model, tiny_data):
        config = _config(method="grasp", target_keep=0.3, batch_size=10_000)
        pruned = grasp_prune(tiny_model, tiny_data, config).model

        def flat_gradient(weights):
            shifted = tiny_model.clone()
            offset = 0
            for layer in shifted.layers:
                layer.weights.data[...] = weights[offset:offset + layer.num_weights].reshape(layer.weights.shape)
                offset += layer.num_weights
            _, grads, _ = loss_and_gradients(shifted, tiny_data.features, tiny_data.labels)
            return np.concatenate([g.reshape(-1) for g in grads])

        theta = np.concatenate([l.weights.data.reshape(-1) for l in tiny_model.layers])
        g = flat_gradient(theta)
        norm = np.linalg.norm(g)
        eps = config.grasp_epsilon * max(1.0, float(np.linalg.norm(theta)))
        hg = norm * (flat_gradient(theta + eps * (g / norm)) - g) / eps
        scores = -theta * hg
        keep = sum(allocate_keep_counts(tiny_model.layer_sizes(), 0.3))
        order = sorted(range(theta.size), key=lambda i: (-scores[i], -abs(theta[i]), i))[:keep]
        expected = np.zeros(theta.size, dtype=np.uint8)
        expected[order] = 1
        np.testing.assert_array_equal(np.concatenate([l.mask.reshape(-1) for l in pruned.layers]), expected)


class TestLottery:
    def test_requires_snapshot(self, tiny_data):
        with pytest.raises(MissingSnapshotError):
            lottery_prune(build_mlp(tiny_data.dim, [4], 2, seed=0), tiny_data, _config())

    def test_survivors_rewound_to_initial_weights(self, tiny_model, tiny_data):
        pruned = lottery_prune(tiny_model, tiny_data, _config(method="lottery")).model
        for layer, (initial, _) in zip(pruned.layers, tiny_model.initial_snapshot):
            np.testing.assert_array_equal(layer.weights.data, np.where(layer.mask == 1, initial, 0.0))

    def test_single_iteration_is_magnitude_then_reset(self, tiny_model, tiny_data):
        config = _config(method="lottery", iterative=False)
        lottery = lottery_prune(tiny_model, tiny_data, config).model
        magnitude = magnitude_prune(tiny_model, config).model
        for a, b in zip(lottery.layers, magnitude.layers):
            np.testing.assert_array_equal(a.mask, b.mask)


@pytest.fixture(scope="module")
def easy_reference():
    spec = SyntheticSpec(cell_counts=[[150, 150], [50, 50]], feature_dim=8,
                         exclusive_features=[[0, 1, 2], [3, 4, 5]], separation=3.0, noise=0.5, seed=0)
    data = split(synthesize_biased(spec), seed=0)
    train_config = TrainConfig(epochs=30, batch_size=32, lr=0.01)
    model = snapshot_init(build_mlp(data.dim, [8], 2, seed=0))
    train(model, data.partition("train"), train_config.epochs, train_config.batch_size, 0, train_config)
    return data, model, train_config


def _accuracy(model, data):
    return 100.0 * float(np.mean(predict(model, data.features) == data.labels))


class TestNearlyDense:
    @pytest.mark.parametrize("method", ["fairgrape", "magnitude", "snip", "grasp", "lottery"])
    def test_keeping_almost_everything_keeps_accuracy(self, easy_reference, method):
        data, reference, train_config = easy_reference
        config = _config(method=method, target_keep=0.99, retrain_epochs=30, batch_size=64)
        result = prune(reference, data.partition("train"), config, data.partition("train"), train_config)
        assert result.model.nonzero_count < reference.num_weights
        assert abs(_accuracy(result.model, data) - _accuracy(reference, data)) <= 0.5
