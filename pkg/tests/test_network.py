import numpy as np
import pytest

from fairgrape import tensor as T
from fairgrape.data import synthesize_biased
from fairgrape.errors import DataError, DimensionError, MissingSnapshotError
from fairgrape.models import ArchitectureConfig, SyntheticSpec, TrainConfig
from fairgrape.network import (Adam, adam_step, apply_masks, build_convnet, build_mlp, build_model, cross_entropy,
                               predict, reset_to_snapshot, snapshot_init, train)
from fairgrape.tensor import Tensor


class TestConstruction:
    def test_mlp_shapes_and_full_masks(self):
        model = build_mlp(10, [6, 4], 3, seed=0)
        assert [l.weights.shape for l in model.layers] == [(10, 6), (6, 4), (4, 3)]
        assert model.num_weights == 60 + 24 + 12
        assert model.nonzero_count == model.num_weights
        assert [l.activation for l in model.layers] == ["relu", "relu", "none"]

    def test_same_seed_same_weights(self):
        a, b = build_mlp(5, [4], 2, seed=7), build_mlp(5, [4], 2, seed=7)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.weights.data, lb.weights.data)

    def test_conv_forward_shape(self, rng):
        model = build_convnet((1, 4, 4), [2, 3], 3, 2, seed=0)
        assert model.forward(rng.normal(size=(5, 16))).shape == (5, 2)
        assert model.embed(rng.normal(size=(5, 16))).shape == (5, 3 * 16)

    def test_embed_picks_a_hidden_layer(self, rng):
        model = build_mlp(4, [6, 5], 2, seed=0)
        x = rng.normal(size=(3, 4))
        assert model.embed(x, 0).shape == (3, 6)
        assert model.embed(x).shape == (3, 5)
        np.testing.assert_array_equal(model.embed(x, -1).data, model.embed(x, 1).data)
        with pytest.raises(DimensionError):
            model.embed(x, 2)

    def test_build_model_checks_input_shape(self):
        with pytest.raises(DimensionError):
            build_model(ArchitectureConfig(kind="conv", input_shape=[1, 3, 3]), 10, 2, seed=0)

    def test_batch_dimension_checked(self):
        with pytest.raises(DimensionError):
            build_mlp(4, [3], 2, seed=0).forward(np.zeros((2, 5)))

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))


class TestMasks:
    def test_apply_masks_writes_positive_zero(self):
        model = build_mlp(4, [3], 2, seed=0)
        model.layers[0].weights.data[0, 0] = -0.7
        model.layers[0].mask[0, 0] = 0
        apply_masks(model)
        value = model.layers[0].weights.data[0, 0]
        assert value == 0.0 and not np.signbit(value)

    def test_masked_weights_stay_zero_through_retraining(self, tiny_data):
        model = build_mlp(tiny_data.dim, [8], 2, seed=0)
        for layer in model.layers:
            layer.mask[...] = (np.arange(layer.num_weights) % 2).reshape(layer.weights.shape)
        apply_masks(model)
        train(model, tiny_data.partition("train"), epochs=10, batch_size=16, seed=1,
              config=TrainConfig(lr=0.05))
        for layer in model.layers:
            pruned = layer.weights.data[layer.mask == 0]
            assert np.all(pruned == 0.0) and not np.any(np.signbit(pruned))

    def test_masked_forward_equals_explicitly_zeroed_weights(self, rng):
        masked = build_mlp(6, [5], 3, seed=2)
        zeroed = masked.clone()
        for a, b in zip(masked.layers, zeroed.layers):
            a.mask[...] = rng.integers(0, 2, size=a.mask.shape)
            b.weights.data[a.mask == 0] = 0.0
        # masked weights keep their values; only the mask silences them
        assert np.any(masked.layers[0].weights.data[masked.layers[0].mask == 0] != 0.0)
        x = rng.normal(size=(7, 6))
        np.testing.assert_array_equal(masked.forward(x).data, zeroed.forward(x).data)

    def test_adam_step_with_zero_gradients_keeps_masked_weights_zero(self):
        model = build_mlp(3, [4], 2, seed=0)
        model.layers[0].mask[0, :] = 0
        apply_masks(model)
        state = Adam(lr=0.1)
        adam_step(model, state, [np.full_like(p.data, 2.0) for p in model.parameters()])
        adam_step(model, state, [np.zeros_like(p.data) for p in model.parameters()])
        assert np.all(model.layers[0].weights.data[0, :] == 0.0)
        assert np.any(model.layers[0].weights.data[1:, :] != 0.0)

    def test_mask_shape_must_match(self):
        model = build_mlp(4, [3], 2, seed=0)
        layer = model.layers[0]
        with pytest.raises(DimensionError):
            type(layer)(layer.kind, layer.weights, layer.bias, np.ones((3, 4), dtype=np.uint8), 0)


class TestTraining:
    def test_loss_decreases(self, tiny_data):
        model = build_mlp(tiny_data.dim, [8], 2, seed=0)
        train(model, tiny_data.partition("train"), epochs=15, batch_size=16, seed=0, config=TrainConfig(lr=0.01))
        assert len(model.loss_history) == 15
        assert model.loss_history[-1] < model.loss_history[0]

    def test_zero_epochs_is_a_no_op(self, tiny_data):
        model = build_mlp(tiny_data.dim, [8], 2, seed=0)
        before = model.layers[0].weights.data.copy()
        train(model, tiny_data, epochs=0)
        np.testing.assert_array_equal(model.layers[0].weights.data, before)
        assert model.loss_history == []

    def test_empty_dataset(self, tiny_data):
        with pytest.raises(DataError):
            train(build_mlp(tiny_data.dim, [4], 2, seed=0), tiny_data.subset(np.array([], dtype=int)), epochs=1)

    def test_training_is_deterministic(self, tiny_data):
        a = train(build_mlp(tiny_data.dim, [8], 2, seed=0), tiny_data, epochs=2, seed=5)
        b = train(build_mlp(tiny_data.dim, [8], 2, seed=0), tiny_data, epochs=2, seed=5)
        np.testing.assert_array_equal(a.layers[1].weights.data, b.layers[1].weights.data)

    def test_first_adam_step_moves_by_learning_rate(self):
        model = build_mlp(2, [2], 2, seed=0)
        before = [p.data.copy() for p in model.parameters()]
        grads = [np.full_like(p.data, 3.0) for p in model.parameters()]
        adam_step(model, Adam(lr=0.1), grads)
        for p, b in zip(model.parameters(), before):
            np.testing.assert_allclose(b - p.data, 0.1, rtol=1e-6)

    def test_adam_solves_least_squares(self, rng):
        model = build_mlp(3, [], 1, seed=0)
        x = rng.normal(size=(64, 3))
        y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3 + 0.1 * rng.normal(size=(64, 1))
        design = np.hstack([x, np.ones((64, 1))])
        solution, *_ = np.linalg.lstsq(design, y, rcond=None)
        optimum = float(np.mean((design @ solution - y) ** 2))

        state = Adam(lr=0.05)
        for _ in range(200):
            model.zero_grad()
            loss = T.mean(T.square(T.sub(model.forward(x), Tensor(y))))
            T.backward(loss)
            state.step(model)
        with T.no_grad():
            final = T.mean(T.square(T.sub(model.forward(x), Tensor(y)))).item()
        assert final - optimum < 1e-3

    def test_noise_free_groups_are_learned_exactly(self):
        spec = SyntheticSpec(cell_counts=[[60, 60], [20, 20]], feature_dim=8,
                             exclusive_features=[[0, 1, 2], [3, 4, 5]], noise=0.0, seed=0)
        data = synthesize_biased(spec)
        model = train(build_mlp(data.dim, [8], 2, seed=0), data, epochs=40, batch_size=16, seed=0,
                      config=TrainConfig(lr=0.05))
        predictions = predict(model, data.features)
        for k in range(data.n_groups):
            rows = data.group_rows(k)
            assert np.mean(predictions[rows] == data.labels[rows]) >= 0.99

    def test_predict_returns_class_indices(self, tiny_model, tiny_data):
        predictions = predict(tiny_model, tiny_data.features, batch_size=7)
        assert predictions.shape == (tiny_data.n,)
        assert set(np.unique(predictions)) <= {0, 1}


class TestSnapshots:
    def test_reset_without_snapshot(self):
        with pytest.raises(MissingSnapshotError):
            reset_to_snapshot(build_mlp(3, [2], 2, seed=0))

    def test_reset_restores_initial_values_on_kept_weights(self, tiny_data):
        model = snapshot_init(build_mlp(tiny_data.dim, [8], 2, seed=0))
        initial = model.layers[0].weights.data.copy()
        train(model, tiny_data, epochs=1)
        model.layers[0].mask[0, :] = 0
        reset_to_snapshot(model)
        expected = initial.copy()
        expected[0, :] = 0.0
        np.testing.assert_array_equal(model.layers[0].weights.data, expected)

    def test_clone_is_independent(self, tiny_model):
        twin = tiny_model.clone()
        twin.layers[0].weights.data[...] = 0.0
        twin.layers[0].mask[...] = 0
        assert np.any(tiny_model.layers[0].weights.data != 0.0)
        assert tiny_model.layers[0].mask.all()
