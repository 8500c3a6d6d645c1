import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import adjusted_rand_score

from fairgrape.data import (GroupedDataset, kmeans, load_csv, pseudo_groups, save_csv, split, subset_groups,
                            synthesize_biased)
from fairgrape.errors import ConfigError, DataError
from fairgrape.models import SyntheticSpec
from fairgrape.network import build_mlp


class TestSynthetic:
    def test_row_counts_and_onehot_columns(self, tiny_spec):
        data = synthesize_biased(tiny_spec)
        assert data.n == 160
        assert data.dim == 8 + 2
        assert np.bincount(data.groups).tolist() == [120, 40]
        assert data.group_names == ("majority", "minority")
        np.testing.assert_array_equal(data.features[:, 8:], np.eye(2)[data.groups])

    def test_class_signal_only_in_exclusive_features(self):
        spec = SyntheticSpec(n_per_cell=2000, feature_dim=8, exclusive_features=[[0, 1], [2, 3]],
                             common_signal=0.0, append_group_onehot=False, seed=3)
        data = synthesize_biased(spec)
        for k, own, other in ((0, 0, 2), (1, 2, 0)):
            for c, sign in ((0, 1.0), (1, -1.0)):
                cell = data.features[(data.groups == k) & (data.labels == c)]
                assert cell[:, own].mean() == pytest.approx(sign, abs=0.1)
                assert cell[:, other].mean() == pytest.approx(0.0, abs=0.1)

    def test_signature_features_mark_the_group_not_the_class(self):
        spec = SyntheticSpec(n_per_cell=2000, feature_dim=6, exclusive_features=[[0], [1]],
                             signature_features=[2, 3], signature_shift=2.0, common_signal=0.0,
                             append_group_onehot=False, seed=3)
        data = synthesize_biased(spec)
        for k, sign in ((0, 1.0), (1, -1.0)):
            for c in (0, 1):
                cell = data.features[(data.groups == k) & (data.labels == c)]
                assert cell[:, 2].mean() == pytest.approx(2.0 * sign, abs=0.1)
                assert cell[:, 3].mean() == pytest.approx(-2.0 * sign, abs=0.1)

    def test_group_separation_overrides_separation(self):
        spec = SyntheticSpec(n_per_cell=2000, feature_dim=4, exclusive_features=[[0], [1]],
                             group_separation=[2.0, 0.5], common_signal=0.0, append_group_onehot=False, seed=1)
        data = synthesize_biased(spec)
        assert data.features[(data.groups == 0) & (data.labels == 0), 0].mean() == pytest.approx(2.0, abs=0.1)
        assert data.features[(data.groups == 1) & (data.labels == 0), 1].mean() == pytest.approx(0.5, abs=0.1)

    @pytest.mark.parametrize("kwargs", [
        {"signature_features": [0]},
        {"signature_features": [9]},
        {"group_separation": [1.0]},
    ])
    def test_inconsistent_layouts_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticSpec(feature_dim=8, exclusive_features=[[0, 1], [2, 3]], **kwargs)

    def test_overlapping_exclusive_sets_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec(exclusive_features=[[0, 1], [1, 2]])

    def test_seeded(self, tiny_spec):
        assert synthesize_biased(tiny_spec).equals(synthesize_biased(tiny_spec))


class TestSplit:
    def test_stratified_counts(self, tiny_spec):
        data = split(synthesize_biased(tiny_spec), (0.8, 0.1, 0.1), seed=0)
        for k, per_cell in ((0, 60), (1, 20)):
            for c in (0, 1):
                tags = data.split_tags[(data.groups == k) & (data.labels == c)]
                expected = per_cell // 10
                assert (tags == "val").sum() == expected
                assert (tags == "test").sum() == expected
                assert (tags == "train").sum() == per_cell - 2 * expected

    def test_single_row_cell_goes_to_train(self):
        labels = [0] * 20 + [1] * 20 + [0] * 20 + [1]
        groups = [0] * 40 + [1] * 21
        data = split(GroupedDataset(np.zeros((61, 1)), labels, groups, ["a", "b"], ["c0", "c1"]), seed=3)
        assert data.split_tags[60] == "train"

    def test_fractions_must_sum_to_one(self, tiny_spec):
        with pytest.raises(ConfigError):
            split(synthesize_biased(tiny_spec), (0.8, 0.1, 0.2))

    def test_same_seed_same_split(self, tiny_spec):
        data = synthesize_biased(tiny_spec)
        np.testing.assert_array_equal(split(data, seed=4).split_tags, split(data, seed=4).split_tags)

    def test_partition_needs_split(self, tiny_spec):
        with pytest.raises(DataError):
            synthesize_biased(tiny_spec).partition("train")


class TestCsv:
    def test_save_then_load_preserves_everything(self, tiny_data, tmp_path):
        path = save_csv(tiny_data, tmp_path / "tiny.csv")
        loaded = load_csv(path)
        assert loaded.equals(tiny_data)
        assert loaded.feature_names == tiny_data.feature_names

    def test_name_tables_survive_when_first_row_is_not_index_zero(self, tmp_path):
        data = GroupedDataset(np.array([[0.25], [1.5]]), [1, 0], [1, 0], ["g0", "g1"], ["a", "b"])
        loaded = load_csv(save_csv(data, tmp_path / "swapped.csv"))
        assert loaded.class_names == ("a", "b")
        assert loaded.group_names == ("g0", "g1")
        assert loaded.labels.tolist() == [1, 0]
        assert loaded.equals(data)

    def test_subset_group_order_survives(self, tiny_data, tmp_path):
        reordered = subset_groups(tiny_data, ["minority", "majority"])
        loaded = load_csv(save_csv(reordered, tmp_path / "reordered.csv"))
        assert loaded.group_names == ("minority", "majority")
        assert loaded.equals(reordered)

    def test_without_sidecar_names_follow_first_appearance(self, tmp_path):
        path = tmp_path / "plain.csv"
        pd.DataFrame({"label": ["b", "a"], "group": ["g1", "g0"], "x0": [0.5, 1.5]}).to_csv(path, index=False)
        data = load_csv(path)
        assert data.class_names == ("b", "a")
        assert data.group_names == ("g1", "g0")

    def test_sidecar_missing_a_value(self, tiny_data, tmp_path):
        path = save_csv(tiny_data, tmp_path / "tiny.csv")
        sidecar = tmp_path / "tiny.csv.names.json"
        sidecar.write_text(sidecar.read_text().replace('"minority"', '"elsewhere"'))
        with pytest.raises(DataError, match="minority"):
            load_csv(path)

    def test_joint_group_columns(self, tmp_path):
        path = tmp_path / "joint.csv"
        pd.DataFrame({"label": ["a", "b", "a", "b"], "race": ["r1", "r1", "r2", "r2"],
                      "gender": ["f", "m", "f", "f"], "x0": [0.5, 1.5, 2.5, 3.5]}).to_csv(path, index=False)
        data = load_csv(path, group_columns=["race", "gender"])
        assert data.group_names == ("r1|f", "r1|m", "r2|f")
        assert data.groups.tolist() == [0, 1, 2, 2]
        assert data.dim == 1

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        pd.DataFrame({"group": ["g"], "x0": [1.0]}).to_csv(path, index=False)
        with pytest.raises(DataError, match="label"):
            load_csv(path)

    def test_non_numeric_feature(self, tmp_path):
        path = tmp_path / "bad.csv"
        pd.DataFrame({"label": ["a"], "group": ["g"], "x0": ["oops"]}).to_csv(path, index=False)
        with pytest.raises(DataError, match="x0"):
            load_csv(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError):
            load_csv(path)


class TestSubsets:
    def test_subset_groups_reindexes(self, tiny_data):
        minority = subset_groups(tiny_data, ["minority"])
        assert minority.group_names == ("minority",)
        assert minority.n == 40
        assert set(minority.groups.tolist()) == {0}

    def test_unknown_group(self, tiny_data):
        with pytest.raises(DataError):
            subset_groups(tiny_data, ["nobody"])

    def test_empty_group_detected(self):
        data = GroupedDataset(np.zeros((2, 1)), [0, 1], [0, 0], ["a", "b"], ["c0", "c1"])
        with pytest.raises(DataError, match="b"):
            data.check_groups_nonempty()


class TestKMeans:
    def test_separated_blobs_recovered(self, rng):
        blobs = np.vstack([rng.normal(0.0, 0.1, size=(30, 2)), rng.normal(5.0, 0.1, size=(20, 2))])
        truth = np.array([0] * 30 + [1] * 20)
        result = kmeans(blobs, 2, seed=0)
        assert result.converged
        assert adjusted_rand_score(truth, result.labels) == 1.0
        np.testing.assert_array_equal(result.labels, truth)  # largest cluster is labelled 0

    def test_inertia_never_increases(self, rng):
        result = kmeans(rng.normal(size=(200, 3)), 4, seed=1)
        assert all(b <= a + 1e-9 for a, b in zip(result.inertia_trace, result.inertia_trace[1:]))

    def test_deterministic(self, rng):
        points = rng.normal(size=(50, 2))
        np.testing.assert_array_equal(kmeans(points, 3, seed=2).labels, kmeans(points, 3, seed=2).labels)

    def test_one_cluster_per_point_has_zero_inertia(self, rng):
        points = rng.normal(size=(6, 3))
        result = kmeans(points, 6, seed=0)
        assert result.inertia == 0.0
        assert sorted(result.labels.tolist()) == list(range(6))

    def test_restarts_keep_the_lowest_inertia(self, rng):
        points = rng.normal(size=(120, 2))
        # the first restart replays the single run, so restarts can only lower the inertia
        assert kmeans(points, 5, seed=0, n_init=4).inertia <= kmeans(points, 5, seed=0).inertia
        with pytest.raises(DataError):
            kmeans(points, 5, n_init=0)

    def test_small_separated_group_recovered_from_first_hidden_layer(self, rng):
        spec = SyntheticSpec(cell_counts=[[270, 270], [30, 30]], feature_dim=16,
                             exclusive_features=[[0, 1, 2], [3, 4, 5, 6, 7, 8]],
                             signature_features=list(range(9, 15)), signature_shift=2.5, seed=2)
        data = synthesize_biased(spec)
        model = build_mlp(data.dim, [32, 16], 2, seed=0)
        pseudo = pseudo_groups(data, model, k=2, seed=0, layer=0, n_init=10)
        assert adjusted_rand_score(data.groups, pseudo.groups) >= 0.9

    def test_too_many_clusters(self, rng):
        with pytest.raises(DataError):
            kmeans(rng.normal(size=(3, 2)), 4)

    def test_pseudo_groups_keep_true_groups(self, tiny_model, tiny_data):
        train_part = tiny_data.partition("train")
        pseudo = pseudo_groups(train_part, tiny_model, k=2, seed=0)
        assert pseudo.group_names == ("cluster-0", "cluster-1")
        assert pseudo.evaluation_view().group_names == ("majority", "minority")
        np.testing.assert_array_equal(pseudo.evaluation_view().groups, train_part.groups)
