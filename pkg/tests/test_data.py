import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstale import (ConfigError, Dataset, OptConfig, PartitionSpec, StalenessPlan,
                      VariationSpec, apply_variation, dirichlet_partition,
                      init_params, load_csv_dataset, local_update, make_blobs,
                      select_stale_clients)
from fedstale.nn import ModelArch


class TestMakeBlobs:
    def test_same_seed_identical(self):
        a = make_blobs(3, 5, 10, 0.1, seed=42)
        b = make_blobs(3, 5, 10, 0.1, seed=42)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_zero_spread_collapses_to_centers(self):
        ds = make_blobs(4, 3, 7, 0.0, seed=1)
        for c in range(4):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])

    def test_features_in_unit_box(self):
        ds = make_blobs(5, 4, 30, 0.5, seed=9)
        assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0

    def test_separable_blobs_trainable_to_95_percent(self):
        # train-to-convergence oracle: a linear classifier must nail
        # well-separated clusters
        ds = make_blobs(10, 8, 20, 0.05, seed=5)
        arch = ModelArch((8, 10))
        w = init_params(arch, 0)
        opt = OptConfig(kind="sgd", learning_rate=0.5, local_steps=1)
        for _ in range(300):
            w = local_update(w, ds, opt)
        from fedstale import evaluate
        _, overall = evaluate(w, ds)
        assert overall > 0.95


class TestDirichletPartition:
    def test_conservation_and_disjointness(self):
        ds = make_blobs(4, 3, 25, 0.1, seed=2)
        parts = dirichlet_partition(ds, PartitionSpec(6, alpha=0.5, seed=3))
        assert sum(p.n for p in parts) == ds.n
        seen = np.concatenate([p.features for p in parts])
        assert seen.shape[0] == ds.n
        # disjointness: multiset of rows matches the original exactly
        orig = ds.features[np.lexsort(ds.features.T)]
        got = seen[np.lexsort(seen.T)]
        assert np.array_equal(orig, got)

    def test_every_client_nonempty(self):
        ds = make_blobs(3, 3, 40, 0.1, seed=4)
        for seed in range(5):
            parts = dirichlet_partition(ds, PartitionSpec(8, alpha=0.05, seed=seed))
            assert all(p.n >= 1 for p in parts)

    def test_high_alpha_near_uniform(self):
        # alpha=100 -> per-client class histograms close to uniform
        ds = make_blobs(5, 3, 200, 0.1, seed=6)
        parts = dirichlet_partition(ds, PartitionSpec(5, alpha=100.0, seed=7))
        expected = 200 / 5
        for p in parts:
            hist = np.bincount(p.hard_labels(), minlength=5)
            assert np.all(np.abs(hist - expected) / expected < 0.3)

    def test_low_alpha_concentrates(self):
        ds = make_blobs(10, 3, 100, 0.1, seed=8)
        shares = []
        for seed in range(4):
            parts = dirichlet_partition(ds, PartitionSpec(10, alpha=0.01, seed=seed))
            for p in parts:
                hist = np.bincount(p.hard_labels(), minlength=10)
                shares.append(hist.max() / p.n)
        assert np.median(shares) >= 0.8

    def test_requires_hard_labels(self):
        X = np.random.default_rng(0).uniform(0, 1, (4, 2))
        soft = np.full((4, 2), 0.5)
        ds = Dataset(X, soft, 2)
        with pytest.raises(ValueError):
            dirichlet_partition(ds, PartitionSpec(2, alpha=1.0, seed=0))

    @given(st.floats(0.05, 50.0), st.integers(0, 1000))
    @settings(max_examples=15)
    def test_partition_properties(self, alpha, seed):
        ds = make_blobs(3, 2, 30, 0.1, seed=11)
        parts = dirichlet_partition(ds, PartitionSpec(4, alpha=alpha, seed=seed))
        assert sum(p.n for p in parts) == ds.n
        assert all(p.n >= 1 for p in parts)


class TestSelectStaleClients:
    def test_tie_break_lowest_ids(self):
        ds = make_blobs(2, 2, 12, 0.1, seed=0)
        parts = [ds.subset(np.arange(i * 4, i * 4 + 4)) for i in range(3)]
        # all clients hold identical class counts
        plan = StalenessPlan(target_class=0, num_stale_clients=2)
        counts = [int(np.sum(p.hard_labels() == 0)) for p in parts]
        assert len(set(counts)) == 1
        assert select_stale_clients(parts, plan) == [0, 1]

    def test_single_holder_selected(self):
        X = np.random.default_rng(1).uniform(0, 1, (9, 2))
        parts = [
            Dataset(X[:3], np.array([1, 1, 1]), 3),
            Dataset(X[3:6], np.array([2, 2, 2]), 3),
            Dataset(X[6:], np.array([0, 0, 2]), 3),
        ]
        plan = StalenessPlan(target_class=0, num_stale_clients=1)
        assert select_stale_clients(parts, plan) == [2]

    def test_too_many_stale_clients_rejected(self):
        ds = make_blobs(2, 2, 4, 0.1, seed=0)
        parts = [ds.subset([0, 1]), ds.subset([2, 3])]
        with pytest.raises(ConfigError):
            select_stale_clients(parts, StalenessPlan(target_class=0,
                                                      num_stale_clients=3))

    def test_matches_brute_force_ranking(self):
        rng = np.random.default_rng(13)
        for trial in range(10):
            ds = make_blobs(4, 2, 30, 0.1, seed=trial)
            parts = dirichlet_partition(ds, PartitionSpec(6, alpha=0.3, seed=trial))
            plan = StalenessPlan(target_class=1, num_stale_clients=3)
            got = select_stale_clients(parts, plan)
            counts = [(-int(np.sum(p.hard_labels() == 1)), i)
                      for i, p in enumerate(parts)]
            expected = sorted(i for _, i in sorted(counts)[:3])
            assert got == expected


class TestApplyVariation:
    def make_pool(self, seed=21):
        return make_blobs(3, 4, 30, 0.2, seed=seed)

    def test_rate_zero_unchanged(self):
        ds = make_blobs(3, 4, 10, 0.1, seed=20)
        spec = VariationSpec(rate=0.0, pool=self.make_pool(), seed=1)
        out = apply_variation(ds, spec, epoch=5)
        assert out is ds

    def test_rate_two_over_five_epochs_ten_distinct_rows(self):
        ds = make_blobs(3, 4, 10, 0.1, seed=22)  # 30 rows
        spec = VariationSpec(rate=2.0, pool=self.make_pool(), seed=2)
        cur = ds
        for epoch in range(1, 6):
            cur = apply_variation(cur, spec, epoch)
        differing = np.sum(np.any(cur.features != ds.features, axis=1))
        assert differing == 10

    def test_fractional_rate_accumulates(self):
        ds = make_blobs(3, 4, 10, 0.1, seed=23)
        spec = VariationSpec(rate=0.5, pool=self.make_pool(), seed=3)
        cur = ds
        replaced_per_epoch = []
        for epoch in range(1, 5):
            nxt = apply_variation(cur, spec, epoch)
            replaced_per_epoch.append(int(np.sum(np.any(nxt.features != cur.features,
                                                        axis=1))))
            cur = nxt
        assert sum(replaced_per_epoch) == 2  # round(0.5 * 4)

    def test_size_and_label_space_preserved(self):
        ds = make_blobs(3, 4, 12, 0.1, seed=24)
        spec = VariationSpec(rate=3.0, pool=self.make_pool(), seed=4)
        out = apply_variation(ds, spec, epoch=1)
        assert out.n == ds.n and out.dim == ds.dim
        assert out.num_classes == ds.num_classes
        assert out.hard_labels().min() >= 0
        assert out.hard_labels().max() < ds.num_classes


class TestCsvIngestion:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1,label\n0.1,0.9,0\n0.4,0.2,1\n1.5,-0.5,1\n")
        ds = load_csv_dataset(path)
        assert ds.n == 3 and ds.dim == 2 and ds.num_classes == 2
        # out-of-range features are clipped
        assert np.array_equal(ds.features[2], [1.0, 0.0])

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,label\n0,0,0\n")
        with pytest.raises(ValueError):
            load_csv_dataset(path)
