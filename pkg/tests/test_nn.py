import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstale import (ConfigError, Dataset, ModelArch, OptConfig, ParamVector,
                      ShapeError, finite_diff_grad, forward, init_params,
                      load_checkpoint, local_update, loss_and_grad, save_checkpoint)


def one_hot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


class TestTypes:
    def test_param_count(self):
        arch = ModelArch((2, 4, 3))
        assert arch.num_params == 2 * 4 + 4 + 4 * 3 + 3

    def test_arch_needs_two_dims(self):
        with pytest.raises(ShapeError):
            ModelArch((5,))

    def test_arch_rejects_nonpositive(self):
        with pytest.raises(ShapeError):
            ModelArch((4, 0, 2))

    def test_param_vector_length_checked(self):
        arch = ModelArch((2, 3))
        with pytest.raises(ShapeError):
            ParamVector(np.zeros(5), arch)

    def test_param_vector_rejects_nan(self):
        arch = ModelArch((2, 3))
        values = np.zeros(arch.num_params)
        values[0] = np.nan
        with pytest.raises(ValueError):
            ParamVector(values, arch)

    def test_soft_labels_must_sum_to_one(self):
        X = np.zeros((2, 2))
        bad = np.array([[0.5, 0.4], [0.5, 0.5]])
        with pytest.raises(ValueError):
            Dataset(X, bad, 2)

    def test_opt_momentum_only_for_sgdm(self):
        with pytest.raises(ConfigError):
            OptConfig(kind="sgd", momentum=0.5)

    def test_opt_prox_only_for_fedprox(self):
        with pytest.raises(ConfigError):
            OptConfig(kind="sgd", prox_mu=0.1)


class TestForward:
    def test_zero_params_zero_logits(self):
        arch = ModelArch((3, 5, 2))
        params = ParamVector(np.zeros(arch.num_params), arch)
        logits = forward(arch, params, np.random.default_rng(0).uniform(0, 1, (4, 3)))
        assert np.all(logits == 0.0)

    def test_identity_single_layer(self):
        arch = ModelArch((2, 2))
        W = np.eye(2)
        params = ParamVector(np.concatenate([W.ravel(), np.zeros(2)]), arch)
        logits = forward(arch, params, np.array([[1.0, 0.0]]))
        assert np.allclose(logits, [[1.0, 0.0]])

    def test_deterministic(self):
        arch = ModelArch((4, 6, 3), activation="tanh")
        params = init_params(arch, 5)
        X = np.random.default_rng(1).uniform(0, 1, (7, 4))
        a = forward(arch, params, X)
        b = forward(arch, params, X)
        assert np.array_equal(a, b)

    def test_dim_mismatch_raises(self):
        arch = ModelArch((3, 2))
        params = init_params(arch, 0)
        with pytest.raises(ShapeError):
            forward(arch, params, np.zeros((2, 4)))


class TestLossAndGrad:
    def test_uniform_soft_labels_zero_params_ln_c(self):
        arch = ModelArch((2, 4, 5))
        params = ParamVector(np.zeros(arch.num_params), arch)
        X = np.random.default_rng(0).uniform(0, 1, (6, 2))
        Y = np.full((6, 5), 0.2)
        loss, _ = loss_and_grad(arch, params, Dataset(X, Y, 5))
        assert loss == pytest.approx(math.log(5), abs=1e-12)

    def test_one_hot_matching_extreme_logits_loss_zero(self):
        arch = ModelArch((2, 2))
        # logits = x @ W: make class 0 dominate by 1000
        W = np.array([[1000.0, 0.0], [0.0, 0.0]])
        params = ParamVector(np.concatenate([W.ravel(), np.zeros(2)]), arch)
        ds = Dataset(np.array([[1.0, 0.0]]), np.array([0]), 2)
        loss, _ = loss_and_grad(arch, params, ds)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_grad_matches_finite_differences_2_4_3(self):
        arch = ModelArch((2, 4, 3))
        rng = np.random.default_rng(2)
        params = ParamVector(rng.normal(0, 0.1, arch.num_params), arch)
        ds = Dataset(rng.uniform(0, 1, (9, 2)), rng.integers(0, 3, 9), 3)
        _, g = loss_and_grad(arch, params, ds)
        fd = finite_diff_grad(arch, params, ds, step=1e-5)
        rel = np.linalg.norm(g.values - fd.values) / np.linalg.norm(fd.values)
        assert rel < 1e-4

    def test_empty_dataset_rejected(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3)

    def test_loss_invariant_under_row_permutation(self, tiny_arch, tiny_dataset):
        params = init_params(tiny_arch, 3)
        loss_a, grad_a = loss_and_grad(tiny_arch, params, tiny_dataset)
        perm = np.random.default_rng(4).permutation(tiny_dataset.n)
        shuffled = tiny_dataset.subset(perm)
        loss_b, grad_b = loss_and_grad(tiny_arch, params, shuffled)
        assert loss_a == pytest.approx(loss_b, rel=1e-12)
        assert np.allclose(grad_a.values, grad_b.values, atol=1e-12)

    @given(st.integers(0, 10_000), st.sampled_from(["relu", "tanh"]),
           st.lists(st.integers(2, 8), min_size=0, max_size=2))
    @settings(max_examples=20)
    def test_gradcheck_property(self, seed, activation, hidden):
        rng = np.random.default_rng(seed)
        dims = (3, *hidden, 4)
        arch = ModelArch(dims, activation)
        params = ParamVector(rng.normal(0, 0.1, arch.num_params), arch)
        ds = Dataset(rng.uniform(0, 1, (8, 3)), rng.integers(0, 4, 8), 4)
        _, g = loss_and_grad(arch, params, ds)
        fd = finite_diff_grad(arch, params, ds, step=1e-5)
        rel = np.linalg.norm(g.values - fd.values) / max(np.linalg.norm(fd.values), 1e-12)
        assert rel < 1e-4


class TestFiniteDiff:
    def test_linear_model_closed_form(self):
        # no hidden layer: grad of softmax-CE is x^T (p - y) / n exactly
        arch = ModelArch((3, 2))
        rng = np.random.default_rng(5)
        params = ParamVector(rng.normal(0, 0.2, arch.num_params), arch)
        X = rng.uniform(0, 1, (10, 3))
        y = rng.integers(0, 2, 10)
        ds = Dataset(X, y, 2)

        logits = forward(arch, params, X)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        resid = (p - one_hot(y, 2)) / 10
        closed = np.concatenate([(X.T @ resid).ravel(), resid.sum(axis=0)])

        fd = finite_diff_grad(arch, params, ds, step=1e-6)
        assert np.allclose(fd.values, closed, atol=1e-7)
        _, g = loss_and_grad(arch, params, ds)
        assert np.allclose(g.values, closed, atol=1e-12)

    def test_step_sign_symmetry(self, tiny_arch, tiny_dataset):
        params = init_params(tiny_arch, 1)
        a = finite_diff_grad(tiny_arch, params, tiny_dataset, step=1e-5)
        b = finite_diff_grad(tiny_arch, params, tiny_dataset, step=-1e-5)
        assert np.array_equal(a.values, b.values)


class TestLocalUpdate:
    def test_fixed_point_at_zero_gradient(self):
        # symmetric two-class problem: gradient vanishes at zero params
        arch = ModelArch((2, 2))
        params = ParamVector(np.zeros(arch.num_params), arch)
        X = np.array([[0.3, 0.7], [0.3, 0.7]])
        ds = Dataset(X, np.array([0, 1]), 2)
        out = local_update(params, ds, OptConfig(kind="sgd", local_steps=3))
        assert np.allclose(out.values, params.values, atol=1e-15)

    def test_single_sgd_step_arithmetic(self):
        # L = w^2/2 surrogate via linear model: loss grad at w for one input
        # class pair is p - y; engineered so one step moves by lr * grad
        arch = ModelArch((1, 2))
        params = ParamVector(np.array([1.0, -1.0, 0.0, 0.0]), arch)
        ds = Dataset(np.array([[1.0]]), np.array([0]), 2)
        opt = OptConfig(kind="sgd", learning_rate=0.1, local_steps=1)
        _, g = loss_and_grad(arch, params, ds)
        out = local_update(params, ds, opt)
        assert np.allclose(out.values, params.values - 0.1 * g.values, atol=1e-15)

    def test_fedprox_needs_global_ref(self, tiny_arch, tiny_dataset):
        params = init_params(tiny_arch, 0)
        with pytest.raises(ConfigError):
            local_update(params, tiny_dataset,
                         OptConfig(kind="fedprox", prox_mu=0.1))

    def test_global_ref_rejected_for_sgd(self, tiny_arch, tiny_dataset):
        params = init_params(tiny_arch, 0)
        with pytest.raises(ConfigError):
            local_update(params, tiny_dataset, OptConfig(kind="sgd"),
                         global_ref=params)

    def test_fedprox_gradient_vs_finite_differences(self, tiny_arch, tiny_dataset):
        # fedprox step must equal sgd step on the augmented loss
        # L + mu/2 * ||w - ref||^2, whose gradient is grad + mu (w - ref)
        rng = np.random.default_rng(8)
        params = ParamVector(rng.normal(0, 0.1, tiny_arch.num_params), tiny_arch)
        ref = ParamVector(rng.normal(0, 0.1, tiny_arch.num_params), tiny_arch)
        mu, lr = 0.7, 0.05
        opt = OptConfig(kind="fedprox", prox_mu=mu, learning_rate=lr, local_steps=1)
        out = local_update(params, tiny_dataset, opt, global_ref=ref)
        fd = finite_diff_grad(tiny_arch, params, tiny_dataset, step=1e-6)
        augmented = fd.values + mu * (params.values - ref.values)
        step = (params.values - out.values) / lr
        assert np.allclose(step, augmented, rtol=1e-4, atol=1e-8)

    def test_k_steps_equal_k_single_steps_with_carried_state(self, blob_world):
        data, arch, w0 = blob_world
        opt5 = OptConfig(kind="sgd_momentum", momentum=0.5, local_steps=5)
        opt1 = OptConfig(kind="sgd_momentum", momentum=0.5, local_steps=1)
        full = local_update(w0, data, opt5)
        w, v = w0, None
        for _ in range(5):
            w, v = local_update(w, data, opt1, velocity=v, return_velocity=True)
        assert np.allclose(full.values, w.values, atol=1e-14)

    def test_minibatch_reproducible(self, blob_world):
        data, arch, w0 = blob_world
        opt = OptConfig(kind="sgd", local_steps=4, batch_size=16)
        a = local_update(w0, data, opt, seed=11)
        b = local_update(w0, data, opt, seed=11)
        c = local_update(w0, data, opt, seed=12)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    @given(st.integers(0, 5000))
    @settings(max_examples=15)
    def test_outputs_finite_for_sane_learning_rates(self, seed):
        rng = np.random.default_rng(seed)
        arch = ModelArch((3, 6, 3))
        params = ParamVector(rng.normal(0, 0.1, arch.num_params), arch)
        ds = Dataset(rng.uniform(0, 1, (10, 3)), rng.integers(0, 3, 10), 3)
        lr = float(rng.uniform(1e-4, 0.5))
        out = local_update(params, ds, OptConfig(kind="sgd", learning_rate=lr,
                                                 local_steps=5))
        assert np.all(np.isfinite(out.values))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, blob_world):
        _, arch, w0 = blob_world
        p1 = tmp_path / "a.sflw"
        p2 = tmp_path / "b.sflw"
        save_checkpoint(p1, w0)
        loaded = load_checkpoint(p1)
        assert loaded.arch.layer_dims == arch.layer_dims
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_f32_precision_on_disk(self, tmp_path):
        arch = ModelArch((2, 2))
        v = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], dtype=np.float64)
        save_checkpoint(tmp_path / "c.sflw", ParamVector(v, arch))
        loaded = load_checkpoint(tmp_path / "c.sflw")
        assert np.array_equal(loaded.values, v.astype(np.float32).astype(np.float64))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path, blob_world):
        _, _, w0 = blob_world
        path = tmp_path / "t.sflw"
        save_checkpoint(path, w0)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
