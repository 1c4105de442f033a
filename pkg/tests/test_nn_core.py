import math

import numpy as np
import pytest

from fedsim import (
    Batch,
    ConfigError,
    ModelSpec,
    backward,
    flatten,
    forward,
    init_params,
    local_train,
    loss_and_grad,
    mlp_spec,
    unflatten,
)
from fedsim.nn_core import Conv2d, Dense, Dropout, Flatten, MaxPool2d, ParamVector, Relu

from oracles import fd_gradient


def rand_batch(rng, spec, n=6):
    shape = spec.input_shape
    if len(shape) == 3 and shape[0] == 1:
        shape = shape[1:]  # exercise the [B,H,W] grayscale path
    x = rng.random((n, *shape))
    y = rng.integers(0, spec.num_classes, size=n)
    return Batch(x, y)


SMALL_SPECS = [
    mlp_spec((4, 4), hidden=(5,), num_classes=3, dropout=0.0),
    mlp_spec((3, 5), hidden=(6, 4), num_classes=4, dropout=0.0),
    ModelSpec((1, 6, 6), (Conv2d(1, 2, 3), Relu(), Flatten(), Dense(2 * 16, 3)), 3),
    ModelSpec(
        (1, 6, 6),
        (Conv2d(1, 2, 3), Relu(), MaxPool2d(2), Flatten(), Dense(2 * 4, 3)),
        3,
    ),
    ModelSpec(
        (2, 5, 5),
        (Conv2d(2, 3, 2), Relu(), Conv2d(3, 2, 2), Relu(), Flatten(), Dense(2 * 9, 2)),
        2,
    ),
]


def min_relu_preact(params, spec, batch):
    """Smallest |pre-activation| feeding any ReLU; tiny values sit on a kink."""
    from fedsim.nn_core import _bind_layers, _check_batch, _layer_forward

    x, _ = _check_batch(spec, batch)
    out = np.inf
    for layer in _bind_layers(params, spec):
        if isinstance(layer, Relu):
            out = min(out, float(np.abs(x).min()))
        x, _ = _layer_forward(layer, x, False, None)
    return out


class TestGradients:
    def test_fd_oracle_20_random_pairs(self):
        """Analytic gradients match central finite differences, rel err < 1e-4."""
        rng = np.random.default_rng(42)
        checked = 0
        while checked < 20:
            spec = SMALL_SPECS[checked % len(SMALL_SPECS)]
            params = init_params(spec, rng)
            # jitter biases away from 0 and reject draws that land a ReLU
            # input on its kink, where central differences are meaningless
            params.values += rng.normal(0.0, 0.05, params.values.size)
            batch = rand_batch(rng, spec)
            if min_relu_preact(params, spec, batch) < 1e-3:
                continue
            g = backward(params, spec, batch, train_mode=False)
            g_fd = fd_gradient(params, spec, batch)
            rel = np.linalg.norm(g.values - g_fd) / max(np.linalg.norm(g_fd), 1e-12)
            assert rel < 1e-4, f"spec {checked % len(SMALL_SPECS)}: rel err {rel}"
            checked += 1

    def test_fd_with_dropout_mask_fixed(self):
        # recreating the rng before every forward pins the dropout mask, so
        # finite differences see the same perturbed objective as backward
        spec = mlp_spec((3, 3), hidden=(6,), num_classes=3, dropout=0.4)
        rng = np.random.default_rng(5)
        params = init_params(spec, rng)
        batch = rand_batch(rng, spec, n=4)
        g = backward(params, spec, batch, train_mode=True, rng=np.random.default_rng(99))
        g_fd = fd_gradient(
            params, spec, batch, train_mode=True, rng_factory=lambda: np.random.default_rng(99)
        )
        rel = np.linalg.norm(g.values - g_fd) / np.linalg.norm(g_fd)
        assert rel < 1e-4

    def test_hand_computed_loss(self):
        # one linear layer on two 2-feature samples, done by hand:
        # z1 = [1.1, -1.1], y=0 -> log(1 + e^-2.2); z2 = [0.6, 1.9], y=1 -> log(1 + e^-1.3)
        spec = ModelSpec((1, 2), (Flatten(), Dense(2, 2)), 2)
        w = np.array([[1.0, -1.0], [0.5, 2.0]])
        b = np.array([0.1, -0.1])
        params = flatten([w, b], spec.shape_spec())
        batch = Batch(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), np.array([0, 1]))
        loss, logits = forward(params, spec, batch)
        expected = 0.5 * (math.log1p(math.exp(-2.2)) + math.log1p(math.exp(-1.3)))
        assert abs(loss - expected) < 1e-12
        np.testing.assert_allclose(logits, [[1.1, -1.1], [0.6, 1.9]], atol=1e-12)

    def test_zero_input_kills_first_layer_weight_grads(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3, dropout=0.0)
        params = init_params(spec, np.random.default_rng(1))
        batch = Batch(np.zeros((4, 4, 4)), np.array([0, 1, 2, 0]))
        g = backward(params, spec, batch)
        w1_grad = unflatten(g)[0]
        assert np.all(w1_grad == 0.0)

    def test_gradient_zero_at_minimum(self):
        # same input with both labels equally often: the uniform predictor at
        # w=0 is the optimum of this convex problem, so the gradient vanishes
        spec = ModelSpec((1, 2), (Flatten(), Dense(2, 2)), 2)
        params = ParamVector(np.zeros(6), spec.shape_spec())
        batch = Batch(np.array([[[0.3, 0.7]], [[0.3, 0.7]]]), np.array([0, 1]))
        g = backward(params, spec, batch)
        assert np.linalg.norm(g.values) < 1e-8


class TestForward:
    def test_eval_mode_deterministic(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3)  # has dropout
        rng = np.random.default_rng(3)
        params = init_params(spec, rng)
        batch = rand_batch(rng, spec)
        l1, z1 = forward(params, spec, batch, train_mode=False)
        l2, z2 = forward(params, spec, batch, train_mode=False)
        assert l1 == l2
        assert np.array_equal(z1, z2)

    def test_train_mode_same_seed_same_result(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3, dropout=0.3)
        rng = np.random.default_rng(3)
        params = init_params(spec, rng)
        batch = rand_batch(rng, spec)
        l1, _ = forward(params, spec, batch, train_mode=True, rng=np.random.default_rng(8))
        l2, _ = forward(params, spec, batch, train_mode=True, rng=np.random.default_rng(8))
        l3, _ = forward(params, spec, batch, train_mode=True, rng=np.random.default_rng(9))
        assert l1 == l2
        assert l1 != l3  # a different mask almost surely moves the loss

    def test_batch_shape_mismatch(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            forward(params, spec, Batch(np.zeros((2, 5, 5)), np.array([0, 1])))

    def test_label_out_of_range(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            forward(params, spec, Batch(np.zeros((1, 4, 4)), np.array([3])))


class TestModelSpec:
    def test_dense_dim_mismatch(self):
        with pytest.raises(ConfigError):
            ModelSpec((4, 4), (Flatten(), Dense(10, 3)), 3)

    def test_head_must_match_classes(self):
        with pytest.raises(ConfigError):
            ModelSpec((4, 4), (Flatten(), Dense(16, 5)), 3)

    def test_pool_must_divide(self):
        with pytest.raises(ConfigError):
            ModelSpec((1, 5, 5), (MaxPool2d(2), Flatten(), Dense(4, 2)), 2)

    def test_conv_needs_channels(self):
        with pytest.raises(ConfigError):
            ModelSpec((4, 4), (Conv2d(1, 2, 3), Flatten(), Dense(8, 2)), 2)

    def test_bad_dropout_rate(self):
        with pytest.raises(ConfigError):
            ModelSpec((2, 2), (Flatten(), Dropout(1.0), Dense(4, 2)), 2)

    def test_num_classes_floor(self):
        with pytest.raises(ConfigError):
            ModelSpec((2, 2), (Flatten(), Dense(4, 1)), 1)


class TestParamVector:
    def test_flatten_unflatten_roundtrip_bitexact(self):
        spec = SMALL_SPECS[4]
        params = init_params(spec, np.random.default_rng(11))
        rebuilt = flatten(unflatten(params), params.shape_spec)
        assert np.array_equal(rebuilt.values, params.values)

    def test_unflatten_shapes(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3, dropout=0.0)
        params = init_params(spec, np.random.default_rng(0))
        shapes = [t.shape for t in unflatten(params)]
        assert shapes == [(16, 5), (5,), (5, 3), (3,)]

    def test_wrong_length_rejected(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3, dropout=0.0)
        with pytest.raises(ConfigError):
            ParamVector(np.zeros(7), spec.shape_spec())

    def test_init_deterministic_and_biases_zero(self):
        spec = mlp_spec((4, 4), hidden=(5,), num_classes=3, dropout=0.0)
        p1 = init_params(spec, np.random.default_rng(21))
        p2 = init_params(spec, np.random.default_rng(21))
        assert np.array_equal(p1.values, p2.values)
        tensors = unflatten(p1)
        assert np.all(tensors[1] == 0.0) and np.all(tensors[3] == 0.0)


class TestLocalTrain:
    def setup_method(self):
        self.spec = mlp_spec((4, 4), hidden=(6,), num_classes=3, dropout=0.0)
        rng = np.random.default_rng(17)
        self.start = init_params(self.spec, rng)
        self.x = rng.random((12, 4, 4))
        self.y = rng.integers(0, 3, size=12)

    def test_single_fullbatch_step_is_scaled_gradient(self):
        gamma = 0.25
        u = local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=12,
                        lr_local=gamma, rng=np.random.default_rng(0))
        g = backward(self.start, self.spec, Batch(self.x, self.y))
        np.testing.assert_allclose(u.delta.values, -gamma * g.values, rtol=0, atol=1e-13)
        assert u.num_samples == 12

    def test_negate_loss_is_exact_ascent(self):
        gamma = 0.25
        up = local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=12,
                         lr_local=gamma, rng=np.random.default_rng(0))
        un = local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=12,
                         lr_local=gamma, negate_loss=True, rng=np.random.default_rng(0))
        np.testing.assert_allclose(un.delta.values, -up.delta.values, rtol=0, atol=1e-13)

    def test_clip_radius_binds_exactly(self):
        g = backward(self.start, self.spec, Batch(self.x, self.y))
        gamma = 8.0 / np.linalg.norm(g.values)  # unconstrained step norm is 8
        u_free = local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=12,
                             lr_local=gamma, rng=np.random.default_rng(0))
        assert abs(np.linalg.norm(u_free.delta.values) - 8.0) < 1e-9
        u_clip = local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=12,
                             lr_local=gamma, clip_radius=4.0, rng=np.random.default_rng(0))
        assert abs(np.linalg.norm(u_clip.delta.values) - 4.0) < 1e-9

    def test_clip_holds_across_many_steps(self):
        u = local_train(self.start, self.spec, self.x, self.y, epochs=3, batch_size=4,
                        lr_local=5.0, clip_radius=0.5, rng=np.random.default_rng(0))
        assert np.linalg.norm(u.delta.values) <= 0.5 + 1e-12

    def test_clip_radius_zero_freezes_model(self):
        u = local_train(self.start, self.spec, self.x, self.y, epochs=2, batch_size=4,
                        lr_local=0.5, clip_radius=0.0, rng=np.random.default_rng(0))
        assert np.all(u.delta.values == 0.0)

    def test_deterministic_given_rng(self):
        spec = mlp_spec((4, 4), hidden=(6,), num_classes=3, dropout=0.25)
        start = init_params(spec, np.random.default_rng(17))
        u1 = local_train(start, spec, self.x, self.y, epochs=2, batch_size=5,
                         lr_local=0.1, rng=np.random.default_rng(4), agent_id=3)
        u2 = local_train(start, spec, self.x, self.y, epochs=2, batch_size=5,
                         lr_local=0.1, rng=np.random.default_rng(4), agent_id=3)
        assert np.array_equal(u1.delta.values, u2.delta.values)
        assert u1.agent_id == 3

    def test_start_params_not_mutated(self):
        before = self.start.values.copy()
        local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=4,
                    lr_local=0.5, rng=np.random.default_rng(0))
        assert np.array_equal(self.start.values, before)

    def test_training_reduces_loss(self):
        u = local_train(self.start, self.spec, self.x, self.y, epochs=20, batch_size=12,
                        lr_local=0.5, rng=np.random.default_rng(0))
        w = ParamVector(self.start.values + u.delta.values, self.start.shape_spec)
        l0, _ = forward(self.start, self.spec, Batch(self.x, self.y))
        l1, _ = forward(w, self.spec, Batch(self.x, self.y))
        assert l1 < l0

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            local_train(self.start, self.spec, self.x, self.y, epochs=0, batch_size=4, lr_local=0.1)
        with pytest.raises(ConfigError):
            local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=0, lr_local=0.1)
        with pytest.raises(ConfigError):
            local_train(self.start, self.spec, self.x, self.y, epochs=1, batch_size=4, lr_local=0.0)
        with pytest.raises(ConfigError):
            local_train(self.start, self.spec, self.x[:0], self.y[:0], epochs=1, batch_size=4,
                        lr_local=0.1)
