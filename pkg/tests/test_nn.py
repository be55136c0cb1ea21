import numpy as np
import pytest

from vaedml import nn
from vaedml.errors import NumericError, SchemaError


def squared_error(target):
    def loss(output):
        diff = output - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    return loss


class TestForward:
    def test_identity_network(self):
        lyr = nn.Layer(weights=np.eye(3), bias=np.zeros(3), activation="identity")
        net = nn.Mlp([lyr])
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert np.array_equal(nn.forward(net, x).output, x)

    def test_zero_weights_relu(self):
        lyr = nn.Layer(weights=np.zeros((4, 2)), bias=np.zeros(2), activation="relu")
        net = nn.Mlp([lyr])
        out = nn.forward(net, np.ones((3, 4))).output
        assert np.array_equal(out, np.zeros((3, 2)))

    def test_scalar_affine(self):
        lyr = nn.Layer(weights=np.array([[2.0]]), bias=np.array([1.0]),
                       activation="identity")
        out = nn.forward(nn.Mlp([lyr]), np.array([[3.0]])).output
        assert out[0, 0] == 7.0

    def test_shape_mismatch(self):
        net = nn.init_mlp([3, 2], seed=0)
        with pytest.raises(SchemaError):
            nn.forward(net, np.ones((4, 5)))

    def test_deterministic(self):
        net = nn.init_mlp([4, 8, 2], seed=1)
        x = np.random.default_rng(2).normal(size=(6, 4))
        a = nn.forward(net, x).output
        b = nn.forward(net, x).output
        assert np.array_equal(a, b)


class TestBackward:
    def test_zero_loss_grad_gives_zero_grads(self):
        net = nn.init_mlp([3, 5, 2], seed=0)
        x = np.random.default_rng(1).normal(size=(4, 3))
        trace = nn.forward(net, x)
        grads = nn.backward(net, trace, np.zeros((4, 2)))
        assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)

    def test_linear_layer_least_squares_gradient(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(30, 4))
        y = rng.normal(size=(30, 1))
        w = rng.normal(size=(4, 1))
        net = nn.Mlp([nn.Layer(weights=w, bias=np.zeros(1), activation="identity")])
        trace = nn.forward(net, X)
        _, lg = squared_error(y)(trace.output)
        (dw, db), = nn.backward(net, trace, lg)
        yhat = X @ w
        expected = X.T @ (yhat - y) * (2.0 / y.size)
        assert np.allclose(dw, expected, atol=1e-12)

    def test_matches_finite_differences_random_net(self):
        rng = np.random.default_rng(4)
        net = nn.init_mlp([3, 6, 4, 2], activations=["tanh", "relu", "identity"], seed=5)
        # keep inputs away from relu kinks
        x = rng.normal(size=(8, 3)) + 0.05
        target = rng.normal(size=(8, 2))
        err = nn.grad_check(net, squared_error(target), x, n_samples=120, seed=0)
        assert err < 1e-4


class TestGradCheck:
    def test_linear_squared_error_is_tight(self):
        rng = np.random.default_rng(6)
        net = nn.init_mlp([4, 1], activations=["identity"], seed=7)
        x = rng.normal(size=(12, 4))
        target = rng.normal(size=(12, 1))
        assert nn.grad_check(net, squared_error(target), x) < 1e-6

    def test_zero_parameter_network(self):
        net = nn.Mlp([])
        err = nn.finite_difference_check(lambda ps: 0.0, [], [])
        assert err == 0.0
        assert nn.forward(net, np.ones((2, 3))).output.shape == (2, 3)

    def test_empty_batch_rejected(self):
        net = nn.init_mlp([2, 1], seed=0)
        with pytest.raises(Exception):
            nn.grad_check(net, squared_error(np.zeros((0, 1))), np.zeros((0, 2)))


class TestAdam:
    def setup_method(self):
        self.params = [np.array([1.0, -2.0]), np.array([[0.5]])]
        self.state = nn.init_optimizer(self.params, learning_rate=1e-3)

    def test_zero_gradients_keep_params(self):
        grads = [np.zeros(2), np.zeros((1, 1))]
        new, state = nn.adam_step(self.params, grads, self.state)
        assert all(np.array_equal(a, b) for a, b in zip(new, self.params))
        assert state.step == 1

    def test_first_step_magnitude_is_learning_rate(self):
        grads = [np.array([0.3, -0.7]), np.array([[2.0]])]
        new, _ = nn.adam_step(self.params, grads, self.state)
        for p, n, g in zip(self.params, new, grads):
            step = p - n
            assert np.allclose(np.abs(step), self.state.learning_rate, rtol=1e-6)
            assert np.all(np.sign(step) == np.sign(g))

    def test_opposite_gradients_symmetric(self):
        params = [np.zeros(2)]
        state = nn.init_optimizer(params)
        grads = [np.array([0.5, -0.5])]
        new, _ = nn.adam_step(params, grads, state)
        assert new[0][0] == pytest.approx(-new[0][1])

    def test_lr_zero_is_identity(self):
        state = nn.init_optimizer(self.params, learning_rate=0.0)
        grads = [np.ones(2), np.ones((1, 1))]
        new, _ = nn.adam_step(self.params, grads, state)
        assert all(np.array_equal(a, b) for a, b in zip(new, self.params))

    def test_non_finite_gradient_aborts(self):
        grads = [np.array([np.inf, 0.0]), np.zeros((1, 1))]
        with pytest.raises(NumericError):
            nn.adam_step(self.params, grads, self.state)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = nn.init_mlp([5, 16, 3], seed=42)
        x = np.random.default_rng(0).normal(size=(7, 5))
        before = nn.forward(net, x).output
        path = tmp_path / "model.json"
        nn.save_checkpoint(net, path, seed=42)
        loaded, seed = nn.load_checkpoint(path)
        assert seed == 42
        after = nn.forward(loaded, x).output
        assert np.array_equal(before, after)

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 99, "layers": []}')
        with pytest.raises(SchemaError):
            nn.load_checkpoint(path)
