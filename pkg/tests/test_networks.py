"""Tests for the numpy MLP, its gradients, Adam and checkpoints."""

import numpy as np
import pytest

from powerarb.errors import DimensionMismatch, InvalidConfig, ShapeMismatch
from powerarb.networks import (
    Adam,
    Mlp,
    OutputActivation,
    dump_networks,
    net_forward,
    net_gradient,
    parse_networks,
    soft_update,
    squared_loss,
)


def zero_net(sizes, activation=OutputActivation.LINEAR, low=None, high=None) -> Mlp:
    return Mlp(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        activation,
        low,
        high,
    )


def constant_net(value: float) -> Mlp:
    return Mlp([np.full((1, 1), value)], [np.full(1, value)])


class TestForward:
    """Forward passes and output squashing."""

    def test_zero_network_outputs_zero(self):
        assert np.all(net_forward(zero_net([3, 4, 2]), np.ones(3)) == 0.0)

    def test_squash_midpoint(self):
        net = zero_net([2, 1], OutputActivation.BOUNDED_SQUASH, 20.0, 200.0)

        assert net_forward(net, np.array([5.0, -5.0]))[0] == 110.0

    def test_squash_saturates_below_upper_bound(self):
        net = zero_net([1, 1], OutputActivation.BOUNDED_SQUASH, 20.0, 200.0)
        net.biases[-1][:] = 50.0

        output = net_forward(net, np.zeros(1))[0]

        assert output <= 200.0
        assert 200.0 - output < 1e-6

    def test_batch_and_single_inputs_agree(self):
        net = Mlp.initialize([3, 5, 2], np.random.default_rng(0))
        batch = np.random.default_rng(1).normal(size=(4, 3))

        np.testing.assert_allclose(net_forward(net, batch)[2], net_forward(net, batch[2]), rtol=1e-12)

    def test_wrong_input_size(self):
        with pytest.raises(DimensionMismatch):
            net_forward(zero_net([3, 1]), np.ones(4))

    def test_invalid_layers_and_bounds(self):
        with pytest.raises(InvalidConfig):
            Mlp.initialize([3], np.random.default_rng(0))
        with pytest.raises(InvalidConfig):
            zero_net([1, 1], OutputActivation.BOUNDED_SQUASH, 5.0, 5.0)
        with pytest.raises(ShapeMismatch):
            Mlp([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)])


class TestGradients:
    """Exact reverse-mode gradients."""

    def test_single_linear_neuron(self):
        net = Mlp([np.ones((1, 1))], [np.zeros(1)])

        loss, grads = net_gradient(net, squared_loss, (np.array([[1.0]]), np.array([[0.0]])))

        assert loss == 1.0
        assert grads.weights[0][0, 0] == 2.0

    def test_bias_gradient_of_zero_network(self):
        net = zero_net([2, 1])

        _, grads = net_gradient(net, squared_loss, (np.array([[0.3, -0.7]]), np.array([[3.0]])))

        assert grads.biases[0][0] == -6.0

    def test_empty_batch(self):
        with pytest.raises(DimensionMismatch):
            net_gradient(zero_net([2, 1]), squared_loss, (np.zeros((0, 2)), np.zeros((0, 1))))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        activation = OutputActivation.BOUNDED_SQUASH if seed % 2 else OutputActivation.LINEAR
        net = Mlp.initialize([6, 64, 32, 2], rng, activation, -1.0, 3.0)
        # larger output weights so the squash is not saturated or flat
        net.weights[-1] = rng.normal(0.0, 0.3, size=net.weights[-1].shape)
        inputs = rng.normal(size=(4, 6))
        targets = rng.normal(size=(4, 2))

        _, grads = net_gradient(net, squared_loss, (inputs, targets))

        def loss() -> float:
            return squared_loss(net_forward(net, inputs), targets)[0]

        h = 1e-6
        analytic, numeric = [], []
        for param, grad in zip(net.parameters(), grads.parameters()):
            flat, flat_grad = param.reshape(-1), grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                original = flat[i]
                flat[i] = original + h
                plus = loss()
                flat[i] = original - h
                minus = loss()
                flat[i] = original
                numeric.append((plus - minus) / (2 * h))
                analytic.append(flat_grad[i])

        analytic, numeric = np.array(analytic), np.array(numeric)
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-8)


class TestSoftUpdate:
    """Target tracking tau * source + (1 - tau) * target."""

    def test_half_step(self):
        target = soft_update(constant_net(2.0), constant_net(4.0), 0.5)

        assert target.weights[0][0, 0] == 3.0
        assert target.biases[0][0] == 3.0

    def test_full_step_copies_source(self):
        source = Mlp.initialize([3, 4, 1], np.random.default_rng(0))
        target = Mlp.initialize([3, 4, 1], np.random.default_rng(1))

        soft_update(target, source, 1.0)

        for t, s in zip(target.parameters(), source.parameters()):
            np.testing.assert_array_equal(t, s)

    def test_zero_step_keeps_target(self):
        target = constant_net(2.0)

        soft_update(target, constant_net(4.0), 0.0)

        assert target.weights[0][0, 0] == 2.0

    @pytest.mark.parametrize("tau", [0.01, 0.1, 0.5])
    def test_gap_to_fixed_source_shrinks_geometrically(self, tau):
        source = Mlp.initialize([3, 5, 1], np.random.default_rng(0))
        target = Mlp.initialize([3, 5, 1], np.random.default_rng(1))

        def gap() -> float:
            return max(np.max(np.abs(t - s)) for t, s in zip(target.parameters(), source.parameters()))

        initial = gap()
        for n in range(1, 21):
            soft_update(target, source, tau)
            assert gap() <= (1.0 - tau) ** n * initial * (1.0 + 1e-9) + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            soft_update(zero_net([2, 1]), zero_net([3, 1]), 0.5)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        net = constant_net(1.0)
        optimizer = Adam(net, learning_rate=0.1)

        _, grads = net_gradient(net, squared_loss, (np.array([[1.0]]), np.array([[0.0]])))
        optimizer.step(net, grads)

        assert net.weights[0][0, 0] == pytest.approx(0.9, abs=1e-6)
        assert optimizer.steps == 1


class TestCheckpoints:
    """Decimal-text checkpoints reload exactly."""

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        networks = {
            "da.actor": Mlp.initialize([5, 8, 1], rng, OutputActivation.BOUNDED_SQUASH, 20.0, 200.0),
            "da.critic": Mlp.initialize([6, 8, 1], rng),
        }

        restored = parse_networks(dump_networks(networks))

        assert list(restored) == ["da.actor", "da.critic"]
        for name, net in networks.items():
            assert restored[name].output_activation is net.output_activation
            for a, b in zip(restored[name].parameters(), net.parameters()):
                np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(restored["da.actor"].high, [200.0])

    def test_malformed_checkpoint(self):
        text = dump_networks({"bm.actor": constant_net(1.0)})

        with pytest.raises(ShapeMismatch):
            parse_networks(text.replace("weight 0 1 1", "weight 0 2 1"))
