import numpy as np
import pytest
from numpy.testing import assert_allclose

from frpt.container import file_digest
from frpt.data import LabeledDataset
from frpt.exceptions import LabelOutOfRange, MissingReconTargets, ShapeMismatch
from frpt.network import (
    Activation,
    AdamState,
    LayerUnit,
    Network,
    build_network,
    compute_loss,
    evaluate,
    forward_trace,
    load_checkpoint,
    loss_and_gradients,
    save_checkpoint,
    train_step,
)

from _oracles import finite_difference_gradients


def toy_network(seed=0, activations=("tanh", "sigmoid", "identity")):
    """Three units covering conv+pool, conv, and fc."""
    rng = np.random.default_rng(seed)
    u1 = LayerUnit(
        "conv",
        rng.normal(scale=0.5, size=(2, 1, 3, 3)),
        rng.normal(scale=0.5, size=2),
        Activation(activations[0]),
        pool=2,
    )
    u2 = LayerUnit(
        "conv",
        rng.normal(scale=0.5, size=(3, 2, 2, 2)),
        rng.normal(scale=0.5, size=3),
        Activation(activations[1]),
    )
    u3 = LayerUnit(
        "fc",
        rng.normal(scale=0.5, size=(3, 3)),
        rng.normal(scale=0.5, size=3),
        Activation(activations[2]),
    )
    return Network([u1, u2, u3], (1, 6, 6))


class TestNetworkConstruction:
    def test_mnist_baseline_shapes_and_param_counts(self):
        net = build_network("mnist_baseline", seed=0)
        assert net.a_shape(1) == (2, 12, 12)
        assert net.a_shape(2) == (4, 8, 8)
        assert net.a_shape(3) == (10,)
        assert net.param_count(1) == 52
        assert net.param_count(2) == 204
        assert net.param_count(3) == 2570
        assert net.trainable_param_count(0, 3) == 2826
        assert net.trainable_param_count(1, 3) == 2774

    def test_forward_trace_shapes(self):
        net = build_network("mnist_baseline", seed=0)
        trace = forward_trace(net, np.zeros((5, 1, 28, 28)))
        assert trace.a[0].shape == (5, 2, 12, 12)
        assert trace.a[1].shape == (5, 4, 8, 8)
        assert trace.logits.shape == (5, 10)

    def test_rejects_non_logit_head(self):
        unit = LayerUnit("fc", np.zeros((2, 4)), np.zeros(2), Activation("tanh"))
        with pytest.raises(ShapeMismatch):
            Network([unit], (4,))

    def test_rejects_ragged_pool(self):
        unit = LayerUnit("conv", np.zeros((1, 1, 2, 2)), np.zeros(1),
                         Activation("tanh"), pool=2)
        head = LayerUnit("fc", np.zeros((2, 4)), np.zeros(2), Activation("identity"))
        with pytest.raises(ShapeMismatch):
            Network([unit, head], (1, 6, 6))  # 5x5 conv output, pool 2

    def test_rejects_mismatched_batch(self):
        net = build_network("mnist_baseline", seed=0)
        with pytest.raises(ShapeMismatch):
            forward_trace(net, np.zeros((2, 1, 27, 28)))


class TestForwardTrace:
    def test_zero_input_zero_bias_tanh_gives_zero_trace(self):
        net = toy_network()
        for unit in net.units:
            unit.bias[:] = 0.0
            unit.activation = Activation("tanh") if unit.kind == "conv" else unit.activation
        net.units[-1].bias[:] = 0.0
        trace = forward_trace(net, np.zeros((2, 1, 6, 6)))
        for z, a in zip(trace.z, trace.a):
            assert np.all(z == 0.0) and np.all(a == 0.0)

    def test_identity_kernel_conv_is_tanh_of_input(self):
        conv = LayerUnit("conv", np.ones((1, 1, 1, 1)), np.zeros(1), Activation("tanh"))
        head = LayerUnit("fc", np.zeros((2, 16)), np.zeros(2), Activation("identity"))
        net = Network([conv, head], (1, 4, 4))
        x = np.random.default_rng(1).normal(size=(3, 1, 4, 4))
        trace = forward_trace(net, x)
        assert_allclose(trace.a[0], np.tanh(x))

    def test_forward_is_pure(self):
        net = build_network("mnist_baseline", seed=1)
        x = np.random.default_rng(2).normal(size=(4, 1, 28, 28))
        t1 = forward_trace(net, x)
        t2 = forward_trace(net, x)
        for a, b in zip(t1.a + t1.z, t2.a + t2.z):
            assert np.array_equal(a, b)


class TestLosses:
    def test_mse_zero_at_target(self):
        x = np.random.default_rng(3).normal(size=(4, 7))
        value, grad = compute_loss("mse", x, x)
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_cross_entropy_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        _, grad = compute_loss("cross_entropy", logits, labels)
        fd = finite_difference_gradients(
            lambda: compute_loss("cross_entropy", logits, labels)[0], [logits]
        )[0]
        assert np.abs(grad - fd).max() / np.abs(fd).max() <= 1e-6

    def test_l1_and_mse_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        pred = rng.normal(size=(3, 6)) + 1.0  # keep signs away from zero
        target = rng.normal(size=(3, 6)) - 1.0
        for kind in ("mse", "l1"):
            _, grad = compute_loss(kind, pred, target)
            fd = finite_difference_gradients(
                lambda k=kind: compute_loss(k, pred, target)[0], [pred]
            )[0]
            assert np.abs(grad - fd).max() / np.abs(fd).max() <= 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            compute_loss("cross_entropy", np.zeros((2, 3)), np.array([0, 3]))

    def test_combined_loss_endpoints(self):
        net = toy_network(seed=6)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 1, 6, 6))
        labels = rng.integers(0, 3, size=4)
        trace = forward_trace(net, x)
        targets = rng.normal(size=trace.a[2].shape)
        pure_cls, _ = loss_and_gradients(net, trace, labels, alpha=0.0)
        mixed, _ = loss_and_gradients(net, trace, labels, alpha=1.0,
                                      recon_targets=targets, train_range=(0, 3))
        rec_value = compute_loss("mse", trace.a[2], targets)[0]
        assert_allclose(pure_cls["total"], pure_cls["cls"])
        assert_allclose(mixed["total"], rec_value)
        alpha = 0.3
        combined, _ = loss_and_gradients(net, trace, labels, alpha=alpha,
                                         recon_targets=targets, train_range=(0, 3))
        assert_allclose(combined["total"],
                        (1 - alpha) * combined["cls"] + alpha * combined["rec"])


def max_relative_error(analytic, numeric):
    scale = np.abs(numeric).max()
    return np.abs(analytic - numeric).max() / (scale if scale > 0 else 1.0)


class TestGradients:
    @pytest.mark.parametrize("activations", [
        ("tanh", "sigmoid", "identity"),
        ("sin", "tanh", "identity"),
        ("leaky_relu", "relu", "identity"),
    ])
    @pytest.mark.parametrize("train_range,alpha,l_r_targets", [
        ((0, 3), 0.0, None),
        ((0, 3), 0.4, 3),
        ((0, 2), 0.5, 2),
        ((1, 3), 1.0, 3),
    ])
    def test_train_gradients_match_finite_differences(self, activations,
                                                      train_range, alpha, l_r_targets):
        net = toy_network(seed=7, activations=activations)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 1, 6, 6))
        labels = rng.integers(0, 3, size=3)
        trace = forward_trace(net, x)
        if "relu" in activations or "leaky_relu" in activations:
            # Finite differences need preactivations away from the kink.
            assert min(np.abs(z).min() for z in trace.z) > 1e-3
        targets = None
        if alpha > 0:
            targets = rng.normal(size=trace.a[train_range[1] - 1].shape)

        _, grads = loss_and_gradients(net, trace, labels, alpha=alpha,
                                      recon_targets=targets, train_range=train_range)
        l_s, l_r = train_range
        expected_keys = {(l, p) for l in range(l_s + 1, l_r + 1)
                         for p in ("weight", "bias")}
        assert set(grads) == expected_keys

        def total():
            t = forward_trace(net, x)
            losses, _ = loss_and_gradients(net, t, labels, alpha=alpha,
                                           recon_targets=targets, train_range=train_range)
            return losses["total"]

        for (l, name), grad in grads.items():
            param = getattr(net.units[l - 1], name)
            fd = finite_difference_gradients(total, [param])[0]
            assert max_relative_error(grad, fd) <= 1e-4, (l, name, activations)


class TestTrainStep:
    def test_freezing_is_bit_exact(self):
        net = toy_network(seed=9)
        adam = AdamState()
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 1, 6, 6))
        labels = rng.integers(0, 3, size=4)
        frozen_before = [(net.units[0].weight.copy(), net.units[0].bias.copy()),
                         (net.units[2].weight.copy(), net.units[2].bias.copy())]
        trained_before = net.units[1].weight.copy()
        for _ in range(3):
            train_step(net, adam, x, labels, train_range=(1, 2))
        assert np.array_equal(net.units[0].weight, frozen_before[0][0])
        assert np.array_equal(net.units[0].bias, frozen_before[0][1])
        assert np.array_equal(net.units[2].weight, frozen_before[1][0])
        assert np.array_equal(net.units[2].bias, frozen_before[1][1])
        assert not np.array_equal(net.units[1].weight, trained_before)

    def test_default_range_is_full_backprop(self):
        net = toy_network(seed=10)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 1, 6, 6))
        labels = rng.integers(0, 3, size=8)
        adam = AdamState()
        first = train_step(net, adam, x, labels)["total"]
        for _ in range(30):
            last = train_step(net, adam, x, labels)["total"]
        assert last < first

    def test_missing_recon_targets(self):
        net = toy_network(seed=11)
        with pytest.raises(MissingReconTargets):
            train_step(net, AdamState(), np.zeros((2, 1, 6, 6)), np.zeros(2, dtype=int),
                       alpha=0.5, train_range=(0, 3))

    def test_rejects_bad_range(self):
        net = toy_network(seed=12)
        with pytest.raises(ValueError):
            train_step(net, AdamState(), np.zeros((1, 1, 6, 6)),
                       np.zeros(1, dtype=int), train_range=(2, 2))


class TestEvaluate:
    def test_constant_predictor_on_single_class(self):
        net = toy_network(seed=13)
        net.units[-1].bias[:] = np.array([10.0, 0.0, 0.0])
        net.units[-1].weight[:] = 0.0
        data = LabeledDataset(np.random.default_rng(13).normal(size=(20, 1, 6, 6)),
                              np.zeros(20, dtype=int), 3)
        assert evaluate(net, data) == 1.0

    def test_untrained_net_near_chance(self):
        net = build_network("mnist_baseline", seed=14)
        rng = np.random.default_rng(14)
        data = LabeledDataset(rng.normal(size=(2000, 1, 28, 28)),
                              rng.integers(0, 10, size=2000), 10)
        accuracy = evaluate(net, data)
        assert abs(accuracy - 0.1) <= 0.03


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = build_network("mnist_baseline", seed=15)
        path = tmp_path / "model.frpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        for original, restored in zip(net.units, loaded.units):
            assert np.array_equal(original.weight, restored.weight)
            assert np.array_equal(original.bias, restored.bias)
            assert original.activation == restored.activation
            assert original.pool == restored.pool
        second = tmp_path / "model2.frpt"
        save_checkpoint(loaded, second)
        assert file_digest(path) == file_digest(second)

    def test_magic_enforced(self, tmp_path):
        from frpt.exceptions import BadMagic
        path = tmp_path / "bogus.frpt"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(BadMagic):
            load_checkpoint(path)


class TestArchitecturePresets:
    def test_three_conv_preset_param_counts(self):
        net = build_network("conv3_ascending", seed=0)
        assert [net.param_count(l) for l in range(1, 6)] == [380, 460, 1365, 30848, 1290]
        assert net.a_shape(3) == (15, 4, 4)
        net = build_network("conv3_descending", seed=0)
        assert net.a_shape(3) == (5, 4, 4)
        assert net.units[0].weight.shape[0] == 15

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            build_network("no_such_preset")
