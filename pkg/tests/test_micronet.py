"""Network engine: forward/backward correctness, model files and training."""
import math

import numpy as np
import pytest

from conftest import randomize_batchnorm, tiny_config
from xaibench.micronet import (
    BadMagic,
    BatchNorm,
    CorruptPayload,
    Dense,
    Model,
    NonFiniteActivation,
    PairConcat,
    ReLU,
    ShapeMismatch,
    SumPool,
    TraceMismatch,
    VersionMismatch,
    backward,
    build_model,
    forward,
    load_model,
    merge_batchnorm,
    predict,
    save_model,
)
from xaibench.micronet.io import dumps_model, loads_model
from xaibench.micronet.train import DivergedTraining, TrainConfig, accuracy, gradients, train
from xaibench.program import program_vocabulary


def fd_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat = x.ravel()
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        g.flat[k] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def random_model(seed, **kw):
    cfg = tiny_config(**kw)
    model = build_model(cfg, seed=seed)
    randomize_batchnorm(model, np.random.default_rng(seed + 100))
    return model


class TestForward:
    def test_identity_dense(self):
        model = Model([Dense(np.eye(2), np.zeros(2))], (2,))
        logits, _ = forward(model, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(logits, [1.0, 2.0])

    def test_deterministic(self, tiny_model):
        x = np.random.default_rng(0).random((3, 24, 24))
        q = np.random.default_rng(1).normal(size=6)
        a, _ = forward(tiny_model, x, q)
        b, _ = forward(tiny_model, x, q)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (28,)

    def test_batch_matches_single(self, tiny_model):
        rng = np.random.default_rng(2)
        xs, qs = rng.random((4, 3, 24, 24)), rng.normal(size=(4, 6))
        batch, _ = forward(tiny_model, xs, qs)
        for k in range(4):
            single, _ = forward(tiny_model, xs[k], qs[k])
            np.testing.assert_allclose(batch[k], single, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            forward(tiny_model, np.zeros((3, 20, 20)))
        with pytest.raises(ShapeMismatch):
            forward(tiny_model, np.zeros((3, 24, 24)), np.zeros(5))

    def test_non_finite(self):
        model = Model([Dense(np.eye(2), np.zeros(2))], (2,))
        with pytest.raises(NonFiniteActivation):
            forward(model, np.array([np.inf, 0.0]))

    def test_layer_order(self, tiny_model):
        kinds = [layer.kind for layer in tiny_model.layers]
        assert kinds[:12] == ["conv", "relu", "batchnorm"] * 4
        assert kinds[12] == "pair"
        assert kinds[13:21] == ["dense", "relu"] * 4
        assert kinds[21] == "sumpool"
        assert kinds[22:] == ["dense", "relu", "dense", "relu", "dense"]


class TestBackward:
    def test_single_relu_rules(self):
        relu = ReLU()
        _, cache = relu.forward(np.array([-1.0]))
        g = np.array([2.0])
        assert relu.backward(g, cache, "standard")[0] == 0.0
        assert relu.backward(g, cache, "deconvnet")[0] == 2.0
        assert relu.backward(g, cache, "guided")[0] == 0.0

    def test_modes_agree_without_relu(self):
        rng = np.random.default_rng(0)
        model = Model([Dense(rng.normal(size=(4, 5)), rng.normal(size=5)),
                       Dense(rng.normal(size=(5, 3)), rng.normal(size=3))], (4,))
        _, trace = forward(model, rng.normal(size=4))
        ref = backward(model, trace, 1)
        for mode in ("deconvnet", "guided"):
            np.testing.assert_array_equal(backward(model, trace, 1, relu_mode=mode), ref)

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        model = random_model(seed)
        rng = np.random.default_rng(seed)
        x, q = rng.random((3, 24, 24)), rng.normal(size=6)
        c = int(rng.integers(28))
        _, trace = forward(model, x, q)
        g = backward(model, trace, c)
        fd = fd_gradient(lambda z: forward(model, z, q)[0][c], x.copy())
        assert rel_error(g, fd) < 1e-4

    def test_trace_mismatch(self, tiny_model):
        other = random_model(9)
        _, trace = forward(other, np.zeros((3, 24, 24)))
        with pytest.raises(TraceMismatch):
            backward(tiny_model, trace, 0)

    def test_conv_only_scope(self, tiny_model):
        """Outside the scope ReLUs keep the true derivative."""
        x = np.random.default_rng(3).random((3, 24, 24))
        _, trace = forward(tiny_model, x)
        full = backward(tiny_model, trace, 2, relu_mode="guided")
        scoped = backward(tiny_model, trace, 2, relu_mode="guided", relu_scope="conv_only")
        assert not np.array_equal(full, scoped)
        with pytest.raises(ValueError):
            backward(tiny_model, trace, 2, relu_scope="dense_only")

    def test_batchnorm_inference_is_affine(self):
        rng = np.random.default_rng(4)
        bn = BatchNorm(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3), rng.uniform(0.5, 2, 3))
        x = rng.normal(size=(2, 3, 4, 4))
        _, cache = bn.forward(x)
        g = rng.normal(size=x.shape)
        scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(bn.backward(g, cache), g * scale[None, :, None, None], rtol=1e-15)

    def test_pair_sum_adjoint(self):
        """Backward through pairing and pair sum is the transposed Jacobian."""
        rng = np.random.default_rng(5)
        pair, pool = PairConcat(question_dim=2, coords=True), SumPool()
        x, q = rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(1, 2))

        def f(z):
            out, _ = pair.forward(z.reshape(x.shape), q)
            return pool.forward(out)[0].ravel()

        y = f(x.ravel())
        jac = np.zeros((y.size, x.size))
        for k in range(x.size):
            e = np.zeros(x.size)
            e[k] = 1.0
            jac[:, k] = f(x.ravel() + e) - y  # the map is affine in x
        g = rng.normal(size=y.shape)
        out, pcache = pair.forward(x, q)
        _, scache = pool.forward(out)
        back = pair.backward(pool.backward(g[None], scache), pcache)
        np.testing.assert_allclose(back.ravel(), jac.T @ g, rtol=1e-12, atol=1e-12)


class TestPredict:
    def test_probabilities(self):
        model = Model([Dense(np.eye(2), np.zeros(2))], (2,))
        assert predict(model, np.array([0.0, 0.0])) == (0, 0.5)
        cls, p = predict(model, np.array([10.0, 0.0]))
        assert cls == 0 and p == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-15)

    def test_matches_argmax(self, tiny_model):
        x = np.random.default_rng(6).random((3, 24, 24))
        logits, _ = forward(tiny_model, x)
        assert predict(tiny_model, x)[0] == int(np.argmax(logits))


class TestModelFile:
    def test_roundtrip(self, tiny_model, tmp_path):
        save_model(tiny_model, tmp_path / "m.bin")
        loaded = load_model(tmp_path / "m.bin")
        for (i, name, a), (j, name2, b) in zip(tiny_model.parameters(), loaded.parameters()):
            assert (i, name) == (j, name2)
            np.testing.assert_array_equal(a, b)
        for a, b in zip(tiny_model.layers, loaded.layers):
            if isinstance(a, BatchNorm):
                np.testing.assert_array_equal(a.running_mean, b.running_mean)
                np.testing.assert_array_equal(a.running_var, b.running_var)
        assert dumps_model(loaded) == dumps_model(tiny_model)
        assert loaded.encoder.vocab == tiny_model.encoder.vocab

    def test_per_layer_kernels(self, tmp_path):
        model = build_model(tiny_config(input_shape=(3, 32, 32), kernel_size=(2, 2, 2, 1), strides=(2, 2, 2, 1)),
                            seed=0, vocab=program_vocabulary())
        convs = [l for l in model.layers if l.kind == "conv"]
        assert [c.weight.shape[2:] for c in convs] == [(2, 2), (2, 2), (2, 2), (1, 1)]
        assert model.layers[[l.kind for l in model.layers].index("pair")].out_shape((4, 4, 4))[0] == 256
        save_model(model, tmp_path / "k.bin")
        assert dumps_model(load_model(tmp_path / "k.bin")) == dumps_model(model)
        with pytest.raises(ShapeMismatch):
            build_model(tiny_config(kernel_size=(3, 3)))

    def test_truncated(self, tiny_model):
        data = dumps_model(tiny_model)
        with pytest.raises(CorruptPayload):
            loads_model(data[:-10])
        with pytest.raises(CorruptPayload):
            loads_model(data[:10])

    def test_flipped_byte(self, tiny_model):
        data = bytearray(dumps_model(tiny_model))
        data[200] ^= 0xFF
        with pytest.raises(CorruptPayload):
            loads_model(bytes(data))

    def test_magic(self, tiny_model):
        data = dumps_model(tiny_model)
        with pytest.raises(BadMagic):
            loads_model(b"PNG" + data[3:])
        with pytest.raises(VersionMismatch):
            loads_model(data[:6] + b"02" + data[8:])


class TestMergeBatchnorm:
    def test_equivalent(self, tiny_model):
        merged = merge_batchnorm(tiny_model)
        assert not any(isinstance(layer, BatchNorm) for layer in merged.layers)
        x, q = np.random.default_rng(7).random((3, 24, 24)), np.random.default_rng(8).normal(size=6)
        np.testing.assert_allclose(forward(merged, x, q)[0], forward(tiny_model, x, q)[0],
                                   rtol=1e-10, atol=1e-12)


def toy_data(n=24, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((6, 3, 24, 24))
    index = rng.integers(0, 6, n)
    tokens = [list(rng.integers(0, 20, 3)) for _ in range(n)]
    labels = rng.integers(0, 28, n)
    return images, index, tokens, labels


class TestTraining:
    def test_parameter_gradients(self):
        """Training-mode gradients of every parameter, embedding included, vs finite differences."""
        model = build_model(tiny_config(conv_channels=(3, 3, 3, 3), rn_hidden=(5, 5, 5, 5),
                                        classifier_hidden=(5, 5)), seed=1, vocab=program_vocabulary())
        images, index, tokens, labels = toy_data(4)
        rng = np.random.default_rng(0)
        for layer in model.layers:
            if isinstance(layer, Dense):  # non-zero biases keep pre-activations off the ReLU kink
                layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
        model.set_training(True)
        momenta = [layer.momentum for layer in model.layers if isinstance(layer, BatchNorm)]
        for layer in model.layers:
            if isinstance(layer, BatchNorm):
                layer.momentum = 0.0
        x = images[index]
        _, grads = gradients(model, x, tokens, labels)
        for (i, name, p), g in zip(model.parameters(), grads):
            picks = rng.choice(p.size, size=min(p.size, 6), replace=False)
            for k in picks:
                old = p.flat[k]
                p.flat[k] = old + 1e-6
                up, _ = gradients(model, x, tokens, labels)
                p.flat[k] = old - 1e-6
                down, _ = gradients(model, x, tokens, labels)
                p.flat[k] = old
                fd = (up - down) / 2e-6
                assert abs(fd - g.flat[k]) <= 1e-5 * max(1.0, abs(fd)), (i, name, k)
        assert momenta

    def test_zero_lr_changes_nothing(self):
        model = build_model(tiny_config(), seed=2, vocab=program_vocabulary())
        before = dumps_model(model)
        data = toy_data()
        acc = accuracy(model, *data)
        train(model, *data, TrainConfig(epochs=2, lr=0.0, batch_size=8), seed=0)
        assert dumps_model(model) == before
        assert accuracy(model, *data) == acc

    def test_same_seed_same_model(self):
        data = toy_data()
        out = []
        for _ in range(2):
            model = build_model(tiny_config(), seed=2, vocab=program_vocabulary())
            train(model, *data, TrainConfig(epochs=2, batch_size=8), seed=5)
            out.append(dumps_model(model))
        assert out[0] == out[1]

    def test_loss_decreases(self):
        data = toy_data(16)
        model = build_model(tiny_config(), seed=3, vocab=program_vocabulary())
        history = train(model, *data, TrainConfig(epochs=30, batch_size=8, lr=5e-3), seed=0)
        assert history[-1] < 0.5 * history[0]
        assert not any(layer.training for layer in model.layers if isinstance(layer, BatchNorm))

    def test_diverged(self):
        images, index, tokens, labels = toy_data(8)
        model = build_model(tiny_config(), seed=3, vocab=program_vocabulary())
        images[:, 0, 0, 0] = np.nan
        with pytest.raises(DivergedTraining):
            train(model, images, index, tokens, labels, TrainConfig(epochs=1, batch_size=8), seed=0)
        assert not any(layer.training for layer in model.layers if isinstance(layer, BatchNorm))
