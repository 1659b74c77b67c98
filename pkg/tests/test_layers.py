"""Attention-gated layer behavior, model construction, descriptor parsing."""

import numpy as np
import pytest

from aswl import ops
from aswl.errors import DescriptorError
from aswl.layers import (AttentionLayer, attended_forward, attention_vector, build_model,
                         clamp_attentions, parse_architecture)
from aswl.pruning import prune_layer, prune_model
from aswl.tensor import Tape, Tensor, backward, precision
from aswl.training import TrainConfig

from helpers import max_rel_error, finite_difference_gradients, tape_gradients


def _dense_layer(w, bias, attention):
    layer = AttentionLayer("dense", np.asarray(w, dtype=np.float32),
                           np.asarray(bias, dtype=np.float32))
    layer.attention.data = np.asarray(attention, dtype=np.float32)
    return layer


def _ungated_forward(layer, x):
    return x @ layer.w.data + layer.bias.data


class TestAttendedForward:
    def test_full_gate_full_mask_matches_plain_layer(self):
        rng = np.random.default_rng(0)
        layer = _dense_layer(rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, 3), 1.0)
        x = rng.uniform(-1, 1, (5, 4)).astype(np.float32)
        out = attended_forward(layer, Tensor(x))
        np.testing.assert_array_equal(out.data, _ungated_forward(layer, x))

    def test_half_gate_halves_output_exactly(self):
        rng = np.random.default_rng(1)
        layer = _dense_layer(rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, 3), 1.0)
        x = rng.uniform(-1, 1, (5, 4)).astype(np.float32)
        full = attended_forward(layer, Tensor(x)).data
        layer.attention.data = np.asarray(0.5, dtype=np.float32)
        half = attended_forward(layer, Tensor(x)).data
        np.testing.assert_array_equal(half, np.float32(0.5) * full)

    def test_all_zero_mask_leaves_gated_bias(self):
        layer = _dense_layer([[1.0, 2.0], [3.0, 4.0]], [5.0, -6.0], 0.25)
        prune_layer(layer, 0.0)
        layer.mask = np.zeros_like(layer.mask)
        layer.w_hat.data = layer.w.data * layer.mask
        out = attended_forward(layer, Tensor(np.ones((3, 2), dtype=np.float32)))
        want = np.broadcast_to(np.float32(0.25) * np.array([5.0, -6.0], dtype=np.float32), (3, 2))
        np.testing.assert_array_equal(out.data, want)

    def test_gate_linearity_for_power_of_two_factor(self):
        rng = np.random.default_rng(2)
        layer = _dense_layer(rng.uniform(-1, 1, (6, 4)), rng.uniform(-1, 1, 4), 0.25)
        x = rng.uniform(-1, 1, (3, 6)).astype(np.float32)
        quarter = attended_forward(layer, Tensor(x)).data
        layer.attention.data = np.asarray(0.5, dtype=np.float32)
        half = attended_forward(layer, Tensor(x)).data
        np.testing.assert_array_equal(half, np.float32(2.0) * quarter)

    def test_conv_layer_gate(self):
        rng = np.random.default_rng(3)
        w = rng.uniform(-1, 1, (3, 3, 1, 2)).astype(np.float32)
        layer = AttentionLayer("conv2d", w, np.zeros(2, dtype=np.float32), stride=1, padding=1)
        layer.attention.data = np.asarray(1.0, dtype=np.float32)
        x = rng.uniform(0, 1, (2, 6, 6, 1)).astype(np.float32)
        full = attended_forward(layer, Tensor(x)).data
        layer.attention.data = np.asarray(0.5, dtype=np.float32)
        np.testing.assert_array_equal(attended_forward(layer, Tensor(x)).data,
                                      np.float32(0.5) * full)


class TestBuildModel:
    def test_single_dense_descriptor_counts(self):
        model = build_model("input 784\ndense 10\n", seed=0)
        assert len(model.layers) == 1
        assert model.layers[0].n_w == 7840

    def test_same_seed_is_bit_identical(self):
        m1 = build_model("mnist-cnn", seed=9)
        m2 = build_model("mnist-cnn", seed=9)
        for l1, l2 in zip(m1.layers, m2.layers):
            assert l1.w.data.tobytes() == l2.w.data.tobytes()

    def test_mnist_cnn_preset_has_four_prunable_layers(self):
        model = build_model("mnist-cnn", seed=0)
        assert len(model.layers) == 4
        assert [l.kind for l in model.layers] == ["conv2d", "conv2d", "dense", "dense"]
        assert model.weight_counts() == [144, 4608, 100352, 640]

    def test_fresh_model_state(self):
        model = build_model("mnist-cnn", seed=0)
        for layer in model.layers:
            assert layer.attention_value == 0.5
            assert np.all(layer.mask == 1)
            np.testing.assert_array_equal(layer.w_hat.data, layer.w.data)
            assert np.all(layer.bias.data == 0)

    def test_forward_shapes_through_preset(self):
        model = build_model("mnist-cnn", seed=0)
        x = Tensor(np.zeros((2, 28, 28, 1), dtype=np.float32))
        assert model.forward(x).shape == (2, 10)


class TestDescriptorErrors:
    @pytest.mark.parametrize("text,fragment", [
        ("input 28 28 1\nfoo 3\n", "line 2: unknown layer type 'foo'"),
        ("input 28 28 1\ndense 10\n", "line 2: dense needs a flattened input"),
        ("input 28 28 1\nmaxpool 5\n", "line 2: window 5 does not tile"),
        ("dense 10\n", "line 1: descriptor must start with an input"),
        ("input 28 28 1\ninput 28 28 1\n", "line 2: duplicate input"),
        ("input 4 4 1\nconv 9x9 filters=4\n", "line 2: kernel 9x9 larger"),
        ("input 4 4 1\nconv 3x3 filters=0\n", "line 2: conv needs filters"),
        ("input 16\nflatten\n", "no prunable layers"),
        ("input 28 28 1\nconv 3x3 filters=4 speed=2\n", "line 2: unknown option 'speed'"),
        ("input 28 28 1\nconv 3x3 filters=two\n", "line 2: filters must be an integer"),
    ])
    def test_malformed_descriptor(self, text, fragment):
        with pytest.raises(DescriptorError, match=fragment.replace("(", r"\(")):
            parse_architecture(text)

    def test_unknown_preset(self):
        with pytest.raises(DescriptorError, match="unknown architecture preset"):
            build_model("imagenet-vgg", seed=0)


class TestAttentionBounds:
    def test_clamp_upper(self):
        model = build_model("input 4\ndense 2\n", seed=0)
        model.layers[0].attention.data = np.asarray(1.3, dtype=np.float32)
        clamp_attentions(model)
        assert model.layers[0].attention_value == 1.0

    def test_clamp_lower(self):
        model = build_model("input 4\ndense 2\n", seed=0)
        model.layers[0].attention.data = np.asarray(-0.2, dtype=np.float32)
        clamp_attentions(model)
        assert model.layers[0].attention_value == pytest.approx(1e-4)

    def test_clamp_interior_point_unchanged(self):
        model = build_model("input 4\ndense 2\n", seed=0)
        model.layers[0].attention.data = np.asarray(0.7, dtype=np.float32)
        clamp_attentions(model)
        assert model.layers[0].attention_value == pytest.approx(0.7)

    def test_attention_vector_order(self):
        model = build_model("mnist-cnn", seed=0)
        for i, layer in enumerate(model.layers):
            layer.attention.data = np.asarray(0.1 * (i + 1), dtype=np.float32)
        assert attention_vector(model) == pytest.approx([0.1, 0.2, 0.3, 0.4])


def test_attention_gradient_matches_finite_differences_on_frozen_mask():
    with precision("float64"):
        arch = "input 9\ndense 6\nrelu\ndense 3\n"
        model = build_model(arch, seed=4)
        cfg = TrainConfig(alpha=2.0, gamma=0.4, l2=1e-3, epochs=1, batch_size=4, seed=0)
        for layer, a in zip(model.layers, (0.55, 0.35)):
            layer.attention.data = np.asarray(a)
        prune_model(model, cfg.alpha)
        rng = np.random.default_rng(8)
        images = rng.uniform(-1, 1, (4, 9))
        labels = rng.integers(0, 3, 4)
        ad = tape_gradients(model, images, labels, cfg)
        fd = finite_difference_gradients(model, images, labels, cfg, h=1e-6)
        assert max_rel_error(fd, ad) < 1e-6


def test_masked_positions_receive_no_gradient():
    model = build_model("input 6\ndense 4\n", seed=1)
    layer = model.layers[0]
    cfg = TrainConfig(alpha=1.0, gamma=0.0, l2=1e-3, epochs=1, batch_size=2, seed=0)
    prune_layer(layer, 0.5)
    rng = np.random.default_rng(2)
    images = rng.uniform(-1, 1, (2, 6)).astype(np.float32)
    grads = tape_gradients(model, images, np.array([0, 2]), cfg)
    w_grad = grads[0]
    assert np.all(w_grad[layer.mask == 0] == 0)
    assert np.any(w_grad[layer.mask == 1] != 0)
