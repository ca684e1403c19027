"""Network construction, activations, serialization and forward passes."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from apexprobe.model import (
    Activation,
    AffineLayer,
    DimensionError,
    ModelError,
    ModelFormatError,
    NetworkSpec,
    UnknownActivationError,
    forward,
    gelu,
    leaky_relu,
    load_model,
    relu,
    save_model,
)
from conftest import small_relu_net


class TestActivation:
    def test_relu_values(self):
        z = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        np.testing.assert_array_equal(relu()(z), [0.0, 0.0, 0.0, 0.5, 2.0])

    def test_leaky_relu_values(self):
        z = np.array([-2.0, 0.0, 3.0])
        np.testing.assert_allclose(leaky_relu(0.1)(z), [-0.2, 0.0, 3.0])

    def test_gelu_matches_erf_form(self):
        z = np.linspace(-4, 4, 33)
        expected = 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
        np.testing.assert_allclose(gelu()(z), expected, rtol=0, atol=0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(UnknownActivationError):
            Activation("tanh")

    @pytest.mark.parametrize("alpha", [None, 0.0, 1.0, -0.5, 2.0])
    def test_leaky_relu_alpha_validation(self, alpha):
        with pytest.raises(ModelError):
            Activation("leaky_relu", alpha)

    def test_relu_takes_no_alpha(self):
        with pytest.raises(ModelError):
            Activation("relu", 0.5)

    def test_non_finite_input_rejected(self):
        with pytest.raises(ModelError):
            relu()(np.array([1.0, np.nan]))

    def test_homogeneous_flags(self):
        assert relu().homogeneous
        assert leaky_relu(0.2).homogeneous
        assert not gelu().homogeneous

    @pytest.mark.parametrize("act", [relu(), leaky_relu(0.3), gelu()])
    def test_derivative_matches_finite_difference(self, act):
        # avoid the relu kink at 0
        z = np.linspace(-3.0, 3.0, 41) + 0.017
        h = 1e-6
        fd = (act(z + h) - act(z - h)) / (2 * h)
        np.testing.assert_allclose(act.derivative(z), fd, atol=1e-8)

    @given(st.floats(-50, 50), st.floats(0.0, 100.0))
    def test_relu_positive_homogeneity(self, z, s):
        np.testing.assert_allclose(
            relu()(np.array([s * z])), s * relu()(np.array([z])), rtol=1e-12, atol=1e-300
        )

    def test_serialization_roundtrip(self):
        for act in (relu(), leaky_relu(0.25), gelu()):
            assert Activation.from_dict(act.to_dict()) == act

    def test_from_dict_rejects_spurious_alpha(self):
        with pytest.raises(ModelFormatError):
            Activation.from_dict({"kind": "relu", "alpha": 0.1})

    def test_from_dict_rejects_non_dict(self):
        with pytest.raises(ModelFormatError):
            Activation.from_dict("relu")


class TestAffineLayer:
    def test_dims(self):
        layer = AffineLayer(np.zeros((3, 5)), np.zeros(3))
        assert layer.in_dim == 5 and layer.out_dim == 3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            AffineLayer(np.zeros((3, 5)), np.zeros(4))

    def test_weight_must_be_matrix(self):
        with pytest.raises(DimensionError):
            AffineLayer(np.zeros(3), np.zeros(3))

    def test_non_finite_rejected(self):
        w = np.zeros((2, 2))
        w[0, 0] = np.inf
        with pytest.raises(ModelError):
            AffineLayer(w, np.zeros(2))

    def test_arrays_read_only(self):
        layer = AffineLayer(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            layer.weight[0, 0] = 1.0

    def test_equality_by_value(self):
        a = AffineLayer([[1.0, 2.0]], [3.0])
        b = AffineLayer([[1.0, 2.0]], [3.0])
        c = AffineLayer([[1.0, 2.5]], [3.0])
        assert a == b and a != c


class TestNetworkSpec:
    def test_properties(self, relu_net):
        assert relu_net.input_dim == 4
        assert relu_net.num_classes == 3
        assert relu_net.num_layers == 2
        assert relu_net.layer_dims == (8, 6)

    def test_needs_a_hidden_layer(self):
        with pytest.raises(DimensionError):
            NetworkSpec((), np.zeros((2, 2)), np.zeros(2))

    def test_dimension_chain_validated(self):
        l1 = (AffineLayer(np.zeros((3, 4)), np.zeros(3)), relu())
        l2 = (AffineLayer(np.zeros((2, 5)), np.zeros(2)), relu())  # expects 5, gets 3
        with pytest.raises(DimensionError):
            NetworkSpec((l1, l2), np.zeros((2, 2)), np.zeros(2))

    def test_head_dim_validated(self):
        l1 = (AffineLayer(np.zeros((3, 4)), np.zeros(3)), relu())
        with pytest.raises(DimensionError):
            NetworkSpec((l1,), np.zeros((2, 7)), np.zeros(2))

    def test_at_least_two_classes(self):
        l1 = (AffineLayer(np.zeros((3, 4)), np.zeros(3)), relu())
        with pytest.raises(DimensionError):
            NetworkSpec((l1,), np.zeros((1, 3)), np.zeros(1))

    def test_dict_roundtrip(self, relu_net):
        assert NetworkSpec.from_dict(relu_net.to_dict()) == relu_net

    def test_from_dict_missing_field(self, relu_net):
        doc = relu_net.to_dict()
        del doc["head"]
        with pytest.raises(ModelFormatError):
            NetworkSpec.from_dict(doc)

    def test_from_dict_declared_dims_checked(self, relu_net):
        doc = relu_net.to_dict()
        doc["input_dim"] = 99
        with pytest.raises(DimensionError):
            NetworkSpec.from_dict(doc)

    def test_from_dict_bad_activation_is_model_error(self, relu_net):
        doc = relu_net.to_dict()
        doc["layers"][0]["activation"] = {"kind": "swish"}
        with pytest.raises(UnknownActivationError):
            NetworkSpec.from_dict(doc)


class TestForward:
    def test_matches_manual_computation(self):
        net = NetworkSpec(
            ((AffineLayer([[1.0, -1.0], [0.0, 2.0]], [0.5, -0.5]), relu()),),
            [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            [0.0, 0.1, -0.2],
        )
        x = np.array([1.0, 2.0])
        z = np.array([1.0 - 2.0 + 0.5, 4.0 - 0.5])
        a = np.maximum(z, 0.0)
        logits = np.array([a[0], a[1] + 0.1, a[0] + a[1] - 0.2])
        trace = forward(net, x)
        np.testing.assert_allclose(trace.pre_activations[0], z)
        np.testing.assert_allclose(trace.logits, logits)
        assert trace.predicted_class == int(np.argmax(logits))

    def test_argmax_tie_breaks_to_lowest_index(self):
        net = NetworkSpec(
            ((AffineLayer(np.zeros((2, 2)), np.zeros(2)), relu()),),
            np.zeros((3, 2)),
            np.zeros(3),
        )
        assert forward(net, [1.0, 1.0]).predicted_class == 0

    def test_wrong_input_shape(self, relu_net):
        with pytest.raises(DimensionError):
            forward(relu_net, np.zeros(5))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_forward_deterministic(self, seed):
        net = small_relu_net()
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(net.input_dim)
        t1, t2 = forward(net, x), forward(net, x)
        np.testing.assert_array_equal(t1.logits, t2.logits)


class TestModelFiles:
    def test_save_load_roundtrip(self, relu_net, tmp_path):
        path = tmp_path / "net.json"
        save_model(relu_net, path)
        assert load_model(path) == relu_net

    def test_load_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{ nope")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_saved_file_is_plain_json(self, relu_net, tmp_path):
        path = tmp_path / "net.json"
        save_model(relu_net, path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"input_dim", "num_classes", "layers", "head"}
