"""Decomposition identity, residual/logit bounds, lemma and stabilization."""

import math

import numpy as np
import pytest

from apexprobe.model import AffineLayer, NetworkSpec, gelu, leaky_relu, relu
from apexprobe.rng import substream
from apexprobe.theory import (
    NormProfile,
    UnsupportedActivationError,
    compute_residual,
    compute_v,
    input_as_special_case,
    logit_error_bound,
    margin_threshold,
    relu_lemma_check,
    residual_bound,
    residual_bound_recursive,
    run_verification,
    spectral_norm,
    verify_stabilization,
)
from conftest import random_net, small_relu_net


class TestSpectralNorm:
    def test_diagonal(self):
        assert spectral_norm(np.diag([3.0, -7.0, 1.0])) == pytest.approx(7.0, rel=1e-7)

    def test_matches_svd(self, rng):
        w = rng.standard_normal((9, 5))
        assert spectral_norm(w) == pytest.approx(np.linalg.svd(w, compute_uv=False)[0], rel=1e-7)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 4))) == 0.0


class TestComputeV:
    def test_hand_recursion_two_layers(self):
        # W2 = I: v1 = xi1, v2 = relu(v1) + xi2
        net = NetworkSpec(
            (
                (AffineLayer(np.eye(3) * 2.0, np.ones(3)), relu()),
                (AffineLayer(np.eye(3), np.zeros(3)), relu()),
            ),
            np.ones((2, 3)),
            np.zeros(2),
        )
        xi1 = np.array([1.0, -2.0, 0.5])
        xi2 = np.array([0.0, 3.0, -1.0])
        v = compute_v(net, [xi1, xi2])
        np.testing.assert_array_equal(v[0], xi1)
        np.testing.assert_array_equal(v[1], np.maximum(xi1, 0.0) + xi2)

    def test_independent_of_input_and_bias(self):
        # v must ignore biases entirely (they live in the residual)
        rng = substream(0, "v_test")
        net_a = random_net(rng, 2, [6, 5], 4, 3)
        shifted_layers = tuple(
            (AffineLayer(aff.weight, aff.bias + 10.0), act) for aff, act in net_a.layers
        )
        net_b = NetworkSpec(shifted_layers, net_a.head_weight, net_a.head_bias)
        draw = [rng.standard_normal(d) for d in net_a.layer_dims]
        for va, vb in zip(compute_v(net_a, draw), compute_v(net_b, draw)):
            np.testing.assert_array_equal(va, vb)

    def test_rejects_gelu(self):
        rng = substream(0, "g")
        net = random_net(rng, 1, [4], 3, 2, activation=gelu())
        with pytest.raises(UnsupportedActivationError):
            compute_v(net, [np.zeros(4)])


class TestDecompositionIdentity:
    @pytest.mark.parametrize("sigma", [0.0, 0.01, 1.0, 100.0])
    @pytest.mark.parametrize("act", [relu(), leaky_relu(0.1)])
    def test_residual_reconstructs_exactly(self, sigma, act, rng):
        from apexprobe.perturb import forward_with_activation_noise

        net = random_net(rng, 3, [10, 8, 6], 5, 4, activation=act)
        x = rng.standard_normal(5)
        draw = [rng.standard_normal(d) for d in net.layer_dims]
        v = compute_v(net, draw)
        r = compute_residual(net, x, sigma, draw)
        trace = forward_with_activation_noise(net, x, sigma, draw)
        for a, vl, rl in zip(trace.post_activations, v, r):
            np.testing.assert_allclose(a, sigma * vl + rl, atol=1e-9, rtol=0)

    def test_negative_sigma_rejected(self, relu_net):
        with pytest.raises(ValueError):
            compute_residual(relu_net, np.zeros(4), -1.0, [np.zeros(8), np.zeros(6)])


class TestResidualBounds:
    def test_hand_oracle(self):
        # M = (2, 3), b* = (1, 1), R = 1:
        # B1 = 2*1 + 1 = 3;  B2 = 3*3 + 1 = 10
        profile = NormProfile((2.0, 3.0), (1.0, 1.0), 1.0, 0.0, 1.0)
        assert residual_bound(profile) == pytest.approx([3.0, 10.0])
        assert residual_bound_recursive(profile) == pytest.approx([3.0, 10.0])

    def test_closed_form_matches_recursion(self, rng):
        m = tuple(rng.uniform(0.1, 4.0, 5))
        b = tuple(rng.uniform(0.0, 2.0, 5))
        profile = NormProfile(m, b, 1.0, 0.0, rng.uniform(0.1, 3.0))
        np.testing.assert_allclose(
            residual_bound(profile), residual_bound_recursive(profile), rtol=1e-12
        )

    def test_logit_bound_hand_oracle(self):
        profile = NormProfile((2.0,), (1.0,), head_row_norm=0.5, head_bias_inf=0.3, radius=1.0)
        # B1 = 3, C = 0.5 * 3 + 0.3
        assert logit_error_bound(profile) == pytest.approx(1.8)

    def test_residuals_within_bounds_by_sampling(self, rng):
        net = random_net(rng, 2, [12, 9], 6, 4)
        radius = 2.0
        profile = NormProfile.of(net, radius)
        bounds = residual_bound(profile)
        c = logit_error_bound(profile)
        for _ in range(20):
            x = rng.standard_normal(6)
            x *= radius * rng.uniform() ** (1 / 6) / np.linalg.norm(x)
            draw = [rng.standard_normal(d) for d in net.layer_dims]
            for sigma in (0.0, 0.5, 10.0):
                r = compute_residual(net, x, sigma, draw)
                for rl, bl in zip(r, bounds):
                    assert np.linalg.norm(rl) <= bl + 1e-6
                e = net.head_weight @ r[-1] + net.head_bias
                assert np.max(np.abs(e)) <= c + 1e-6


class TestReluLemma:
    def test_hand_case(self):
        # a = [1], d = [-5], sigma = 1: Delta = relu(-4) - relu(1) = -1
        delta, holds = relu_lemma_check([1.0], [-5.0], 1.0)
        np.testing.assert_array_equal(delta, [-1.0])
        assert holds

    def test_random_sampling(self):
        rng = substream(0, "lemma_test")
        for _ in range(2000):
            dim = int(rng.integers(1, 16))
            a = rng.standard_normal(dim) * 10.0 ** rng.uniform(-2, 2)
            d = rng.standard_normal(dim) * 10.0 ** rng.uniform(-2, 2)
            s = 10.0 ** rng.uniform(-3, 3)
            _, holds = relu_lemma_check(a, d, s)
            assert holds

    def test_requires_positive_sigma(self):
        with pytest.raises(ValueError):
            relu_lemma_check([1.0], [1.0], 0.0)


class TestMarginThreshold:
    def test_infinite_when_margin_not_positive(self):
        # zero head: every logit of U v_L ties, delta = 0
        net = NetworkSpec(
            ((AffineLayer(np.eye(2), np.zeros(2)), relu()),),
            np.zeros((2, 2)),
            np.zeros(2),
        )
        profile = NormProfile.of(net, 1.0)
        delta, _, sigma_star = margin_threshold(net, [np.ones(2)], profile)
        assert delta == 0.0 and sigma_star == math.inf

    def test_threshold_formula(self, rng):
        net = random_net(rng, 2, [8, 6], 4, 3)
        profile = NormProfile.of(net, 1.5)
        draw = [rng.standard_normal(d) for d in net.layer_dims]
        delta, j_star, sigma_star = margin_threshold(net, draw, profile)
        if delta > 0:
            assert sigma_star == pytest.approx(2.0 * logit_error_bound(profile) / delta)
        v = compute_v(net, draw)
        assert j_star == int(np.argmax(net.head_weight @ v[-1]))


class TestStabilization:
    def test_holds_above_threshold(self, rng):
        net = random_net(rng, 2, [10, 8], 5, 4)
        radius = 2.0
        profile = NormProfile.of(net, radius)
        draw = [rng.standard_normal(d) for d in net.layer_dims]
        delta, _, sigma_star = margin_threshold(net, draw, profile)
        assert delta > 0, "fixture draw should have a positive margin"
        inputs = []
        for _ in range(30):
            x = rng.standard_normal(5)
            inputs.append(x * radius * rng.uniform() ** 0.2 / np.linalg.norm(x))
        report = verify_stabilization(net, inputs, draw, 2.0 * sigma_star, radius)
        assert report.passed and not report.refused
        assert report.total == 30 and report.violations == []

    def test_refuses_on_nonpositive_margin(self):
        net = NetworkSpec(
            ((AffineLayer(np.eye(2), np.zeros(2)), relu()),),
            np.zeros((2, 2)),
            np.zeros(2),
        )
        report = verify_stabilization(net, [np.zeros(2)], [np.ones(2)], 100.0, 1.0)
        assert report.refused and not report.passed


class TestInputAsSpecialCase:
    def test_linear_region_is_exact(self):
        # strictly positive pre-activations: the prefix map is locally affine,
        # so the Jacobian image matches the exact shift almost exactly
        net = NetworkSpec(
            ((AffineLayer(np.eye(3) * 0.5, np.full(3, 10.0)), relu()),),
            np.eye(3),
            np.zeros(3),
        )
        x = np.array([1.0, 2.0, 3.0])
        eps = np.array([0.01, -0.02, 0.005])
        _, _, gap = input_as_special_case(net, x, eps, layer=1)
        assert gap < 1e-8

    def test_gelu_gap_shrinks_quadratically(self, rng):
        net = random_net(rng, 1, [6], 4, 3, activation=gelu())
        x = rng.standard_normal(4)
        direction = rng.standard_normal(4)
        direction /= np.linalg.norm(direction)
        gaps = []
        for scale in (0.1, 0.05, 0.025):
            _, _, gap = input_as_special_case(net, x, scale * direction, layer=1)
            gaps.append(gap)
        # halving epsilon should shrink the gap by roughly 4x
        assert gaps[1] < 0.35 * gaps[0]
        assert gaps[2] < 0.35 * gaps[1]

    def test_layer_out_of_range(self, relu_net):
        with pytest.raises(Exception):
            input_as_special_case(relu_net, np.zeros(4), np.zeros(4), layer=5)


class TestRunVerification:
    def test_all_checks_pass_on_random_net(self):
        net = small_relu_net(3)
        report = run_verification(net, radius=2.0, num_inputs=5, num_draws=3, lemma_samples=500)
        names = [c.name for c in report.checks]
        assert names == [
            "decomposition_identity",
            "residual_bound",
            "logit_error_bound",
            "bound_closed_vs_recursive",
            "relu_residual_lemma",
            "fixed_draw_stabilization",
        ]
        assert report.passed, report.to_json()

    def test_report_json_roundtrip(self):
        net = small_relu_net(4)
        report = run_verification(net, radius=1.0, num_inputs=2, num_draws=1, lemma_samples=10)
        import json

        doc = json.loads(report.to_json())
        assert doc["passed"] == report.passed
        assert len(doc["checks"]) == 6

    def test_rejects_gelu_networks(self, rng):
        net = random_net(rng, 1, [4], 3, 2, activation=gelu())
        with pytest.raises(UnsupportedActivationError):
            run_verification(net, radius=1.0)
