"""Numerical verification of the layerwise noise decomposition.

For homogeneous 1-Lipschitz activations (relu, leaky_relu) a perturbed
activation splits as a_l~ = sigma * v_l + r_l, where v_l depends only on
the weights and the noise draw, and r_l is uniformly bounded over the
input ball by a closed-form constant B_l built from layer operator norms.
At the logits this yields an input-independent prediction once sigma
exceeds 2C/delta for a fixed draw. This module constructs every piece and
audits the bounds by sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import DimensionError, ModelError, NetworkSpec, forward
from .perturb import forward_with_activation_noise
from .rng import substream


class UnsupportedActivationError(ModelError):
    """Raised when theory checks meet a non-homogeneous activation."""


def _require_homogeneous(net: NetworkSpec):
    for i, (_, act) in enumerate(net.layers, start=1):
        if not act.homogeneous:
            raise UnsupportedActivationError(
                f"layer {i} uses {act.kind}; decomposition needs a positively "
                "homogeneous, 1-Lipschitz activation (relu or leaky_relu)"
            )


def spectral_norm(w: np.ndarray, tol: float = 1e-8, max_iter: int = 10000) -> float:
    """Largest singular value by power iteration on W^T W.

    Deterministic start vector; iterates until the estimate moves by less
    than tol relative or the iteration cap is hit.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[1]
    # deterministic, generically non-orthogonal start
    v = 1.0 + np.arange(n) / max(n, 1)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v_new = w.T @ (u / nu)
        sigma_new = np.linalg.norm(v_new)
        v = v_new / sigma_new
        if abs(sigma_new - sigma) <= tol * max(sigma_new, 1e-300):
            return float(sigma_new)
        sigma = sigma_new
    return float(sigma)


@dataclass(frozen=True)
class NormProfile:
    """Layer operator norms and bias norms feeding the residual bound."""

    layer_operator_norms: tuple  # M_l = ||W_l||_2
    bias_norms: tuple  # ||b_l||_2
    head_row_norm: float  # max_i ||U_i||_2
    head_bias_inf: float  # ||c||_inf
    radius: float  # input-ball radius R

    @classmethod
    def of(cls, net: NetworkSpec, radius: float) -> "NormProfile":
        return cls(
            tuple(spectral_norm(affine.weight) for affine, _ in net.layers),
            tuple(float(np.linalg.norm(affine.bias)) for affine, _ in net.layers),
            float(np.max(np.linalg.norm(net.head_weight, axis=1))),
            float(np.max(np.abs(net.head_bias))) if net.head_bias.size else 0.0,
            float(radius),
        )


def compute_v(net: NetworkSpec, noise_draw: list) -> list:
    """Input-independent noise component: v_1 = xi_1, v_l = phi(W_l v_{l-1}) + xi_l."""
    _require_homogeneous(net)
    if len(noise_draw) != net.num_layers:
        raise DimensionError("noise draw length does not match layer count")
    v = []
    prev = None
    for (affine, act), xi in zip(net.layers, noise_draw):
        if prev is None:
            cur = np.asarray(xi, dtype=np.float64)
        else:
            cur = act(affine.weight @ prev) + xi
        v.append(cur)
        prev = cur
    return v


def compute_residual(net: NetworkSpec, x, sigma: float, noise_draw: list) -> list:
    """r_l = a_l~ - sigma * v_l, with a_l~ evaluated on the identical draw."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    v = compute_v(net, noise_draw)
    trace = forward_with_activation_noise(net, x, sigma, noise_draw)
    return [a - sigma * vl for a, vl in zip(trace.post_activations, v)]


def residual_bound(profile: NormProfile) -> list:
    """Closed-form B_l = (prod_j M_j) R + sum_k (prod_{j>k} M_j) b_k* + b_l*."""
    m = profile.layer_operator_norms
    b = profile.bias_norms
    bounds = []
    for ell in range(1, len(m) + 1):
        total = profile.radius * math.prod(m[:ell])
        for k in range(1, ell):
            total += math.prod(m[k:ell]) * b[k - 1]
        total += b[ell - 1]
        bounds.append(total)
    return bounds


def residual_bound_recursive(profile: NormProfile) -> list:
    """Unrolled recursion B_l = M_l B_{l-1} + b_l*, cross-check for the closed form."""
    m = profile.layer_operator_norms
    b = profile.bias_norms
    bounds = []
    prev = profile.radius
    for ml, bl in zip(m, b):
        prev = ml * prev + bl
        bounds.append(prev)
    return bounds


def logit_error_bound(profile: NormProfile) -> float:
    """C = (max row l2 norm of U) * B_L + ||c||_inf.

    The row-norm pairing makes ||U r_L||_inf <= head_row_norm * ||r_L||_2
    rigorous against the l2 residual bound.
    """
    return profile.head_row_norm * residual_bound(profile)[-1] + profile.head_bias_inf


def margin_threshold(net: NetworkSpec, noise_draw: list, profile: NormProfile):
    """Top-1 margin of U v_L, its argmax, and the stabilization threshold.

    Returns (delta, j_star, sigma_star); sigma_star = 2C/delta, or +inf
    when the margin is not strictly positive.
    """
    v = compute_v(net, noise_draw)
    head_logits = net.head_weight @ v[-1]
    order = np.argsort(head_logits)[::-1]
    j_star = int(order[0])
    delta = float(head_logits[order[0]] - head_logits[order[1]])
    c = logit_error_bound(profile)
    sigma_star = 2.0 * c / delta if delta > 0 else math.inf
    return delta, j_star, sigma_star


@dataclass
class StabilizationReport:
    """Outcome of the fixed-draw large-noise argmax check."""

    j_star: int
    delta: float
    sigma_star: float
    sigma: float
    total: int
    violations: list = field(default_factory=list)  # (input index, logit gap)
    refused: bool = False

    @property
    def passed(self) -> bool:
        return not self.refused and not self.violations


def verify_stabilization(
    net: NetworkSpec, inputs, noise_draw: list, sigma: float, radius: float
) -> StabilizationReport:
    """Check argmax s(x; sigma) == j_star for every input in the R-ball.

    Refuses (rather than guessing) when the draw's margin is not positive.
    Violations are report entries, not exceptions.
    """
    profile = NormProfile.of(net, radius)
    delta, j_star, sigma_star = margin_threshold(net, noise_draw, profile)
    report = StabilizationReport(j_star, delta, sigma_star, sigma, len(inputs))
    if not delta > 0:
        report.refused = True
        return report
    for idx, x in enumerate(inputs):
        trace = forward_with_activation_noise(net, x, sigma, noise_draw)
        if trace.predicted_class != j_star:
            top = np.sort(trace.logits)[::-1]
            report.violations.append((idx, float(top[0] - trace.logits[j_star])))
    return report


def relu_lemma_check(a, d, sigma: float):
    """Delta = relu(sigma a + d) - sigma relu(a); checks ||Delta||_2 <= ||d||_2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    delta = np.maximum(sigma * a + d, 0.0) - sigma * np.maximum(a, 0.0)
    holds = np.linalg.norm(delta) <= np.linalg.norm(d) + 1e-9
    return delta, bool(holds)


def _prefix_activation(net: NetworkSpec, x, layer: int) -> np.ndarray:
    return forward(net, x).post_activations[layer - 1]


def input_as_special_case(net: NetworkSpec, x, epsilon, layer: int):
    """Compare the exact activation shift from an input perturbation with
    its first-order (Jacobian) image.

    Returns (delta_exact, delta_linear, gap). The Jacobian of the prefix
    network is taken by central finite differences with step
    h = 1e-5 * (1 + ||x||_inf).
    """
    x = np.asarray(x, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if not 1 <= layer <= net.num_layers:
        raise DimensionError(f"layer {layer} out of range")
    if epsilon.shape != x.shape:
        raise DimensionError("epsilon must match the input shape")
    base = _prefix_activation(net, x, layer)
    delta_exact = _prefix_activation(net, x + epsilon, layer) - base
    h = 1e-5 * (1.0 + (float(np.max(np.abs(x))) if x.size else 0.0))
    jac = np.empty((base.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        jac[:, j] = (
            _prefix_activation(net, x + e, layer) - _prefix_activation(net, x - e, layer)
        ) / (2.0 * h)
    delta_linear = jac @ epsilon
    gap = float(np.linalg.norm(delta_exact - delta_linear))
    return delta_exact, delta_linear, gap


@dataclass
class CheckResult:
    name: str
    samples: int
    max_violation: float  # worst observed margin; <= 0 means the bound held
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "samples": self.samples,
            "max_violation": self.max_violation,
            "passed": self.passed,
        }


@dataclass
class VerificationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _sample_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return radius * rng.uniform() ** (1.0 / dim) * direction


def run_verification(
    net: NetworkSpec,
    radius: float,
    num_inputs: int = 10,
    sigmas=(0.0, 0.01, 1.0, 100.0),
    seed: int = 0,
    num_draws: int = 5,
    lemma_samples: int = 10000,
) -> VerificationReport:
    """Full audit of the decomposition against one network.

    Checks, each by sampling: the exact split a~ = sigma v + r, the
    per-layer residual bound, the logit error bound, the closed-form vs
    recursive bound consistency, the relu residual lemma, and fixed-draw
    stabilization at sigma = 2 sigma*.
    """
    _require_homogeneous(net)
    profile = NormProfile.of(net, radius)
    bounds = residual_bound(profile)
    c_bound = logit_error_bound(profile)

    rng = substream(seed, "verify")
    inputs = [_sample_ball(rng, net.input_dim, radius) for _ in range(num_inputs)]
    draws = [
        [rng.standard_normal(dim) for dim in net.layer_dims] for _ in range(num_draws)
    ]

    decomp_worst = -math.inf
    resid_worst = -math.inf
    logit_worst = -math.inf
    n_decomp = 0
    for draw in draws:
        v = compute_v(net, draw)
        for x in inputs:
            for sigma in sigmas:
                trace = forward_with_activation_noise(net, x, sigma, draw)
                r = [a - sigma * vl for a, vl in zip(trace.post_activations, v)]
                recon = max(
                    float(np.max(np.abs(a - (sigma * vl + rl))))
                    for a, vl, rl in zip(trace.post_activations, v, r)
                )
                decomp_worst = max(decomp_worst, recon - 1e-9)
                resid_worst = max(
                    resid_worst,
                    max(
                        float(np.linalg.norm(rl)) - bl - 1e-6 for rl, bl in zip(r, bounds)
                    ),
                )
                e = net.head_weight @ r[-1] + net.head_bias
                logit_worst = max(logit_worst, float(np.max(np.abs(e))) - c_bound - 1e-6)
                n_decomp += 1

    closed = np.array(bounds)
    recursive = np.array(residual_bound_recursive(profile))
    bound_gap = float(np.max(np.abs(closed - recursive) / np.maximum(np.abs(closed), 1e-300)))

    lemma_worst = -math.inf
    lemma_rng = substream(seed, "lemma")
    for _ in range(lemma_samples):
        dim = int(lemma_rng.integers(1, 33))
        a = lemma_rng.standard_normal(dim) * 10.0 ** lemma_rng.uniform(-2, 2)
        d = lemma_rng.standard_normal(dim) * 10.0 ** lemma_rng.uniform(-2, 2)
        s = 10.0 ** lemma_rng.uniform(-3, 3)
        delta = np.maximum(s * a + d, 0.0) - s * np.maximum(a, 0.0)
        lemma_worst = max(
            lemma_worst, float(np.linalg.norm(delta) - np.linalg.norm(d)) - 1e-9
        )

    stab_total = 0
    stab_violations = 0
    stab_checked = 0
    for draw in draws:
        delta, j_star, sigma_star = margin_threshold(net, draw, profile)
        if not delta > 0 or not math.isfinite(sigma_star):
            continue
        report = verify_stabilization(net, inputs, draw, 2.0 * sigma_star, radius)
        stab_total += report.total
        stab_violations += len(report.violations)
        stab_checked += 1

    checks = [
        CheckResult("decomposition_identity", n_decomp, decomp_worst, decomp_worst <= 0),
        CheckResult("residual_bound", n_decomp, resid_worst, resid_worst <= 0),
        CheckResult("logit_error_bound", n_decomp, logit_worst, logit_worst <= 0),
        CheckResult("bound_closed_vs_recursive", len(bounds), bound_gap - 1e-9, bound_gap <= 1e-9),
        CheckResult("relu_residual_lemma", lemma_samples, lemma_worst, lemma_worst <= 0),
        CheckResult(
            "fixed_draw_stabilization",
            stab_total,
            float(stab_violations),
            stab_checked > 0 and stab_violations == 0,
        ),
    ]
    return VerificationReport(checks)
