"""Scalar and distributional summaries of probing runs.

Escape noise, normalized entropy, KL/JS divergences, stationarity
diagnostics and target-class mass. All divergence functions operate on
empirical output distributions; KL applies additive smoothing because
empirical cells can be exactly zero, JS needs none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import NetworkSpec, forward
from .perturb import NoiseConfig, OutputDistribution, estimate_distribution

NOT_ESCAPED = None


@dataclass(frozen=True)
class SigmaGrid:
    """Strictly increasing list of non-negative noise magnitudes."""

    values: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValueError("sigma grid must be nonempty")
        if values[0] < 0 or not all(math.isfinite(v) for v in values):
            raise ValueError("sigma grid values must be finite and non-negative")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("sigma grid must be strictly increasing")
        object.__setattr__(self, "values", values)

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    @classmethod
    def geometric(
        cls, sigma_min: float, ratio: float, count: int, include_zero: bool = True
    ) -> "SigmaGrid":
        """{0} followed by sigma_min * ratio**i for i in range(count)."""
        if sigma_min <= 0 or ratio <= 1 or count < 1:
            raise ValueError("need sigma_min > 0, ratio > 1, count >= 1")
        values = [sigma_min * ratio**i for i in range(count)]
        if include_zero:
            values = [0.0] + values
        return cls(tuple(values))


@dataclass
class EscapeNoiseResult:
    """Escape-noise sweep outcome for a single input."""

    input_id: str
    k_star: int
    escape_sigma: float | None  # None = NOT_ESCAPED
    threshold: float
    grid: SigmaGrid
    curve: list  # (sigma, P_hat(k_star; sigma)) pairs, full grid

    @property
    def escaped(self) -> bool:
        return self.escape_sigma is not None


def normalized_entropy(P: OutputDistribution) -> float:
    """Shannon entropy over classes divided by log(num_classes), in [0, 1]."""
    p = np.asarray(P.probs, dtype=np.float64)
    if len(p) < 2:
        raise ValueError("normalized entropy needs at least 2 classes")
    nz = p[p > 0.0]
    h = -float(np.sum(nz * np.log(nz)))
    return h / math.log(len(p))


def _check_same_classes(P: OutputDistribution, Q: OutputDistribution):
    if P.num_classes != Q.num_classes:
        raise ValueError(
            f"distributions live on different class sets ({P.num_classes} vs {Q.num_classes})"
        )


def _kl_raw(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def kl_divergence(P: OutputDistribution, Q: OutputDistribution) -> float:
    """KL(P || Q) with additive smoothing 1/(10 T) per cell on each side.

    Each empirical distribution is smoothed with its own trial count and
    renormalized before the divergence is taken, so exact zeros never
    produce infinities and KL(P, P) stays exactly 0.
    """
    _check_same_classes(P, Q)
    p = _smooth(P)
    q = _smooth(Q)
    return _kl_raw(p, q)


def _smooth(P: OutputDistribution) -> np.ndarray:
    eps = 1.0 / (10.0 * P.trials)
    p = np.asarray(P.probs, dtype=np.float64) + eps
    return p / p.sum()


def js_divergence(P: OutputDistribution, Q: OutputDistribution) -> float:
    """Jensen-Shannon divergence (natural log), finite by construction."""
    _check_same_classes(P, Q)
    p = np.asarray(P.probs, dtype=np.float64)
    q = np.asarray(Q.probs, dtype=np.float64)
    m = 0.5 * (p + q)
    return 0.5 * _kl_raw(p, m) + 0.5 * _kl_raw(q, m)


def target_mass(P: OutputDistribution, target: int) -> float:
    """Empirical probability assigned to one class."""
    if not 0 <= target < P.num_classes:
        raise IndexError(f"target class {target} out of range for {P.num_classes} classes")
    return float(P.probs[target])


def escape_noise(
    net: NetworkSpec,
    x,
    grid: SigmaGrid,
    cfg_template: NoiseConfig,
    T: int,
    threshold: float = 0.5,
    input_id: str = "",
) -> EscapeNoiseResult:
    """Smallest grid sigma at which the deterministic prediction loses mass.

    Sweeps the grid in ascending order and returns the first sigma with
    P_hat(k_star; sigma) <= threshold (and < 1, so threshold=1.0 means
    "first sigma where any trial flips"). The full curve is always
    recorded so other estimators can be applied afterwards.
    """
    k_star = forward(net, x).predicted_class
    curve = []
    escape_sigma = NOT_ESCAPED
    for sigma in grid:
        dist = estimate_distribution(net, x, cfg_template.with_sigma(sigma), T, input_id)
        p = float(dist.probs[k_star])
        curve.append((sigma, p))
        if escape_sigma is NOT_ESCAPED and p <= threshold and p < 1.0:
            escape_sigma = sigma
    return EscapeNoiseResult(input_id, k_star, escape_sigma, threshold, grid, curve)


@dataclass
class StationarityReport:
    """Three curves over the sigma grid: mean pairwise JS across inputs,
    JS between input-averaged distributions at consecutive sigmas, and
    mean normalized entropy."""

    grid: SigmaGrid
    mean_pairwise_js: list
    consecutive_js: list  # length len(grid) - 1
    mean_entropy: list
    per_sigma_mean_probs: list = field(default_factory=list)


def stationarity_report(
    net: NetworkSpec, inputs, grid: SigmaGrid, cfg_template: NoiseConfig, T: int
) -> StationarityReport:
    if len(inputs) < 2:
        raise ValueError("stationarity needs at least 2 inputs")
    pairwise = []
    entropies = []
    mean_probs = []
    for sigma in grid:
        dists = [
            estimate_distribution(net, x, cfg_template.with_sigma(sigma), T, str(i))
            for i, x in enumerate(inputs)
        ]
        js_vals = [
            js_divergence(dists[i], dists[j])
            for i in range(len(dists))
            for j in range(i + 1, len(dists))
        ]
        pairwise.append(float(np.mean(js_vals)))
        entropies.append(float(np.mean([normalized_entropy(d) for d in dists])))
        mean_probs.append(np.mean([d.probs for d in dists], axis=0))
    consecutive = []
    for i in range(len(mean_probs) - 1):
        a = OutputDistribution(mean_probs[i], T * len(inputs), grid.values[i])
        b = OutputDistribution(mean_probs[i + 1], T * len(inputs), grid.values[i + 1])
        consecutive.append(js_divergence(a, b))
    return StationarityReport(grid, pairwise, consecutive, entropies, mean_probs)
