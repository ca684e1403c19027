"""Stochastic forward passes and Monte Carlo output-distribution estimation.

Three perturbation sites are supported: post-activation vectors, the raw
input, and the parameters (weights, biases and head). Three zero-mean noise
families share a common standard-deviation parameterization so that sigma
means the same thing everywhere.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import DimensionError, ForwardTrace, NetworkSpec, forward
from .rng import substream

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
UNIFORM = "uniform"
FAMILIES = (GAUSSIAN, LAPLACE, UNIFORM)

SITE_INPUT = "input"
SITE_ACTIVATIONS = "activations"
SITE_PARAMETERS = "parameters"


@dataclass(frozen=True)
class PerturbSite:
    """Where noise enters: input (with optional clipping), selected
    post-activation layers (None = all), or every parameter entry."""

    site: str
    layers: frozenset | None = None  # 1-based layer indices; None = ALL
    clip: tuple | None = None  # (lo, hi) for the input site

    def __post_init__(self):
        if self.site not in (SITE_INPUT, SITE_ACTIVATIONS, SITE_PARAMETERS):
            raise ValueError(f"unknown perturbation site: {self.site!r}")
        if self.layers is not None:
            if self.site != SITE_ACTIVATIONS:
                raise ValueError("layer selection only applies to the activations site")
            layers = frozenset(int(i) for i in self.layers)
            if any(i < 1 for i in layers):
                raise ValueError("activation layer indices are 1-based")
            object.__setattr__(self, "layers", layers)
        if self.clip is not None:
            if self.site != SITE_INPUT:
                raise ValueError("clipping only applies to the input site")
            lo, hi = self.clip
            if not lo < hi:
                raise ValueError(f"clip range must satisfy lo < hi, got {self.clip}")
            object.__setattr__(self, "clip", (float(lo), float(hi)))

    @classmethod
    def input(cls, clip=None) -> "PerturbSite":
        return cls(SITE_INPUT, clip=clip)

    @classmethod
    def activations(cls, layers=None) -> "PerturbSite":
        return cls(SITE_ACTIVATIONS, layers=None if layers is None else frozenset(layers))

    @classmethod
    def parameters(cls) -> "PerturbSite":
        return cls(SITE_PARAMETERS)

    def selects(self, layer_index: int) -> bool:
        return self.layers is None or layer_index in self.layers


@dataclass(frozen=True)
class NoiseConfig:
    """Fully determines a stochastic forward pass together with the trial index."""

    site: PerturbSite
    family: str
    sigma: float
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family: {self.family!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    def with_sigma(self, sigma: float) -> "NoiseConfig":
        return NoiseConfig(self.site, self.family, sigma, self.seed)


@dataclass
class OutputDistribution:
    """Empirical per-class prediction frequencies over T Monte Carlo trials."""

    probs: np.ndarray
    trials: int
    sigma: float
    input_id: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")

    @property
    def num_classes(self) -> int:
        return len(self.probs)


def sample_noise(family: str, sigma: float, dim: int, stream: np.random.Generator) -> np.ndarray:
    """Draw dim i.i.d. zero-mean entries with standard deviation sigma.

    Gaussian uses std sigma directly, Laplace uses scale sigma/sqrt(2),
    uniform is supported on [-sigma*sqrt(3), sigma*sqrt(3)].
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return np.zeros(dim)
    if family == GAUSSIAN:
        return sigma * stream.standard_normal(dim)
    if family == LAPLACE:
        return stream.laplace(0.0, sigma / math.sqrt(2.0), dim)
    if family == UNIFORM:
        bound = sigma * math.sqrt(3.0)
        return stream.uniform(-bound, bound, dim)
    raise ValueError(f"unknown noise family: {family!r}")


def draw_activation_noise(net: NetworkSpec, cfg: NoiseConfig, trial: int) -> list:
    """Unit-scale noise vectors, one per hidden layer, for one trial.

    Layers the site does not select get zero vectors so the draw always has
    one entry per layer. Scaling by sigma happens at injection time.
    """
    draw = []
    for i, dim in enumerate(net.layer_dims, start=1):
        if cfg.site.site == SITE_ACTIVATIONS and cfg.site.selects(i):
            stream = substream(cfg.seed, trial, "act", i)
            draw.append(sample_noise(cfg.family, 1.0, dim, stream))
        else:
            draw.append(np.zeros(dim))
    return draw


def forward_with_activation_noise(
    net: NetworkSpec, x, sigma: float, noise_draw: list
) -> ForwardTrace:
    """Forward pass with a fixed per-layer noise draw added post-activation.

    The draw holds unit-scale vectors; each perturbed activation is
    a_l = phi(z_l) + sigma * noise_draw[l].
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimensionError(f"input shape {x.shape} != ({net.input_dim},)")
    if len(noise_draw) != net.num_layers:
        raise DimensionError(
            f"noise draw has {len(noise_draw)} entries for {net.num_layers} layers"
        )
    trace = ForwardTrace()
    a = x
    for (affine, act), xi in zip(net.layers, noise_draw):
        if xi.shape != (affine.out_dim,):
            raise DimensionError(
                f"noise vector shape {xi.shape} does not match layer width {affine.out_dim}"
            )
        z = affine.weight @ a + affine.bias
        a = act(z)
        if sigma != 0.0:
            a = a + sigma * xi
        trace.pre_activations.append(z)
        trace.post_activations.append(a)
    trace.logits = net.head_weight @ a + net.head_bias
    trace.predicted_class = int(np.argmax(trace.logits))
    return trace


def _perturbed_parameters(net: NetworkSpec, cfg: NoiseConfig, trial: int) -> NetworkSpec:
    from .model import AffineLayer  # local import to keep module load order simple

    layers = []
    for i, (affine, act) in enumerate(net.layers, start=1):
        w_noise = sample_noise(
            cfg.family, cfg.sigma, affine.weight.size, substream(cfg.seed, trial, "param_w", i)
        ).reshape(affine.weight.shape)
        b_noise = sample_noise(
            cfg.family, cfg.sigma, affine.bias.size, substream(cfg.seed, trial, "param_b", i)
        )
        layers.append((AffineLayer(affine.weight + w_noise, affine.bias + b_noise), act))
    u_noise = sample_noise(
        cfg.family, cfg.sigma, net.head_weight.size, substream(cfg.seed, trial, "param_w", "head")
    ).reshape(net.head_weight.shape)
    c_noise = sample_noise(
        cfg.family, cfg.sigma, net.head_bias.size, substream(cfg.seed, trial, "param_b", "head")
    )
    return NetworkSpec(tuple(layers), net.head_weight + u_noise, net.head_bias + c_noise)


def perturbed_forward(
    net: NetworkSpec, x, cfg: NoiseConfig, trial: int, noise_log: dict | None = None
) -> ForwardTrace:
    """One stochastic forward pass, fully determined by (net, x, cfg, trial).

    When noise_log is a dict, the unit-scale activation noise vectors are
    stored under (trial, layer_index) for later reconstruction.
    """
    if trial < 0:
        raise ValueError("trial must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    site = cfg.site
    if site.site == SITE_ACTIVATIONS:
        draw = draw_activation_noise(net, cfg, trial)
        if noise_log is not None:
            for i, xi in enumerate(draw, start=1):
                noise_log[(trial, i)] = xi
        return forward_with_activation_noise(net, x, cfg.sigma, draw)
    if site.site == SITE_INPUT:
        if x.shape != (net.input_dim,):
            raise DimensionError(f"input shape {x.shape} != ({net.input_dim},)")
        if cfg.sigma != 0.0:
            eps = sample_noise(
                cfg.family, cfg.sigma, net.input_dim, substream(cfg.seed, trial, "input", 0)
            )
            x = x + eps
        if site.clip is not None:
            x = np.clip(x, site.clip[0], site.clip[1])
        return forward(net, x)
    # parameters site: the stored net is never mutated
    if cfg.sigma == 0.0:
        return forward(net, x)
    return forward(_perturbed_parameters(net, cfg, trial), x)


def _count_chunk(net, x, cfg, trials) -> np.ndarray:
    """Predicted-class counts for a set of trials.

    Activation and input sites batch the matrix products across trials;
    noise still comes from the per-(trial, layer) streams, so results match
    trial-at-a-time execution. The parameters site re-materializes weights
    per trial and stays scalar.
    """
    counts = np.zeros(net.num_classes, dtype=np.int64)
    trials = list(trials)
    if not trials:
        return counts
    if cfg.sigma == 0.0 or cfg.site.site == SITE_PARAMETERS:
        for t in trials:
            counts[perturbed_forward(net, x, cfg, t).predicted_class] += 1
        return counts
    x = np.asarray(x, dtype=np.float64)
    if cfg.site.site == SITE_ACTIVATIONS:
        a = np.tile(x, (len(trials), 1))
        first = True
        for i, (affine, act) in enumerate(net.layers, start=1):
            if first:
                z = np.tile(affine.weight @ x + affine.bias, (len(trials), 1))
                first = False
            else:
                z = a @ affine.weight.T + affine.bias
            a = act(z)
            if cfg.site.selects(i):
                xi = np.stack(
                    [
                        sample_noise(cfg.family, 1.0, affine.out_dim, substream(cfg.seed, t, "act", i))
                        for t in trials
                    ]
                )
                a = a + cfg.sigma * xi
    else:  # input site
        if x.shape != (net.input_dim,):
            raise DimensionError(f"input shape {x.shape} != ({net.input_dim},)")
        eps = np.stack(
            [
                sample_noise(cfg.family, cfg.sigma, net.input_dim, substream(cfg.seed, t, "input", 0))
                for t in trials
            ]
        )
        a = x + eps
        if cfg.site.clip is not None:
            a = np.clip(a, cfg.site.clip[0], cfg.site.clip[1])
        for affine, act in net.layers:
            a = act(a @ affine.weight.T + affine.bias)
    logits = a @ net.head_weight.T + net.head_bias
    np.add.at(counts, np.argmax(logits, axis=1), 1)
    return counts


def max_workers() -> int:
    """Parallelism cap from APEX_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("APEX_THREADS", "1")))
    except ValueError:
        return 1


def estimate_distribution(
    net: NetworkSpec, x, cfg: NoiseConfig, T: int, input_id: str = ""
) -> OutputDistribution:
    """Run T trials and return per-class prediction frequencies.

    Trials use counter-based streams keyed by (seed, trial, site, layer),
    so the result is independent of execution order and worker count.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    workers = max_workers()
    if workers == 1:
        counts = _count_chunk(net, x, cfg, range(T))
    else:
        chunks = [range(i, T, workers) for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(lambda c: _count_chunk(net, x, cfg, c), chunks)
        counts = sum(parts)
    return OutputDistribution(counts / T, T, cfg.sigma, input_id)
