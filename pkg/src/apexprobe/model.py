"""Feedforward network definition, evaluation and JSON serialization.

A network is an ordered stack of affine layers with elementwise
activations, followed by a linear output head. Everything is stored in
float64; the bound-verification code needs the headroom.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class ModelError(ValueError):
    """Base class for model construction/IO errors."""


class DimensionError(ModelError):
    """Shapes of weights, biases or inputs are inconsistent."""


class UnknownActivationError(ModelError):
    """Model file names an activation this toolkit does not define."""


class ModelFormatError(ModelError):
    """Model file is structurally malformed."""


RELU = "relu"
LEAKY_RELU = "leaky_relu"
GELU = "gelu"


@dataclass(frozen=True)
class Activation:
    """Elementwise activation: relu, leaky_relu(alpha) or gelu."""

    kind: str
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in (RELU, LEAKY_RELU, GELU):
            raise UnknownActivationError(f"unknown activation kind: {self.kind!r}")
        if self.kind == LEAKY_RELU:
            if self.alpha is None or not (0.0 < self.alpha < 1.0):
                raise ModelError(f"leaky_relu alpha must lie in (0, 1), got {self.alpha!r}")
        elif self.alpha is not None:
            raise ModelError(f"{self.kind} takes no alpha parameter")

    @property
    def homogeneous(self) -> bool:
        """True for positively homogeneous, 1-Lipschitz activations."""
        return self.kind in (RELU, LEAKY_RELU)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise ModelError("activation input contains non-finite values")
        if self.kind == RELU:
            return np.maximum(z, 0.0)
        if self.kind == LEAKY_RELU:
            return np.maximum(z, 0.0) + self.alpha * np.minimum(z, 0.0)
        # exact-erf GELU
        return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))

    def derivative(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.kind == RELU:
            return (z > 0.0).astype(np.float64)
        if self.kind == LEAKY_RELU:
            return np.where(z > 0.0, 1.0, self.alpha)
        cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return cdf + z * pdf

    def to_dict(self) -> dict:
        if self.kind == LEAKY_RELU:
            return {"kind": LEAKY_RELU, "alpha": self.alpha}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Activation":
        if not isinstance(d, dict) or "kind" not in d:
            raise ModelFormatError(f"activation must be an object with a 'kind' field, got {d!r}")
        kind = d["kind"]
        if kind == LEAKY_RELU:
            return cls(kind, d.get("alpha"))
        if d.get("alpha") is not None:  # an explicit null is treated as absent
            raise ModelFormatError(f"activation {kind!r} takes no alpha")
        return cls(kind)


def relu() -> Activation:
    return Activation(RELU)


def leaky_relu(alpha: float) -> Activation:
    return Activation(LEAKY_RELU, alpha)


def gelu() -> Activation:
    return Activation(GELU)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _as_vector(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AffineLayer:
    """z = weight @ a + bias; weight is (out_dim, in_dim)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _as_matrix(self.weight, "weight"))
        object.__setattr__(self, "bias", _as_vector(self.bias, "bias"))
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AffineLayer):
            return NotImplemented
        return np.array_equal(self.weight, other.weight) and np.array_equal(self.bias, other.bias)


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Immutable network: hidden (affine, activation) pairs plus a linear head."""

    layers: tuple  # tuple of (AffineLayer, Activation)
    head_weight: np.ndarray  # (num_classes, last_hidden_dim)
    head_bias: np.ndarray  # (num_classes,)

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) < 1:
            raise DimensionError("network needs at least one hidden layer")
        for affine, act in layers:
            if not isinstance(affine, AffineLayer) or not isinstance(act, Activation):
                raise ModelError("layers must be (AffineLayer, Activation) pairs")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "head_weight", _as_matrix(self.head_weight, "head weight"))
        object.__setattr__(self, "head_bias", _as_vector(self.head_bias, "head bias"))
        dim = layers[0][0].in_dim
        for i, (affine, _) in enumerate(layers):
            if affine.in_dim != dim:
                raise DimensionError(
                    f"layer {i + 1} expects input dim {affine.in_dim}, previous layer emits {dim}"
                )
            dim = affine.out_dim
        if self.head_weight.shape[1] != dim:
            raise DimensionError(
                f"head expects input dim {self.head_weight.shape[1]}, last layer emits {dim}"
            )
        if self.head_weight.shape[0] != self.head_bias.shape[0]:
            raise DimensionError("head bias length does not match head weight rows")
        if self.num_classes < 2:
            raise DimensionError("network needs at least 2 classes")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].in_dim

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_dims(self) -> tuple:
        """Output dims of each hidden layer, in order."""
        return tuple(affine.out_dim for affine, _ in self.layers)

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        if len(self.layers) != len(other.layers):
            return False
        for (a1, k1), (a2, k2) in zip(self.layers, other.layers):
            if a1 != a2 or k1 != k2:
                return False
        return np.array_equal(self.head_weight, other.head_weight) and np.array_equal(
            self.head_bias, other.head_bias
        )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "layers": [
                {
                    "weight": affine.weight.tolist(),
                    "bias": affine.bias.tolist(),
                    "activation": act.to_dict(),
                }
                for affine, act in self.layers
            ],
            "head": {"weight": self.head_weight.tolist(), "bias": self.head_bias.tolist()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        if not isinstance(doc, dict):
            raise ModelFormatError("model document must be a JSON object")
        for key in ("input_dim", "num_classes", "layers", "head"):
            if key not in doc:
                raise ModelFormatError(f"model document missing field {key!r}")
        try:
            layers = tuple(
                (
                    AffineLayer(entry["weight"], entry["bias"]),
                    Activation.from_dict(entry["activation"]),
                )
                for entry in doc["layers"]
            )
            head = doc["head"]
            net = cls(layers, head["weight"], head["bias"])
        except ModelError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model document: {exc}") from exc
        if net.input_dim != doc["input_dim"]:
            raise DimensionError(
                f"declared input_dim {doc['input_dim']} != actual {net.input_dim}"
            )
        if net.num_classes != doc["num_classes"]:
            raise DimensionError(
                f"declared num_classes {doc['num_classes']} != actual {net.num_classes}"
            )
        return net


@dataclass
class ForwardTrace:
    """Per-layer record of one forward pass."""

    pre_activations: list = field(default_factory=list)  # z_l
    post_activations: list = field(default_factory=list)  # a_l (possibly perturbed)
    logits: np.ndarray = None
    predicted_class: int = None


def forward(net: NetworkSpec, x) -> ForwardTrace:
    """Deterministic forward pass; argmax ties break to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimensionError(f"input shape {x.shape} != ({net.input_dim},)")
    trace = ForwardTrace()
    a = x
    for affine, act in net.layers:
        z = affine.weight @ a + affine.bias
        a = act(z)
        trace.pre_activations.append(z)
        trace.post_activations.append(a)
    trace.logits = net.head_weight @ a + net.head_bias
    trace.predicted_class = int(np.argmax(trace.logits))
    return trace


def save_model(net: NetworkSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(net.to_dict(), f)
        f.write("\n")


def load_model(path) -> NetworkSpec:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from exc
    return NetworkSpec.from_dict(doc)
