"""Pydantic request/response models for the probing service.

Model documents on the wire use the same JSON layout as model files, so a
saved model can be pasted straight into a request body.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from .. import metrics, perturb
from ..model import NetworkSpec


class ActivationIn(BaseModel):
    kind: Literal["relu", "leaky_relu", "gelu"]
    alpha: Optional[float] = None


class LayerIn(BaseModel):
    weight: list[list[float]]
    bias: list[float]
    activation: ActivationIn


class HeadIn(BaseModel):
    weight: list[list[float]]
    bias: list[float]


class ModelDocument(BaseModel):
    input_dim: int
    num_classes: int
    layers: list[LayerIn]
    head: HeadIn

    def to_network(self) -> NetworkSpec:
        return NetworkSpec.from_dict(self.model_dump(exclude_none=True))

    @classmethod
    def from_network(cls, net: NetworkSpec) -> "ModelDocument":
        return cls.model_validate(net.to_dict())


class NoiseSettings(BaseModel):
    site: Literal["input", "activations", "parameters"] = "activations"
    family: Literal["gaussian", "laplace", "uniform"] = "gaussian"
    layers: Optional[list[int]] = None  # activation site only; None = all
    clip: Optional[tuple[float, float]] = None  # input site only
    seed: int

    def perturb_site(self) -> perturb.PerturbSite:
        if self.site == "input":
            return perturb.PerturbSite.input(clip=self.clip)
        if self.site == "parameters":
            return perturb.PerturbSite.parameters()
        return perturb.PerturbSite.activations(self.layers)

    def config(self, sigma: float) -> perturb.NoiseConfig:
        return perturb.NoiseConfig(self.perturb_site(), self.family, sigma, self.seed)


class ProbeRequest(BaseModel):
    model: ModelDocument
    inputs: list[list[float]]
    input_ids: Optional[list[str]] = None
    sigmas: list[float] = Field(min_length=1)
    trials: int = Field(default=1000, ge=1)
    noise: NoiseSettings

    @model_validator(mode="after")
    def _ids_match(self):
        if self.input_ids is not None and len(self.input_ids) != len(self.inputs):
            raise ValueError("input_ids must match inputs in length")
        return self


class DistributionOut(BaseModel):
    input_id: str
    sigma: float
    trials: int
    probs: list[float]


class ProbeResponse(BaseModel):
    distributions: list[DistributionOut]


class ForwardRequest(BaseModel):
    model: ModelDocument
    input: list[float]


class ForwardResponse(BaseModel):
    logits: list[float]
    predicted_class: int


class EscapeRequest(BaseModel):
    model: ModelDocument
    inputs: list[list[float]]
    input_ids: Optional[list[str]] = None
    sigmas: list[float] = Field(min_length=1)
    trials: int = Field(default=1000, ge=1)
    threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    noise: NoiseSettings


class EscapeCurvePoint(BaseModel):
    sigma: float
    prob: float


class EscapeOut(BaseModel):
    input_id: str
    k_star: int
    escaped: bool
    escape_sigma: Optional[float]
    threshold: float
    curve: list[EscapeCurvePoint]


class EscapeResponse(BaseModel):
    results: list[EscapeOut]
    mean_escape_sigma: Optional[float]  # not-escaped samples count at the grid max
    not_escaped: int


class StationarityRequest(BaseModel):
    model: ModelDocument
    inputs: list[list[float]] = Field(min_length=2)
    sigmas: list[float] = Field(min_length=1)
    trials: int = Field(default=1000, ge=1)
    noise: NoiseSettings


class StationarityResponse(BaseModel):
    sigmas: list[float]
    mean_pairwise_js: list[float]
    consecutive_js: list[float]
    mean_entropy: list[float]


class VerifyRequest(BaseModel):
    model: ModelDocument
    radius: float = Field(gt=0.0)
    num_inputs: int = Field(default=10, ge=1)
    seed: int
    sigmas: list[float] = Field(default=[0.0, 0.01, 1.0, 100.0])
    num_draws: int = Field(default=5, ge=1)
    lemma_samples: int = Field(default=10000, ge=1)


class CheckOut(BaseModel):
    name: str
    samples: int
    max_violation: float
    passed: bool


class VerifyResponse(BaseModel):
    passed: bool
    checks: list[CheckOut]


class TrainRequest(BaseModel):
    manifest: dict


class TrainResponse(BaseModel):
    model: ModelDocument
    manifest_hash: str
    train_accuracy: float


class ExperimentRequest(BaseModel):
    name: Literal["random-label", "split-class", "backdoor"]
    manifest: dict
    # optional per-experiment knobs; unspecified fields fall back to defaults
    ratios: Optional[list[float]] = None
    seeds: Optional[list[int]] = None
    sigmas: Optional[list[float]] = None
    trials: Optional[int] = None
    sigma_large: Optional[float] = None


class ExperimentResponse(BaseModel):
    experiment: str
    manifest_hash: str
    result: dict


def sigma_grid(values: list[float]) -> metrics.SigmaGrid:
    return metrics.SigmaGrid(tuple(values))
