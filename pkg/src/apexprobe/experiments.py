"""End-to-end experiment pipelines: generate -> manipulate -> train -> probe.

An ExperimentManifest captures the dataset recipe, the label manipulation,
the architecture and the training hyperparameters, and is sufficient to
regenerate a trained model byte-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import SigmaGrid, escape_noise, normalized_entropy, target_mass
from .model import Activation, NetworkSpec, forward
from .perturb import GAUSSIAN, NoiseConfig, PerturbSite, estimate_distribution
from .rng import substream
from .train import (
    Dataset,
    PoisonSpec,
    TrainConfig,
    accuracy,
    apply_trigger,
    init_network,
    make_blobs,
    poison_backdoor,
    randomize_labels,
    split_class_relabel,
)


class ManifestError(ValueError):
    """Manifest fails schema or value validation."""


@dataclass(frozen=True)
class DatasetRecipe:
    num_classes: int
    per_class: int
    dim: int
    spread: float
    seed: int

    def build(self) -> Dataset:
        return make_blobs(self.num_classes, self.per_class, self.dim, self.spread, self.seed)


@dataclass(frozen=True)
class ExperimentManifest:
    dataset: DatasetRecipe
    hidden: tuple
    activation: Activation
    init_seed: int
    train: TrainConfig
    manipulation: dict = field(default_factory=lambda: {"kind": "none"})

    def to_dict(self) -> dict:
        return {
            "dataset": {
                "num_classes": self.dataset.num_classes,
                "per_class": self.dataset.per_class,
                "dim": self.dataset.dim,
                "spread": self.dataset.spread,
                "seed": self.dataset.seed,
            },
            "model": {
                "hidden": list(self.hidden),
                "activation": self.activation.to_dict(),
                "init_seed": self.init_seed,
            },
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "learning_rate": self.train.learning_rate,
                "momentum": self.train.momentum,
                "weight_decay": self.train.weight_decay,
                "lr_milestones": list(self.train.lr_milestones),
                "lr_gamma": self.train.lr_gamma,
                "seed": self.train.seed,
            },
            "manipulation": dict(self.manipulation),
        }

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentManifest":
        try:
            ds = doc["dataset"]
            mdl = doc["model"]
            tr = doc["train"]
            manifest = cls(
                dataset=DatasetRecipe(
                    int(ds["num_classes"]),
                    int(ds["per_class"]),
                    int(ds["dim"]),
                    float(ds["spread"]),
                    int(ds["seed"]),
                ),
                hidden=tuple(int(h) for h in mdl["hidden"]),
                activation=Activation.from_dict(mdl["activation"]),
                init_seed=int(mdl["init_seed"]),
                train=TrainConfig(
                    epochs=int(tr["epochs"]),
                    batch_size=int(tr["batch_size"]),
                    learning_rate=float(tr["learning_rate"]),
                    momentum=float(tr.get("momentum", 0.9)),
                    weight_decay=float(tr.get("weight_decay", 0.0)),
                    lr_milestones=tuple(tr.get("lr_milestones", ())),
                    lr_gamma=float(tr.get("lr_gamma", 0.1)),
                    seed=int(tr["seed"]),
                ),
                manipulation=dict(doc.get("manipulation", {"kind": "none"})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid manifest: {exc}") from exc
        _validate_manipulation(manifest.manipulation)
        return manifest


def _validate_manipulation(m: dict):
    kind = m.get("kind", "none")
    if kind == "none":
        return
    if kind == "random_label":
        ratio = m.get("ratio")
        if ratio is None or not 0.0 <= float(ratio) <= 1.0:
            raise ManifestError(f"random_label ratio must lie in [0, 1], got {ratio!r}")
        if "seed" not in m:
            raise ManifestError("random_label manipulation needs a seed")
        return
    if kind == "split_class":
        for key in ("class_a", "class_b", "seed"):
            if key not in m:
                raise ManifestError(f"split_class manipulation needs {key!r}")
        return
    if kind == "backdoor":
        for key in ("trigger_indices", "trigger_values", "target", "rate", "seed"):
            if key not in m:
                raise ManifestError(f"backdoor manipulation needs {key!r}")
        if not 0.0 < float(m["rate"]) < 1.0:
            raise ManifestError("backdoor rate must lie in (0, 1)")
        return
    raise ManifestError(f"unknown manipulation kind: {kind!r}")


def poison_spec_of(m: dict) -> PoisonSpec:
    return PoisonSpec(
        tuple(m["trigger_indices"]),
        tuple(m["trigger_values"]),
        int(m["target"]),
        float(m["rate"]),
    )


def build_dataset(manifest: ExperimentManifest) -> Dataset:
    ds = manifest.dataset.build()
    m = manifest.manipulation
    kind = m.get("kind", "none")
    if kind == "random_label":
        return randomize_labels(ds, float(m["ratio"]), int(m["seed"]))
    if kind == "split_class":
        return split_class_relabel(ds, int(m["class_a"]), int(m["class_b"]), int(m["seed"]))
    if kind == "backdoor":
        return poison_backdoor(ds, poison_spec_of(m), int(m["seed"]))
    return ds


def train_from_manifest(manifest: ExperimentManifest) -> NetworkSpec:
    from .train import sgd_train

    ds = build_dataset(manifest)
    net0 = init_network(
        manifest.dataset.dim,
        list(manifest.hidden),
        manifest.dataset.num_classes,
        manifest.activation,
        manifest.init_seed,
    )
    return sgd_train(net0, ds, manifest.train)


def _with_seeds(manifest: ExperimentManifest, run_seed: int, **manip) -> ExperimentManifest:
    """Re-seed every stochastic stage of a manifest from one run seed."""
    doc = manifest.to_dict()
    doc["dataset"]["seed"] = manifest.dataset.seed + 1000 * run_seed
    doc["model"]["init_seed"] = manifest.init_seed + 1000 * run_seed
    doc["train"]["seed"] = manifest.train.seed + 1000 * run_seed
    if manip:
        doc["manipulation"] = dict(doc["manipulation"], **manip)
        if "seed" in doc["manipulation"]:
            doc["manipulation"]["seed"] = int(doc["manipulation"]["seed"]) + 1000 * run_seed
    return ExperimentManifest.from_dict(doc)


def eval_inputs(manifest: ExperimentManifest, count: int, sample_seed: int):
    """Held-out samples from the clean blob recipe (same class means)."""
    recipe = manifest.dataset
    held = make_blobs(recipe.num_classes, max(1, -(-count // recipe.num_classes)),
                      recipe.dim, recipe.spread, recipe.seed, sample_seed=sample_seed)
    return held.inputs[:count], held.labels[:count]


def run_random_label_experiment(
    manifest: ExperimentManifest,
    ratios,
    seeds,
    grid: SigmaGrid,
    trials: int,
    n_eval: int = 20,
    probe_seed: int = 7,
) -> dict:
    """Average escape noise per random-label ratio (seed-averaged).

    Samples that never escape inside the grid count at the grid maximum,
    the most conservative finite summary.
    """
    site = PerturbSite.activations()
    rows = []
    for ratio in ratios:
        per_seed = []
        for s in seeds:
            m = _with_seeds(manifest, s, kind="random_label", ratio=float(ratio), seed=11)
            net = train_from_manifest(m)
            xs, _ = eval_inputs(m, n_eval, sample_seed=m.dataset.seed + 17)
            cfg = NoiseConfig(site, GAUSSIAN, 0.0, probe_seed)
            values = []
            for i, x in enumerate(xs):
                res = escape_noise(net, x, grid, cfg, trials, input_id=str(i))
                values.append(res.escape_sigma if res.escaped else grid.values[-1])
            per_seed.append(float(np.mean(values)))
            rows.append({"ratio": float(ratio), "seed": int(s), "mean_escape_sigma": per_seed[-1]})
        rows.append(
            {"ratio": float(ratio), "seed": "mean", "mean_escape_sigma": float(np.mean(per_seed))}
        )
    return {"experiment": "random-label", "rows": rows}


def run_split_class_experiment(
    manifest: ExperimentManifest,
    grid: SigmaGrid,
    trials: int,
    n_eval: int = 30,
    probe_seed: int = 7,
) -> dict:
    """Reassigned-class probability vs sigma under activation and parameter noise.

    Probes held-out samples from the source-class distribution whose
    deterministic prediction is the source class, so the curve starts near
    zero and any rise reflects transfer toward the reassigned twin class.
    """
    m = manifest.manipulation
    if m.get("kind") != "split_class":
        raise ManifestError("split-class experiment needs a split_class manipulation")
    class_a, class_b = int(m["class_a"]), int(m["class_b"])
    net = train_from_manifest(manifest)
    recipe = manifest.dataset
    held = make_blobs(recipe.num_classes, recipe.per_class, recipe.dim, recipe.spread,
                      recipe.seed, sample_seed=recipe.seed + 17)
    pool = held.inputs[held.labels == class_a]
    xs = [x for x in pool if forward(net, x).predicted_class == class_a][:n_eval]
    if not xs:
        raise ManifestError("no held-out source-class samples are predicted as the source class")
    rows = []
    for site_name, site in (
        ("activations", PerturbSite.activations()),
        ("parameters", PerturbSite.parameters()),
    ):
        cfg0 = NoiseConfig(site, GAUSSIAN, 0.0, probe_seed)
        for sigma in grid:
            masses = [
                target_mass(
                    estimate_distribution(net, x, cfg0.with_sigma(sigma), trials, str(i)),
                    class_b,
                )
                for i, x in enumerate(xs)
            ]
            rows.append(
                {
                    "site": site_name,
                    "sigma": float(sigma),
                    "mean_reassigned_prob": float(np.mean(masses)),
                }
            )
    return {
        "experiment": "split-class",
        "class_a": class_a,
        "class_b": class_b,
        "num_inputs": len(xs),
        "rows": rows,
    }


def run_backdoor_experiment(
    manifest: ExperimentManifest,
    seeds,
    sigma_large: float | None = None,
    trials: int = 2000,
    n_eval: int = 20,
    probe_seed: int = 7,
) -> dict:
    """Paired benign/backdoored runs: attack success, clean accuracy,
    stationary target mass and normalized entropy at large noise."""
    m = manifest.manipulation
    if m.get("kind") != "backdoor":
        raise ManifestError("backdoor experiment needs a backdoor manipulation")
    spec = poison_spec_of(m)
    site = PerturbSite.activations()
    rows = []
    for s in seeds:
        poisoned_m = _with_seeds(manifest, s)
        benign_doc = poisoned_m.to_dict()
        benign_doc["manipulation"] = {"kind": "none"}
        benign_m = ExperimentManifest.from_dict(benign_doc)

        net_bd = train_from_manifest(poisoned_m)
        net_clean = train_from_manifest(benign_m)

        held_x, held_y = eval_inputs(benign_m, 100, sample_seed=benign_m.dataset.seed + 17)
        held = Dataset(held_x, held_y, manifest.dataset.num_classes)
        clean_acc_bd = accuracy(net_bd, held)
        clean_acc_benign = accuracy(net_clean, held)
        stamped = np.array([apply_trigger(x, spec) for x in held_x])
        preds = [forward(net_bd, x).predicted_class for x in stamped]
        asr = float(np.mean([p == spec.target for p in preds]))

        sigma = sigma_large
        if sigma is None:
            scale = float(np.median(np.abs(net_bd.layers[0][0].weight)))
            sigma = 1000.0 * max(scale, 1e-12)
        for name, net in (("backdoored", net_bd), ("benign", net_clean)):
            cfg = NoiseConfig(site, GAUSSIAN, sigma, probe_seed)
            dists = [
                estimate_distribution(net, x, cfg, trials, str(i))
                for i, x in enumerate(held_x[:n_eval])
            ]
            mean_probs = np.mean([d.probs for d in dists], axis=0)
            rows.append(
                {
                    "seed": int(s),
                    "model": name,
                    "sigma": float(sigma),
                    "attack_success_rate": asr if name == "backdoored" else None,
                    "clean_accuracy": clean_acc_bd if name == "backdoored" else clean_acc_benign,
                    "target_mass": float(mean_probs[spec.target]),
                    "max_class_mass": float(np.max(mean_probs)),
                    "normalized_entropy": float(
                        np.mean([normalized_entropy(d) for d in dists])
                    ),
                }
            )
    return {"experiment": "backdoor", "target": spec.target, "rows": rows}
