"""Manifest validation and the experiment pipelines (smoke scale)."""

import numpy as np
import pytest

from apexprobe.experiments import (
    ExperimentManifest,
    ManifestError,
    build_dataset,
    eval_inputs,
    run_backdoor_experiment,
    run_random_label_experiment,
    run_split_class_experiment,
    train_from_manifest,
)
from apexprobe.metrics import SigmaGrid
from apexprobe.train import accuracy


def tiny_manifest(manipulation=None):
    return {
        "dataset": {"num_classes": 3, "per_class": 15, "dim": 4, "spread": 0.4, "seed": 1},
        "model": {"hidden": [12], "activation": {"kind": "relu"}, "init_seed": 2},
        "train": {
            "epochs": 25,
            "batch_size": 8,
            "learning_rate": 0.1,
            "momentum": 0.9,
            "weight_decay": 0.0,
            "lr_milestones": [15],
            "lr_gamma": 0.1,
            "seed": 3,
        },
        "manipulation": manipulation or {"kind": "none"},
    }


class TestManifest:
    def test_roundtrip_and_hash_stability(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        again = ExperimentManifest.from_dict(m.to_dict())
        assert m.hash() == again.hash()

    def test_hash_changes_with_content(self):
        a = ExperimentManifest.from_dict(tiny_manifest())
        doc = tiny_manifest()
        doc["train"]["seed"] = 99
        b = ExperimentManifest.from_dict(doc)
        assert a.hash() != b.hash()

    def test_missing_section(self):
        doc = tiny_manifest()
        del doc["model"]
        with pytest.raises(ManifestError):
            ExperimentManifest.from_dict(doc)

    def test_unknown_manipulation(self):
        with pytest.raises(ManifestError):
            ExperimentManifest.from_dict(tiny_manifest({"kind": "label_swap"}))

    def test_random_label_needs_valid_ratio(self):
        with pytest.raises(ManifestError):
            ExperimentManifest.from_dict(
                tiny_manifest({"kind": "random_label", "ratio": 2.0, "seed": 1})
            )

    def test_backdoor_needs_rate_in_range(self):
        with pytest.raises(ManifestError):
            ExperimentManifest.from_dict(
                tiny_manifest(
                    {
                        "kind": "backdoor",
                        "trigger_indices": [0],
                        "trigger_values": [1.0],
                        "target": 0,
                        "rate": 1.0,
                        "seed": 1,
                    }
                )
            )

    def test_split_class_needs_both_classes(self):
        with pytest.raises(ManifestError):
            ExperimentManifest.from_dict(tiny_manifest({"kind": "split_class", "class_a": 0}))


class TestBuildAndTrain:
    def test_build_dataset_applies_manipulation(self):
        m = ExperimentManifest.from_dict(
            tiny_manifest({"kind": "split_class", "class_a": 0, "class_b": 2, "seed": 4})
        )
        ds = build_dataset(m)
        assert len(ds) == 30  # class 2's 15 rows removed

    def test_train_is_deterministic_in_manifest(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        assert train_from_manifest(m) == train_from_manifest(m)

    def test_trained_model_fits_clean_data(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        net = train_from_manifest(m)
        assert accuracy(net, build_dataset(m)) >= 0.95

    def test_eval_inputs_held_out(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        xs, ys = eval_inputs(m, 9, sample_seed=123)
        assert xs.shape == (9, 4) and len(ys) == 9
        train_inputs = build_dataset(m).inputs
        for x in xs:
            assert not any(np.array_equal(x, t) for t in train_inputs)


class TestPipelines:
    def test_random_label_rows_shape(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        grid = SigmaGrid((0.1, 1.0, 10.0))
        out = run_random_label_experiment(
            m, ratios=[0.0, 0.5], seeds=[0], grid=grid, trials=50, n_eval=4
        )
        means = [r for r in out["rows"] if r["seed"] == "mean"]
        assert [r["ratio"] for r in means] == [0.0, 0.5]
        assert all(0.1 <= r["mean_escape_sigma"] <= 10.0 for r in means)

    def test_split_class_requires_matching_manipulation(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        with pytest.raises(ManifestError):
            run_split_class_experiment(m, SigmaGrid((0.1, 1.0)), trials=10)

    def test_split_class_rows(self):
        m = ExperimentManifest.from_dict(
            tiny_manifest({"kind": "split_class", "class_a": 0, "class_b": 2, "seed": 4})
        )
        out = run_split_class_experiment(m, SigmaGrid((0.1, 1.0)), trials=50, n_eval=4)
        sites = {r["site"] for r in out["rows"]}
        assert sites == {"activations", "parameters"}
        assert all(0.0 <= r["mean_reassigned_prob"] <= 1.0 for r in out["rows"])

    def test_backdoor_requires_matching_manipulation(self):
        m = ExperimentManifest.from_dict(tiny_manifest())
        with pytest.raises(ManifestError):
            run_backdoor_experiment(m, seeds=[0], trials=10)

    def test_backdoor_rows_paired(self):
        m = ExperimentManifest.from_dict(
            tiny_manifest(
                {
                    "kind": "backdoor",
                    "trigger_indices": [0],
                    "trigger_values": [6.0],
                    "target": 1,
                    "rate": 0.2,
                    "seed": 4,
                }
            )
        )
        out = run_backdoor_experiment(m, seeds=[0], trials=100, n_eval=4)
        models = [r["model"] for r in out["rows"]]
        assert models == ["backdoored", "benign"]
        bd = out["rows"][0]
        assert bd["attack_success_rate"] is not None
        assert out["rows"][1]["attack_success_rate"] is None
