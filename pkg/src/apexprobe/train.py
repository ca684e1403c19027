"""Desk-scale datasets, label manipulations and an SGD trainer.

The trainer is a plain numpy implementation: cross-entropy over softmax,
mini-batch SGD with momentum, weight decay and a step-decay schedule.
Gradients come from reverse-mode accumulation through the affine /
activation stack, checked against finite differences in the tests.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Activation, AffineLayer, DimensionError, ModelError, NetworkSpec
from .rng import substream


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, dim)
    labels: np.ndarray  # (N,), int
    num_classes: int
    value_range: tuple | None = None  # declared pixel-like range, e.g. (0, 1)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or len(inputs) != len(labels):
            raise DimensionError("inputs must be (N, dim) with matching (N,) labels")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("dataset inputs contain non-finite values")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_milestones: tuple = ()
    lr_gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        milestones = tuple(int(m) for m in self.lr_milestones)
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if milestones and milestones[-1] >= self.epochs:
            raise ValueError("milestones must lie before the final epoch")
        object.__setattr__(self, "lr_milestones", milestones)


@dataclass(frozen=True)
class PoisonSpec:
    """Coordinate-overwrite trigger: inputs[indices] = values, label = target."""

    trigger_indices: tuple
    trigger_values: tuple
    target: int
    rate: float

    def __post_init__(self):
        idx = tuple(int(i) for i in self.trigger_indices)
        vals = tuple(float(v) for v in self.trigger_values)
        if len(idx) != len(vals) or not idx:
            raise ValueError("trigger needs matching, nonempty index and value lists")
        if len(set(idx)) != len(idx):
            raise ValueError("trigger indices must be distinct")
        if not 0.0 < self.rate < 1.0:
            raise ValueError("poison rate must lie in (0, 1)")
        object.__setattr__(self, "trigger_indices", idx)
        object.__setattr__(self, "trigger_values", vals)


def apply_trigger(x: np.ndarray, spec: PoisonSpec) -> np.ndarray:
    stamped = np.array(x, dtype=np.float64)
    stamped[list(spec.trigger_indices)] = spec.trigger_values
    return stamped


def make_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    sample_seed: int | None = None,
) -> Dataset:
    """Gaussian clusters around deterministic class means.

    Means are drawn once from the seed's own stream and pushed apart to a
    common radius so small spreads give linearly separable classes. Pass a
    distinct sample_seed to draw held-out samples from the same clusters.
    """
    if num_classes < 2 or per_class < 1 or dim < 1 or spread < 0:
        raise ValueError("invalid blob parameters")
    mean_rng = substream(seed, "blob_means")
    means = mean_rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= 4.0
    sample_rng = substream(seed if sample_seed is None else sample_seed, "blob_samples")
    inputs = np.repeat(means, per_class, axis=0)
    if spread > 0:
        inputs = inputs + spread * sample_rng.standard_normal(inputs.shape)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(inputs, labels, num_classes)


def randomize_labels(ds: Dataset, ratio: float, seed: int) -> Dataset:
    """Uniformly relabel a floor(ratio * N) subset; new labels are uniform
    over all classes and may coincide with the original."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n_flip = int(math.floor(ratio * len(ds)))
    labels = np.array(ds.labels)
    if n_flip:
        rng = substream(seed, "random_labels")
        chosen = rng.choice(len(ds), size=n_flip, replace=False)
        labels[chosen] = rng.integers(0, ds.num_classes, size=n_flip)
    return Dataset(ds.inputs, labels, ds.num_classes, ds.value_range)


def split_class_relabel(ds: Dataset, class_a: int, class_b: int, seed: int) -> Dataset:
    """Remove class_b, then relabel a uniform half of class_a to class_b.

    The two classes end up sharing one input distribution, so any learned
    preference between them is representational, not semantic. class_b
    stays in the label space (its logit remains trainable).
    """
    if class_a == class_b:
        raise ValueError("classes must differ")
    a_idx = np.flatnonzero(ds.labels == class_a)
    b_idx = np.flatnonzero(ds.labels == class_b)
    if a_idx.size == 0 or b_idx.size == 0:
        raise ValueError("both classes must be present in the dataset")
    keep = np.flatnonzero(ds.labels != class_b)
    labels = np.array(ds.labels[keep])
    inputs = ds.inputs[keep]
    a_positions = np.flatnonzero(labels == class_a)
    rng = substream(seed, "split_class")
    reassigned = rng.choice(a_positions, size=len(a_positions) // 2, replace=False)
    labels[reassigned] = class_b
    return Dataset(inputs, labels, ds.num_classes, ds.value_range)


def poison_backdoor(ds: Dataset, spec: PoisonSpec, seed: int) -> Dataset:
    """Stamp the trigger onto a uniform rate-fraction of rows and point
    their labels at the target class; clean rows are untouched."""
    if max(spec.trigger_indices) >= ds.dim:
        raise ValueError("trigger indices exceed input dimension")
    n_poison = max(1, int(round(spec.rate * len(ds))))
    rng = substream(seed, "poison")
    chosen = rng.choice(len(ds), size=n_poison, replace=False)
    inputs = np.array(ds.inputs)
    labels = np.array(ds.labels)
    inputs[np.ix_(chosen, list(spec.trigger_indices))] = spec.trigger_values
    labels[chosen] = spec.target
    return Dataset(inputs, labels, ds.num_classes, ds.value_range)


def save_dataset(ds: Dataset, path) -> None:
    """JSON (*.json) or CSV with columns x_0..x_{d-1}, label."""
    path = str(path)
    if path.endswith(".json"):
        doc = {
            "inputs": ds.inputs.tolist(),
            "labels": ds.labels.tolist(),
            "num_classes": ds.num_classes,
        }
        if ds.value_range is not None:
            doc["value_range"] = list(ds.value_range)
        with open(path, "w") as f:
            json.dump(doc, f)
            f.write("\n")
        return
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"x_{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.inputs, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    path = str(path)
    if path.endswith(".json"):
        with open(path) as f:
            doc = json.load(f)
        rng = doc.get("value_range")
        return Dataset(
            np.asarray(doc["inputs"], dtype=np.float64),
            np.asarray(doc["labels"], dtype=np.int64),
            int(doc["num_classes"]),
            None if rng is None else (float(rng[0]), float(rng[1])),
        )
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[-1] != "label":
            raise ValueError("CSV dataset needs a trailing 'label' column")
        rows = list(reader)
    inputs = np.array([[float(v) for v in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows])
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 2
    return Dataset(inputs, labels, num_classes)


def init_network(
    input_dim: int, hidden: list, num_classes: int, activation: Activation, seed: int
) -> NetworkSpec:
    """Symmetric uniform fan-in initialization (+-1/sqrt(fan_in))."""
    rng = substream(seed, "init")
    dims = [input_dim] + list(hidden)
    layers = []
    for i in range(len(hidden)):
        bound = 1.0 / math.sqrt(dims[i])
        w = rng.uniform(-bound, bound, (dims[i + 1], dims[i]))
        b = rng.uniform(-bound, bound, dims[i + 1])
        layers.append((AffineLayer(w, b), activation))
    bound = 1.0 / math.sqrt(dims[-1])
    u = rng.uniform(-bound, bound, (num_classes, dims[-1]))
    c = rng.uniform(-bound, bound, num_classes)
    return NetworkSpec(tuple(layers), u, c)


def _params(net: NetworkSpec):
    ws = [np.array(affine.weight) for affine, _ in net.layers]
    bs = [np.array(affine.bias) for affine, _ in net.layers]
    acts = [act for _, act in net.layers]
    return ws, bs, acts, np.array(net.head_weight), np.array(net.head_bias)


def _assemble(ws, bs, acts, u, c) -> NetworkSpec:
    return NetworkSpec(tuple((AffineLayer(w, b), a) for w, b, a in zip(ws, bs, acts)), u, c)


def _batch_loss_and_grads(ws, bs, acts, u, c, X, y):
    """Mean cross-entropy over the batch plus gradients for every parameter."""
    n = len(X)
    a = X
    pre = []
    post = [X]
    for w, b, act in zip(ws, bs, acts):
        z = a @ w.T + b
        a = act(z)
        pre.append(z)
        post.append(a)
    logits = a @ u.T + c
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))

    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    gu = dlogits.T @ post[-1]
    gc = dlogits.sum(axis=0)
    da = dlogits @ u
    gws, gbs = [], []
    for i in range(len(ws) - 1, -1, -1):
        dz = da * acts[i].derivative(pre[i])
        gws.append(dz.T @ post[i])
        gbs.append(dz.sum(axis=0))
        da = dz @ ws[i]
    gws.reverse()
    gbs.reverse()
    return loss, gws, gbs, gu, gc


def loss_and_gradients(net: NetworkSpec, X, y):
    """Cross-entropy loss and analytic gradients for one batch.

    Returns (loss, layer weight grads, layer bias grads, head weight grad,
    head bias grad); used directly by the finite-difference checks.
    """
    ws, bs, acts, u, c = _params(net)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    return _batch_loss_and_grads(ws, bs, acts, u, c, X, y)


def accuracy(net: NetworkSpec, ds: Dataset) -> float:
    ws, bs, acts, u, c = _params(net)
    a = ds.inputs
    for w, b, act in zip(ws, bs, acts):
        a = act(a @ w.T + b)
    logits = a @ u.T + c
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


@dataclass(frozen=True)
class Checkpoint:
    """Snapshot taken after an epoch; enough to resume bit-identically."""

    epoch: int
    net: NetworkSpec
    velocities: tuple


def sgd_train(
    net_init: NetworkSpec,
    ds: Dataset,
    cfg: TrainConfig,
    checkpoint_epochs=(),
    resume_from: Checkpoint | None = None,
):
    """Train with mini-batch SGD + momentum; deterministic in cfg.seed.

    Weight decay is folded into the gradient before the momentum update,
    so learning_rate = 0 leaves the weights untouched. Returns the trained
    net, plus {epoch: Checkpoint} snapshots (taken after the named epochs)
    when any are requested. Resuming from a checkpoint replays the exact
    remaining schedule: shuffle streams are keyed by epoch and the decayed
    learning rate is recomputed per epoch, so the final weights match a
    straight-through run bit for bit.
    """
    if ds.dim != net_init.input_dim or ds.num_classes != net_init.num_classes:
        raise DimensionError("dataset and network shapes disagree")
    if resume_from is not None:
        ws, bs, acts, u, c = _params(resume_from.net)
        vel = [np.array(v) for v in resume_from.velocities]
        start_epoch = resume_from.epoch + 1
    else:
        ws, bs, acts, u, c = _params(net_init)
        vel = [np.zeros_like(p) for p in ws + bs + [u, c]]
        start_epoch = 0
    checkpoints = {}
    for epoch in range(start_epoch, cfg.epochs):
        decays = sum(1 for m in cfg.lr_milestones if m <= epoch)
        lr = cfg.learning_rate * cfg.lr_gamma**decays
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            try:
                loss, gws, gbs, gu, gc = _batch_loss_and_grads(
                    ws, bs, acts, u, c, ds.inputs[batch], ds.labels[batch]
                )
            except ModelError as exc:
                raise TrainingDivergedError(epoch) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            params = ws + bs + [u, c]
            grads = gws + gbs + [gu, gc]
            for p, g, v in zip(params, grads, vel):
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v += g
                p -= lr * v
        if epoch in checkpoint_epochs:
            checkpoints[epoch] = Checkpoint(
                epoch, _assemble(ws, bs, acts, u, c), tuple(np.array(v) for v in vel)
            )
    net = _assemble(ws, bs, acts, u, c)
    if checkpoint_epochs:
        return net, checkpoints
    return net
