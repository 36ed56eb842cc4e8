"""Synthetic federated lifelong-learning substrate.

Clients learn sequences of Gaussian-blob classification tasks with a shared
multinomial logistic-regression model (flattened weight vector of size
features*classes + classes).  The substrate is deliberately small: convex,
fast, deterministic, and still exhibits catastrophic forgetting and
poisoning effects end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    task: int
    labels: tuple[int, ...]  # global class ids used by this task
    means: np.ndarray  # (len(labels), features) per-class Gaussian means
    stddev: float
    samples_per_class: int


@dataclass
class TaskData:
    spec: TaskSpec
    x: np.ndarray  # (n, features)
    y: np.ndarray  # (n,) global class ids


@dataclass(frozen=True)
class ForgettingParams:
    margin: float = 0.01  # slack subtracted from each CE increase
    confidence_floor: float = 0.6  # anchor admission threshold


@dataclass(frozen=True)
class FusionPolicy:
    knowledge_weight: float = 0.3  # 0 disables knowledge replay
    retrieve_count: int = 10
    # "latest": probe with the newest knowledge only (plasticity-friendly);
    # "per-task": probe once per completed task to surface old-task anchors
    # (retention-friendly)
    probe_policy: str = "latest"


def model_dim(features: int, classes: int) -> int:
    return features * classes + classes


def init_model(features: int, classes: int) -> np.ndarray:
    return np.zeros(model_dim(features, classes))


def _unpack(weights: np.ndarray, features: int, classes: int):
    w = weights[: features * classes].reshape(classes, features)
    b = weights[features * classes:]
    return w, b


def _logits(weights: np.ndarray, x: np.ndarray, features: int, classes: int):
    w, b = _unpack(weights, features, classes)
    return x @ w.T + b


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(weights, x, features, classes):
    return _softmax(_logits(weights, x, features, classes))


def accuracy(weights, data: TaskData, features: int, classes: int) -> float:
    z = _logits(weights, data.x, features, classes)
    return float(np.mean(z.argmax(axis=1) == data.y))


def cross_entropy(weights, data: TaskData, features: int, classes: int) -> float:
    p = predict_proba(weights, data.x, features, classes)
    return float(-np.mean(np.log(np.clip(p[np.arange(len(data.y)), data.y], 1e-300, None))))


# ---------------------------------------------------------------------------
# task generation


def gen_tasks(seed: int, n_clients: int, n_tasks: int, classes_per_task: int,
              features: int, n_classes: int, samples_per_class: int = 20,
              stddev: float = 1.0, mean_scale: float = 3.0):
    """Per-client task sequences, pairwise distinct at every position.

    Every global class keeps one Gaussian mean across all tasks and clients,
    so different clients' tasks over shared classes carry transferable
    structure.  Raises when fewer than n_clients distinct label combinations
    exist.
    """
    from math import comb

    if comb(n_classes, classes_per_task) < n_clients:
        raise ValueError(
            "not enough distinct label combinations for position-wise "
            f"distinct tasks: C({n_classes},{classes_per_task}) < {n_clients}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    class_means = rng.standard_normal((n_classes, features)) * mean_scale
    sequences: list[list[TaskSpec]] = [[] for _ in range(n_clients)]
    for t in range(1, n_tasks + 1):
        chosen: set[tuple[int, ...]] = set()
        for i in range(n_clients):
            while True:
                labels = tuple(
                    sorted(rng.choice(n_classes, size=classes_per_task, replace=False))
                )
                if labels not in chosen:
                    chosen.add(labels)
                    break
            sequences[i].append(
                TaskSpec(
                    task=t,
                    labels=labels,
                    means=class_means[list(labels)].copy(),
                    stddev=stddev,
                    samples_per_class=samples_per_class,
                )
            )
    return sequences


def sample_task_data(spec: TaskSpec, seed: int) -> TaskData:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    xs, ys = [], []
    for j, label in enumerate(spec.labels):
        pts = spec.means[j] + rng.standard_normal(
            (spec.samples_per_class, spec.means.shape[1])
        ) * spec.stddev
        xs.append(pts)
        ys.append(np.full(spec.samples_per_class, label, dtype=np.int64))
    return TaskData(spec=spec, x=np.vstack(xs), y=np.concatenate(ys))


# ---------------------------------------------------------------------------
# local training and knowledge extraction


class TrainingDiverged(Exception):
    pass


def train_local(weights: np.ndarray, data: TaskData, features: int, classes: int,
                epochs: int, lr: float, knowledge_kind: str = "parameters",
                weight_decay: float = 0.0):
    """Full-batch gradient descent on softmax cross-entropy, with optional
    L2 weight decay.

    Returns (updated weights, knowledge).  Knowledge is the post-training
    parameter vector, or the parameter delta when knowledge_kind is
    "gradient-delta".
    """
    if len(data.y) == 0:
        raise ValueError("empty training data")
    w = weights.copy()
    n = len(data.y)
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), data.y] = 1.0
    for _ in range(epochs):
        p = predict_proba(w, data.x, features, classes)
        err = (p - onehot) / n
        grad_w = err.T @ data.x
        grad_b = err.sum(axis=0)
        if weight_decay:
            w *= 1.0 - lr * weight_decay
        w[: features * classes] -= lr * grad_w.ravel()
        w[features * classes:] -= lr * grad_b
        if not np.all(np.isfinite(w)):
            raise TrainingDiverged(
                f"non-finite weights after update (lr={lr}, epochs={epochs})"
            )
    if knowledge_kind == "parameters":
        knowledge = w.copy()
    elif knowledge_kind == "gradient-delta":
        knowledge = w - weights
    else:
        raise ValueError(f"unknown knowledge kind {knowledge_kind!r}")
    return w, knowledge


def fuse(global_model: np.ndarray, retrieved: list[np.ndarray],
         policy: FusionPolicy) -> np.ndarray:
    """Convex combination of the global model and retrieved knowledge mean."""
    if not retrieved:
        return global_model.copy()
    lam = policy.knowledge_weight
    mean_k = np.mean(np.stack(retrieved), axis=0)
    return (1.0 - lam) * global_model + lam * mean_k


# ---------------------------------------------------------------------------
# forgetting metrics


def anchor_set(ref_weights: np.ndarray, data: TaskData, features: int,
               classes: int, params: ForgettingParams) -> np.ndarray:
    """Indices of examples the reference model classifies correctly with
    predicted-class probability >= the confidence floor."""
    p = predict_proba(ref_weights, data.x, features, classes)
    pred = p.argmax(axis=1)
    conf = p.max(axis=1)
    return np.flatnonzero((pred == data.y) & (conf >= params.confidence_floor))


def forgetting_score(ref_weights: np.ndarray, cur_weights: np.ndarray,
                     data: TaskData, features: int, classes: int,
                     params: ForgettingParams) -> tuple[float, int]:
    """Mean clipped cross-entropy increase over the reference model's
    anchors; (score, anchor count).  Empty anchor set scores 0."""
    idx = anchor_set(ref_weights, data, features, classes, params)
    if len(idx) == 0:
        return 0.0, 0
    x, y = data.x[idx], data.y[idx]
    pr = predict_proba(ref_weights, x, features, classes)
    pc = predict_proba(cur_weights, x, features, classes)
    ce_ref = -np.log(np.clip(pr[np.arange(len(y)), y], 1e-300, None))
    ce_cur = -np.log(np.clip(pc[np.arange(len(y)), y], 1e-300, None))
    inc = np.maximum(0.0, ce_cur - ce_ref - params.margin)
    return float(inc.mean()), int(len(idx))


def forgetting_aggregate(scores: list[float], anchor_counts: list[int]) -> float:
    """Sample-weighted average of per-task forgetting scores."""
    total = sum(anchor_counts)
    if total == 0:
        return 0.0
    return sum(s * n for s, n in zip(scores, anchor_counts)) / total


# ---------------------------------------------------------------------------
# attacks


def attack_label_flip(data: TaskData, fraction: float, seed: int) -> TaskData:
    """Remap round(fraction*n) labels uniformly to a different task label."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    n = len(data.y)
    count = int(round(fraction * n))
    if count == 0:
        return TaskData(spec=data.spec, x=data.x.copy(), y=data.y.copy())
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = rng.choice(n, size=count, replace=False)
    labels = np.array(data.spec.labels)
    y = data.y.copy()
    for i in idx:
        others = labels[labels != y[i]]
        y[i] = rng.choice(others)
    return TaskData(spec=data.spec, x=data.x.copy(), y=y)


def attack_model_scale(weights: np.ndarray, gamma: float) -> np.ndarray:
    if not np.isfinite(gamma):
        raise ValueError("gamma must be finite")
    return gamma * weights
