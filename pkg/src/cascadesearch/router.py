"""Category routing: a softmax linear classifier plus a controllable oracle.

The oracle route stands in for a classifier of known accuracy so the
benchmark can sweep routing quality independently of training.  Its
draws are counter-based (Philox keyed by the oracle seed, counter taken
from a digest of the query embedding) so that routing is a pure function
of (oracle, query); engines stay immutable and safe to share across
threads.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, TrainingError

ROUTER_FORMAT = "cascadesearch-router"
ROUTER_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 40
    batch_size: int = 128
    l2_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be non-negative")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class SoftmaxRouter:
    """Multinomial logistic regression over embedding vectors."""

    weights: np.ndarray        # (C, dim) float64
    bias: np.ndarray           # (C,) float64
    class_labels: tuple[int, ...]
    metadata: dict | None = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if len(self.class_labels) != len(set(self.class_labels)):
            raise ValueError("class_labels repeat a label")
        if self.weights.shape != (len(self.class_labels), self.dim):
            raise ValueError("weights shape disagrees with class_labels")
        if self.bias.shape != (len(self.class_labels),):
            raise ValueError("bias shape disagrees with class_labels")
        self._label_arr = np.asarray(self.class_labels, dtype=np.int64)
        self._label_index = {int(l): i for i, l in enumerate(self.class_labels)}

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        """Class probabilities per row; rows sum to one for any finite input."""
        x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"embedding dim {x.shape[1]} != router dim {self.dim}")
        return _softmax(x @ self.weights.T + self.bias)

    def predict_top_m(self, embedding: np.ndarray, m: int) -> list[tuple[int, float]]:
        """Top m (label, probability) pairs, probability descending, ties by label."""
        if not 1 <= m <= self.num_classes:
            raise ValueError(f"m must lie in [1, {self.num_classes}], got {m}")
        probs = self.predict_proba(embedding)[0]
        order = np.lexsort((self._label_arr, -probs))[:m]
        return [(int(self._label_arr[i]), float(probs[i])) for i in order]

    def route(self, embedding: np.ndarray, m: int, true_tlc: int | None = None):
        return self.predict_top_m(embedding, m)


def loss_and_grad(
    router: SoftmaxRouter,
    embeddings: np.ndarray,
    labels,
    l2_lambda: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy with L2 penalty, and its analytic gradients.

    loss = mean_i(-log p(label_i)) + (l2_lambda / 2) * ||W||^2
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y = [router._label_index.get(int(l), -1) for l in labels]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if len(y) != x.shape[0]:
        raise ValueError("labels and rows differ in length")
    if min(y) < 0:
        bad = [int(l) for l in labels if int(l) not in router._label_index]
        raise ValueError(f"labels not known to the router: {bad[:5]}")
    if x.shape[1] != router.dim:
        raise ValueError(f"embedding dim {x.shape[1]} != router dim {router.dim}")
    n = x.shape[0]
    y = np.asarray(y, dtype=np.int64)
    logits = x @ router.weights.T + router.bias
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    data_loss = np.mean(log_norm - z[np.arange(n), y])
    loss = data_loss + 0.5 * l2_lambda * float(np.sum(router.weights**2))
    probs = _softmax(logits)
    probs[np.arange(n), y] -= 1.0
    probs /= n
    grad_w = probs.T @ x + l2_lambda * router.weights
    grad_b = probs.sum(axis=0)
    return float(loss), grad_w, grad_b


def train(
    embeddings: np.ndarray,
    labels,
    config: TrainConfig = TrainConfig(),
) -> tuple[SoftmaxRouter, list[float]]:
    """Mini-batch gradient descent from zero-initialized parameters.

    Batch order reshuffles every epoch from a generator seeded with
    ``config.seed``.  Returns the router and the per-epoch mean training
    loss trace.
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = [int(l) for l in labels]
    if x.shape[0] == 0:
        raise ValueError("no training rows")
    if len(labels) != x.shape[0]:
        raise ValueError("labels and rows differ in length")
    class_labels = tuple(sorted(set(labels)))
    if len(class_labels) < 2:
        raise TrainingError("training needs at least two distinct labels")
    router = SoftmaxRouter(
        weights=np.zeros((len(class_labels), x.shape[1])),
        bias=np.zeros(len(class_labels)),
        class_labels=class_labels,
    )
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []
    n = x.shape[0]
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            rows = perm[start : start + config.batch_size]
            loss, grad_w, grad_b = loss_and_grad(
                router, x[rows], [labels[r] for r in rows], config.l2_lambda
            )
            router.weights -= config.learning_rate * grad_w
            router.bias -= config.learning_rate * grad_b
            batch_losses.append(loss)
        trace.append(float(np.mean(batch_losses)))
    return router, trace


def split_train_holdout(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of range(n); the last fifth is the held-out part."""
    if n < 5:
        raise ValueError("need at least 5 rows to hold out 20%")
    perm = np.random.default_rng(seed).permutation(n)
    cut = n - n // 5
    return perm[:cut], perm[cut:]


@dataclass(eq=False)
class OracleRouter:
    """Routes to the true category with a fixed probability.

    On a miss the predicted category is uniform over the other labels.
    Draws are pure functions of (seed, embedding bytes), so instances
    are immutable and thread-safe.
    """

    accuracy: float
    class_labels: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        self.class_labels = tuple(int(l) for l in self.class_labels)
        if not 0.0 <= self.accuracy <= 1.0:
            raise ConfigError("oracle accuracy must lie in [0, 1]")
        if len(self.class_labels) != len(set(self.class_labels)):
            raise ConfigError("class_labels repeat a label")
        if not self.class_labels:
            raise ConfigError("oracle needs at least one class label")
        if len(self.class_labels) == 1 and self.accuracy < 1.0:
            raise ConfigError("an oracle with one class cannot miss")

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    def _draws(self, embedding: np.ndarray) -> tuple[float, int]:
        digest = hashlib.sha256(
            np.ascontiguousarray(embedding, dtype=np.float32).tobytes()
        ).digest()
        counter = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=counter))
        u = float(gen.random())
        j = int(gen.integers(0, max(self.num_classes - 1, 1)))
        return u, j

    def oracle_predict(self, true_tlc: int, embedding: np.ndarray) -> int:
        if int(true_tlc) not in self.class_labels:
            raise ValueError(f"true_tlc {true_tlc} not among the oracle's labels")
        u, j = self._draws(embedding)
        if u < self.accuracy or self.num_classes == 1:
            return int(true_tlc)
        others = [l for l in self.class_labels if l != int(true_tlc)]
        return others[j]

    def route(self, embedding: np.ndarray, m: int, true_tlc: int | None = None):
        """Drawn label first, then the rest by their sampling probability."""
        if true_tlc is None:
            raise ValueError("an oracle router needs the query's true category")
        if not 1 <= m <= self.num_classes:
            raise ValueError(f"m must lie in [1, {self.num_classes}], got {m}")
        drawn = self.oracle_predict(true_tlc, embedding)
        miss_p = (1.0 - self.accuracy) / max(self.num_classes - 1, 1)
        prob_of = {
            l: (self.accuracy if l == int(true_tlc) else miss_p) for l in self.class_labels
        }
        rest = sorted(
            (l for l in self.class_labels if l != drawn),
            key=lambda l: (-prob_of[l], l),
        )
        return [(l, prob_of[l]) for l in [drawn, *rest][:m]]


def save_router(router: SoftmaxRouter | OracleRouter, path) -> None:
    if isinstance(router, SoftmaxRouter):
        doc = {
            "format": ROUTER_FORMAT,
            "version": ROUTER_VERSION,
            "kind": "softmax",
            "dim": router.dim,
            "class_labels": list(router.class_labels),
            "weights": router.weights.tolist(),
            "bias": router.bias.tolist(),
            "metadata": router.metadata or {},
        }
    elif isinstance(router, OracleRouter):
        doc = {
            "format": ROUTER_FORMAT,
            "version": ROUTER_VERSION,
            "kind": "oracle",
            "accuracy": router.accuracy,
            "seed": router.seed,
            "class_labels": list(router.class_labels),
        }
    else:
        raise TypeError(f"cannot save router of type {type(router)!r}")
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_router(path) -> SoftmaxRouter | OracleRouter:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != ROUTER_FORMAT:
        raise FormatError(f"{path}: not a router file")
    if doc.get("version") != ROUTER_VERSION:
        raise FormatError(f"{path}: unsupported router version {doc.get('version')}")
    kind = doc.get("kind")
    if kind == "softmax":
        return SoftmaxRouter(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=np.asarray(doc["bias"], dtype=np.float64),
            class_labels=tuple(int(l) for l in doc["class_labels"]),
            metadata=doc.get("metadata") or None,
        )
    if kind == "oracle":
        return OracleRouter(
            accuracy=float(doc["accuracy"]),
            class_labels=tuple(int(l) for l in doc["class_labels"]),
            seed=int(doc["seed"]),
        )
    raise FormatError(f"{path}: unknown router kind {kind!r}")
