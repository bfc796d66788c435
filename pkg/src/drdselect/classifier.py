"""Proxy downstream classifiers trained by full-batch gradient descent.

``logistic`` is multinomial logistic regression (zero init, so seed-free);
``mlp2`` has one tanh hidden layer with a seeded init and a zero output layer.  Training records the
per-epoch class probabilities and correctness of every training sample,
which feed the forgetting and EL2N baselines.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .rng import substream


@dataclass
class ClassifierConfig:
    kind: str = "logistic"
    epochs: int = 300
    lr: float = 0.5
    hidden: int = 16
    seed: int = 0
    record: bool = True


@dataclass
class Classifier:
    kind: str
    d: int
    C: int
    hidden: int
    params: np.ndarray

    def unpack(self):
        d, C, h = self.d, self.C, self.hidden
        p = self.params
        if self.kind == "logistic":
            return p[: C * d].reshape(C, d), p[C * d :]
        o = 0
        W1 = p[o : o + h * d].reshape(h, d); o += h * d
        b1 = p[o : o + h]; o += h
        W2 = p[o : o + C * h].reshape(C, h); o += C * h
        return W1, b1, W2, p[o : o + C]

    def logits(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kind == "logistic":
            W, b = self.unpack()
            return X @ W.T + b
        W1, b1, W2, b2 = self.unpack()
        return np.tanh(X @ W1.T + b1) @ W2.T + b2

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)


@dataclass
class BayesClassifier:
    """Ground-truth Bayes rule of a :class:`~drdselect.gmm.GmmWorld`."""

    world: object

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.world.class_log_densities(X, 1.0), axis=1)


@dataclass
class TrainingDynamics:
    ids: np.ndarray
    labels: np.ndarray
    model: Classifier
    config: ClassifierConfig
    probs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    correct: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    losses: list = field(default_factory=list)


def init_params(kind: str, d: int, C: int, hidden: int, seed: int) -> np.ndarray:
    if kind == "logistic":
        return np.zeros(C * d + C)
    if kind != "mlp2":
        raise ValueError(f"unknown classifier kind {kind!r}")
    # random hidden layer, zero output layer: the untrained model predicts uniformly
    rng = substream(seed, "classifier_init")
    W1 = rng.uniform(-1, 1, (hidden, d)) / np.sqrt(d)
    return np.concatenate([W1.ravel(), np.zeros(hidden), np.zeros(C * hidden), np.zeros(C)])


def loss_and_grad(model: Classifier, X, y):
    """Mean cross-entropy and its analytic gradient w.r.t. ``model.params``."""
    n = len(X)
    Y = np.eye(model.C)[y]
    if model.kind == "logistic":
        W, b = model.unpack()
        logits = X @ W.T + b
        lp = log_softmax(logits, axis=1)
        g = (np.exp(lp) - Y) / n
        grad = np.concatenate([(g.T @ X).ravel(), g.sum(axis=0)])
    else:
        W1, b1, W2, b2 = model.unpack()
        h = np.tanh(X @ W1.T + b1)
        lp = log_softmax(h @ W2.T + b2, axis=1)
        g = (np.exp(lp) - Y) / n
        gh = (g @ W2) * (1.0 - h * h)
        grad = np.concatenate([(gh.T @ X).ravel(), gh.sum(axis=0), (g.T @ h).ravel(), g.sum(axis=0)])
    loss = float(-np.sum(lp * Y) / n)
    return loss, grad


def train_classifier(subset, config: ClassifierConfig | None = None, num_classes: int | None = None) -> TrainingDynamics:
    """Full-batch gradient descent on ``subset`` (a LabeledDataset)."""
    cfg = config or ClassifierConfig()
    C = num_classes or subset.num_classes
    X, y = subset.X, subset.y
    if len(X) == 0:
        raise ValueError("cannot train on an empty subset")
    missing = sorted(set(range(C)) - set(int(v) for v in y))
    if missing:
        raise ValueError(f"subset has no samples of classes {missing}")
    model = Classifier(cfg.kind, X.shape[1], C, cfg.hidden, init_params(cfg.kind, X.shape[1], C, cfg.hidden, cfg.seed))
    probs, correct, losses = [], [], []
    for epoch in range(cfg.epochs):
        loss, grad = loss_and_grad(model, X, y)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"classifier diverged at epoch {epoch} (loss={loss})")
        model.params = model.params - cfg.lr * grad
        losses.append(loss)
        if cfg.record:
            p = model.predict_proba(X)
            probs.append(p)
            correct.append(np.argmax(p, axis=1) == y)
    dyn = TrainingDynamics(subset.ids.copy(), y.copy(), model, cfg, losses=losses)
    if cfg.record and probs:
        dyn.probs = np.stack(probs)
        dyn.correct = np.stack(correct)
    return dyn


def evaluate(model, test) -> float:
    """Fraction of ``test`` predicted correctly."""
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(model.predict(test.X) == test.y))
