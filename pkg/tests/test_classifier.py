import numpy as np
import pytest
from scipy.stats import norm

from drdselect.classifier import (
    BayesClassifier,
    Classifier,
    ClassifierConfig,
    evaluate,
    init_params,
    loss_and_grad,
    train_classifier,
)
from drdselect.gmm import LabeledDataset, make_world, sample_dataset


def toy(X, y, C=2):
    X = np.asarray(X, dtype=float)
    return LabeledDataset(np.arange(len(X)), X, y, np.array(["clean"] * len(X), dtype=object), C)


def separable(seed=0, n=40):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal([-3, 1], 0.5, (n, 2)), rng.normal([3, -1], 0.5, (n, 2))])
    return toy(X, np.repeat([0, 1], n))


@pytest.mark.parametrize("kind, C", [("logistic", 2), ("logistic", 3), ("mlp2", 3)])
def test_gradient_matches_finite_differences(kind, C):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(25, 2))
    y = rng.integers(0, C, 25)
    params = rng.normal(scale=0.7, size=len(init_params(kind, 2, C, 5, 0)))
    model = Classifier(kind, 2, C, 5, params)
    _, grad = loss_and_grad(model, X, y)
    h = 1e-6
    worst = 0.0
    for _ in range(60):
        v = rng.normal(size=params.shape)
        v /= np.linalg.norm(v)
        up = loss_and_grad(Classifier(kind, 2, C, 5, params + h * v), X, y)[0]
        dn = loss_and_grad(Classifier(kind, 2, C, 5, params - h * v), X, y)[0]
        fd, an = (up - dn) / (2 * h), grad @ v
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-8))
    assert worst < 1e-6


def test_separable_reaches_full_training_accuracy():
    ds = separable()
    dyn = train_classifier(ds, ClassifierConfig(epochs=500))
    assert evaluate(dyn.model, ds) == 1.0
    assert dyn.correct[-1].all()


def test_dynamics_shapes_and_probabilities():
    ds = separable(n=10)
    dyn = train_classifier(ds, ClassifierConfig(kind="mlp2", epochs=7, seed=3))
    assert dyn.probs.shape == (7, 20, 2) and dyn.correct.shape == (7, 20)
    assert np.allclose(dyn.probs.sum(axis=2), 1.0, atol=1e-9)
    assert len(dyn.losses) == 7


def test_zero_epochs_is_chance(w2):
    ds = sample_dataset(w2, 500, 1)
    for kind in ("logistic", "mlp2"):
        dyn = train_classifier(ds, ClassifierConfig(kind=kind, epochs=0, seed=2))
        assert np.allclose(dyn.model.predict_proba(ds.X), 0.5)
        assert abs(evaluate(dyn.model, ds) - 0.5) <= 0.05


def test_mlp2_learns_and_forgets():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    ds = toy(X, (X[:, 0] * X[:, 1] > 0).astype(int))
    dyn = train_classifier(ds, ClassifierConfig(kind="mlp2", epochs=400, lr=0.5, seed=1))
    assert dyn.losses[-1] < 0.9 * dyn.losses[0]
    assert evaluate(dyn.model, ds) > 0.7


def test_training_is_deterministic():
    ds = separable(n=15)
    cfg = ClassifierConfig(kind="mlp2", epochs=20, seed=9)
    assert np.array_equal(train_classifier(ds, cfg).model.params, train_classifier(ds, cfg).model.params)


def test_missing_class_and_empty_errors():
    ds = separable(n=5)
    with pytest.raises(ValueError, match="classes"):
        train_classifier(ds.subset(np.arange(5)), num_classes=2)
    with pytest.raises(ValueError):
        train_classifier(ds.subset([]))
    with pytest.raises(ValueError):
        evaluate(Classifier("logistic", 2, 2, 1, np.zeros(6)), ds.subset([]))


def test_divergence_is_reported():
    ds = separable(n=5)
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="diverged"):
        train_classifier(ds, ClassifierConfig(lr=float("inf"), epochs=5))


def test_bayes_rule_on_w2(w2):
    test = sample_dataset(w2, 5000, 11)
    expected = 1 - norm.cdf(-2.0)
    assert expected == pytest.approx(0.9772, abs=1e-4)
    assert abs(evaluate(BayesClassifier(w2), test) - expected) < 0.02


def test_interpolating_model_on_its_own_data():
    ds = separable(seed=2)
    model = train_classifier(ds, ClassifierConfig(epochs=300)).model
    assert evaluate(model, ds) == 1.0


def test_constant_model_is_half(w2):
    test = sample_dataset(w2, 500, 5)
    const = Classifier("logistic", 2, 2, 1, np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
    assert evaluate(const, test) == 0.5


def test_logistic_near_bayes_on_w2(w2):
    train, test = sample_dataset(w2, 500, 3), sample_dataset(w2, 2000, 4)
    model = train_classifier(train, ClassifierConfig(record=False)).model
    assert evaluate(model, test) > evaluate(BayesClassifier(w2), test) - 0.02
