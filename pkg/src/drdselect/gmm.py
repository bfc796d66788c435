"""Labeled Gaussian-mixture worlds with exact diffused densities.

Diffusing a Gaussian component ``N(m, S)`` to timestep ``t`` gives
``N(sqrt(a) m, a S + (1 - a) I)`` with ``a = alpha_bar_t``, so densities,
scores and class posteriors of the noised data stay in closed form at every
``t``.  That closed form is what the analytic denoiser and all of the oracle
checks are built on.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .kernels import component_terms
from .rng import substream

MAX_DIM = 16
INLIER = "inlier"
OUTLIER = "injected_outlier"


class GmmWorld:
    """Class-conditional Gaussian mixtures under a uniform class prior.

    Parameters
    ----------
    classes : sequence of sequences of (weight, mean, covariance)
        ``classes[c]`` lists the mixture components of class ``c``.
    name : str
        Preset name or ``"custom"``.
    """

    def __init__(self, classes: Sequence[Sequence[tuple]], name: str = "custom"):
        if len(classes) < 1:
            raise ValueError("world needs at least one class")
        weights, means, covs, owner = [], [], [], []
        for c, comps in enumerate(classes):
            if len(comps) < 1:
                raise ValueError(f"class {c} has no components")
            w_sum = 0.0
            for w, m, S in comps:
                weights.append(float(w))
                means.append(np.atleast_1d(np.asarray(m, dtype=np.float64)))
                covs.append(np.atleast_2d(np.asarray(S, dtype=np.float64)))
                owner.append(c)
                w_sum += float(w)
            if abs(w_sum - 1.0) > 1e-12:
                raise ValueError(f"component weights of class {c} sum to {w_sum}")
        self.name = name
        self.num_classes = len(classes)
        self.weights = np.array(weights)
        self.means = np.stack(means)
        self.dim = self.means.shape[1]
        if self.dim > MAX_DIM:
            raise ValueError(f"dimension {self.dim} exceeds the cap of {MAX_DIM}")
        self.covs = np.stack(covs)
        if self.covs.shape[1:] != (self.dim, self.dim):
            raise ValueError("covariance shapes do not match the mean dimension")
        if not np.allclose(self.covs, np.swapaxes(self.covs, 1, 2), atol=0, rtol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            self.chols = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        self.owner = np.array(owner, dtype=np.int64)
        if np.any(self.weights < 0):
            raise ValueError("component weights must be nonnegative")
        self._cache: dict[float, tuple] = {}

    def __repr__(self) -> str:
        return f"GmmWorld({self.name!r}, C={self.num_classes}, d={self.dim}, K={len(self.weights)})"

    @property
    def class_slices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.owner == c) for c in range(self.num_classes)]

    def to_dict(self) -> dict:
        out = []
        for c in range(self.num_classes):
            out.append(
                [
                    {
                        "weight": float(self.weights[k]),
                        "mean": self.means[k].tolist(),
                        "cov": self.covs[k].tolist(),
                    }
                    for k in np.flatnonzero(self.owner == c)
                ]
            )
        return {"name": self.name, "classes": out}

    @classmethod
    def from_dict(cls, spec: dict) -> "GmmWorld":
        classes = [
            [(comp["weight"], comp["mean"], comp["cov"]) for comp in comps]
            for comps in spec["classes"]
        ]
        return cls(classes, name=spec.get("name", "custom"))

    def diffused(self, alpha_bar: float):
        """Means, precisions and log-normalisers of every component at ``alpha_bar``."""
        key = float(alpha_bar)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        a = key
        d = self.dim
        means_t = np.sqrt(a) * self.means
        covs_t = a * self.covs + (1.0 - a) * np.eye(d)[None]
        chol = np.linalg.cholesky(covs_t)
        assert np.all(np.isfinite(chol)), "diffused covariance is not positive definite"
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        eye = np.broadcast_to(np.eye(d), covs_t.shape)
        prec = np.linalg.solve(covs_t, eye)
        prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        log_consts = log_w - 0.5 * (d * np.log(2.0 * np.pi) + logdet)
        out = (means_t, prec, log_consts)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _terms(self, x: np.ndarray, alpha_bar: float):
        means_t, prec, log_consts = self.diffused(alpha_bar)
        return component_terms(x, means_t, prec, log_consts)

    def class_log_densities(self, x, alpha_bar: float) -> np.ndarray:
        """``log q_t(x | c)`` for every class, shape ``(n, C)``."""
        x2 = _as_batch(x, self.dim)
        logp, _ = self._terms(x2, alpha_bar)
        return np.stack([logsumexp(logp[:, s], axis=1) for s in self.class_slices], axis=1)


def _as_batch(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x


def _alpha_bar(t, schedule) -> float:
    if t == 0:
        return 1.0
    if schedule is None:
        raise ValueError("a schedule is required for t > 0")
    if not 0 <= t <= schedule.T_train:
        raise ValueError(f"timestep {t} outside [0, {schedule.T_train}]")
    return float(schedule.alpha_bars[t])


def log_density(world: GmmWorld, x, c=None, t: int = 0, schedule=None):
    """Exact ``log q_t(x | c)``; ``c=None`` gives the class-marginal density."""
    single = np.ndim(x) == 1
    L = world.class_log_densities(x, _alpha_bar(t, schedule))
    if c is None:
        out = logsumexp(L, axis=1) - np.log(world.num_classes)
    else:
        c = np.asarray(c)
        out = L[:, int(c)] if c.ndim == 0 else L[np.arange(len(L)), c]
    return float(out[0]) if single else out


def exact_posterior(world: GmmWorld, x, t: int = 0, schedule=None) -> np.ndarray:
    """``p(c | x_t)`` under the uniform prior, shape ``(C,)`` or ``(n, C)``."""
    single = np.ndim(x) == 1
    L = world.class_log_densities(x, _alpha_bar(t, schedule))
    post = np.exp(L - logsumexp(L, axis=1, keepdims=True))
    return post[0] if single else post


def log_posterior(world: GmmWorld, x, t: int = 0, schedule=None) -> np.ndarray:
    L = world.class_log_densities(x, _alpha_bar(t, schedule))
    return L - logsumexp(L, axis=1, keepdims=True)


def score_from_alpha_bar(world: GmmWorld, x: np.ndarray, alpha_bar: float, c) -> np.ndarray:
    x = _as_batch(x, world.dim)
    logp, grad = world._terms(x, alpha_bar)
    if c is None:
        mask = np.ones_like(logp, dtype=bool)
    else:
        c_rows = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),))
        if np.any(c_rows < 0) or np.any(c_rows >= world.num_classes):
            raise ValueError(f"class label out of range [0, {world.num_classes})")
        mask = world.owner[None, :] == c_rows[:, None]
    logp = np.where(mask, logp, -np.inf)
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return np.einsum("nk,nkd->nd", resp, grad)


def score_xt(world: GmmWorld, x_t, t: int, c, schedule) -> np.ndarray:
    """``grad_x log q_t(x | c)`` (``c=None`` for the marginal)."""
    if t < 1:
        raise ValueError("score_xt needs t >= 1")
    single = np.ndim(x_t) == 1
    s = score_from_alpha_bar(world, x_t, _alpha_bar(t, schedule), c)
    return s[0] if single else s


@dataclass
class AnalyticDenoiser:
    """Bayes-optimal noise predictor ``-sqrt(1 - alpha_bar) * score``."""

    world: GmmWorld
    schedule: object
    kind: str = field(default="analytic", init=False)

    @property
    def dim(self) -> int:
        return self.world.dim

    @property
    def num_classes(self) -> int:
        return self.world.num_classes

    def predict(self, x_t, t, c) -> np.ndarray:
        single = np.ndim(x_t) == 1
        x = _as_batch(x_t, self.dim)
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            out = self._predict_at(x, int(t_arr), c)
        else:
            out = np.empty_like(x)
            c_rows = np.broadcast_to(np.asarray(c), (len(x),))
            for s in np.unique(t_arr):
                rows = np.flatnonzero(t_arr == s)
                out[rows] = self._predict_at(x[rows], int(s), c_rows[rows])
        return out[0] if single else out

    def _predict_at(self, x, t: int, c) -> np.ndarray:
        if t == 0:
            return np.zeros_like(x)
        a = float(self.schedule.alpha_bars[t])
        return -np.sqrt(1.0 - a) * score_from_alpha_bar(self.world, x, a, c)


def analytic_denoiser(world: GmmWorld, schedule) -> AnalyticDenoiser:
    return AnalyticDenoiser(world, schedule)


# --------------------------------------------------------------------------
# presets


def _two_gaussians(offset: float, dim: int = 2) -> list:
    e = np.zeros(dim)
    e[0] = offset
    eye = np.eye(dim)
    return [[(1.0, -e, eye)], [(1.0, e, eye)]]


PRESETS = {
    "W2": lambda: GmmWorld(_two_gaussians(2.0), name="W2"),
    "W2overlap": lambda: GmmWorld(_two_gaussians(1.0), name="W2overlap"),
    "W2o": lambda: GmmWorld(_two_gaussians(1.0), name="W2o"),
    "W1overlap": lambda: GmmWorld(_two_gaussians(1.0, dim=1), name="W1overlap"),
    "G2": lambda: GmmWorld([[(1.0, np.zeros(2), np.eye(2))]], name="G2"),
}

# dataset-level outlier injection attached to a preset: (fraction, offset_scale)
PRESET_OUTLIERS = {"W2o": (0.1, 10.0)}


def make_world(name_or_spec) -> GmmWorld:
    if isinstance(name_or_spec, GmmWorld):
        return name_or_spec
    if isinstance(name_or_spec, dict):
        return GmmWorld.from_dict(name_or_spec)
    try:
        return PRESETS[name_or_spec]()
    except KeyError:
        raise ValueError(
            f"unknown world preset {name_or_spec!r}; choose from {sorted(PRESETS)}"
        ) from None


# --------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    """Feature matrix with labels, contiguous ids and per-record provenance."""

    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    provenance: np.ndarray
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=object)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def check(self) -> None:
        assert np.array_equal(self.ids, np.arange(len(self.ids))), "ids must be 0..n-1"
        assert np.all((self.y >= 0) & (self.y < self.num_classes))

    def subset(self, ids) -> "LabeledDataset":
        """Records with the given ids (keeps original ids)."""
        pos = np.searchsorted(self.ids, np.sort(np.asarray(ids, dtype=np.int64)))
        return LabeledDataset(
            self.ids[pos], self.X[pos], self.y[pos], self.provenance[pos],
            self.num_classes, self.seed,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def sample_dataset(world: GmmWorld, n_per_class: int, seed: int) -> LabeledDataset:
    """Draw ``n_per_class`` i.i.d. records from every class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    xs, ys = [], []
    for c, comps in enumerate(world.class_slices):
        rng = substream(seed, "sample_dataset", c)
        w = world.weights[comps]
        pick = comps[rng.choice(len(comps), size=n_per_class, p=w / w.sum())]
        z = rng.standard_normal((n_per_class, world.dim))
        xs.append(world.means[pick] + np.einsum("nij,nj->ni", world.chols[pick], z))
        ys.append(np.full(n_per_class, c))
    X = np.concatenate(xs)
    n = len(X)
    return LabeledDataset(
        np.arange(n), X, np.concatenate(ys), np.full(n, INLIER, dtype=object),
        world.num_classes, seed,
    )


def outlier_direction(world: GmmWorld) -> np.ndarray:
    """A unit vector orthogonal to every component mean."""
    _, s, vt = np.linalg.svd(world.means, full_matrices=True)
    rank = int(np.sum(s > 1e-10 * max(1.0, s.max(initial=0.0))))
    if rank >= world.dim:
        raise ValueError("class means span the whole space; no orthogonal direction")
    u = vt[rank]
    return u if u[np.argmax(np.abs(u))] > 0 else -u


def inject_outliers(
    dataset: LabeledDataset,
    world: GmmWorld,
    fraction: float,
    offset_scale: float,
    seed: int,
) -> LabeledDataset:
    """Replace ``round(fraction * n_c)`` records per class by far-away draws.

    Replacements come from ``N(offset_scale * u, 0.25 I)`` with ``u`` from
    :func:`outlier_direction`; labels are kept.
    """
    if not 0 <= fraction < 0.5:
        raise ValueError(f"fraction must lie in [0, 0.5), got {fraction}")
    X = dataset.X.copy()
    prov = dataset.provenance.copy()
    if fraction > 0:
        u = outlier_direction(world)
        for c in range(dataset.num_classes):
            rows = np.flatnonzero(dataset.y == c)
            m = int(round(fraction * len(rows)))
            if m == 0:
                continue
            rng = substream(seed, "inject_outliers", c)
            chosen = np.sort(rng.choice(rows, size=m, replace=False))
            X[chosen] = offset_scale * u + 0.5 * rng.standard_normal((m, dataset.dim))
            prov[chosen] = OUTLIER
    return LabeledDataset(dataset.ids.copy(), X, dataset.y.copy(), prov, dataset.num_classes, dataset.seed)


def write_dataset_csv(dataset: LabeledDataset, path, header: str | None = None) -> None:
    """CSV with columns ``sample_id,label,provenance,f0..f{d-1}``.

    ``header`` is written first as a ``#`` comment line when given.
    """
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "provenance"] + [f"f{j}" for j in range(dataset.dim)])
        for i in range(len(dataset)):
            w.writerow(
                [int(dataset.ids[i]), int(dataset.y[i]), dataset.provenance[i]]
                + [repr(float(v)) for v in dataset.X[i]]
            )


def read_dataset_csv(path, num_classes: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    head, body = rows[0], rows[1:]
    if head[:3] != ["sample_id", "label", "provenance"]:
        raise ValueError(f"{path}: unexpected dataset header {head[:3]}")
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    y = np.array([int(r[1]) for r in body], dtype=np.int64)
    prov = np.array([r[2] for r in body], dtype=object)
    X = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64)
    C = num_classes if num_classes is not None else int(y.max()) + 1
    return LabeledDataset(ids, X.reshape(len(body), len(head) - 3), y, prov, C)
