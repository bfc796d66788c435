"""Denoiser contract and a small MLP noise predictor trained by hand-written backprop.

A denoiser is anything with ``predict(x_t, t, c) -> eps_hat`` plus the
descriptors ``kind``, ``dim`` and ``num_classes``; :class:`~drdselect.gmm.AnalyticDenoiser`
and :class:`MlpDenoiser` both satisfy it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .diffusion import NoiseSchedule, forward_noise
from .rng import substream

MAGIC = b"DRDMLP\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")


@runtime_checkable
class Denoiser(Protocol):
    kind: str

    @property
    def dim(self) -> int: ...

    @property
    def num_classes(self) -> int: ...

    def predict(self, x_t, t, c) -> np.ndarray: ...


class TrainingDiverged(RuntimeError):
    pass


def time_features(schedule: NoiseSchedule, t) -> np.ndarray:
    """``(t / T, sqrt(abar_t), sqrt(1 - abar_t))`` per row."""
    t = np.asarray(t)
    ab = schedule.alpha_bars[t]
    return np.stack([t / schedule.T_train, np.sqrt(ab), np.sqrt(1.0 - ab)], axis=-1)


def param_count(d: int, C: int, H: int) -> int:
    """``(in + 1) H + (H + 1) H + (H + 1) d`` with ``in = d + 3 + C``."""
    n_in = d + 3 + C
    return (n_in + 1) * H + (H + 1) * H + (H + 1) * d


@dataclass(eq=False)
class MlpDenoiser:
    """``in -> tanh(H) -> tanh(H) -> d`` on ``concat(x_t, time features, one-hot c)``.

    All parameters live in the flat vector ``params`` in the order
    W1, b1, W2, b2, W3, b3 (row-major); the named attributes are views.
    """

    d: int
    C: int
    H: int
    schedule: NoiseSchedule
    params: np.ndarray
    kind: str = field(default="learned", init=False)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype="<f8")
        if len(self.params) != param_count(self.d, self.C, self.H):
            raise ValueError("parameter vector has the wrong length")
        self._bind()

    def _bind(self):
        d, C, H = self.d, self.C, self.H
        n_in = d + 3 + C
        shapes = [(H, n_in), (H,), (H, H), (H,), (d, H), (d,)]
        views, off = [], 0
        for shp in shapes:
            size = int(np.prod(shp))
            views.append(self.params[off : off + size].reshape(shp))
            off += size
        self.W1, self.b1, self.W2, self.b2, self.W3, self.b3 = views

    @property
    def dim(self) -> int:
        return self.d

    @property
    def num_classes(self) -> int:
        return self.C

    @property
    def n_in(self) -> int:
        return self.d + 3 + self.C

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(self.d, self.C, self.H, self.schedule, self.params.copy(), list(self.history))

    def encode(self, x_t, t, c) -> np.ndarray:
        n = len(x_t)
        t_rows = np.broadcast_to(np.asarray(t), (n,))
        c_rows = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        onehot = np.zeros((n, self.C))
        onehot[np.arange(n), c_rows] = 1.0
        return np.concatenate([x_t, time_features(self.schedule, t_rows), onehot], axis=1)

    def _forward(self, u):
        h1 = np.tanh(u @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        return h1, h2, h2 @ self.W3.T + self.b3

    def predict(self, x_t, t, c) -> np.ndarray:
        single = np.ndim(x_t) == 1
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ValueError(f"expected dimension {self.d}, got {x.shape[1]}")
        out = self._forward(self.encode(x, t, c))[2]
        return out[0] if single else out


def init_mlp(d: int, C: int, H: int, seed: int, schedule: NoiseSchedule) -> MlpDenoiser:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    if H < 1:
        raise ValueError("hidden width H must be at least 1")
    rng = substream(seed, "init_mlp")
    n_in = d + 3 + C
    parts = []
    for fan_out, fan_in in [(H, n_in), (H, H), (d, H)]:
        lim = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-lim, lim, size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return MlpDenoiser(d, C, H, schedule, np.concatenate(parts))


def loss_and_grad(model: MlpDenoiser, x0, c, t, eps, schedule: NoiseSchedule | None = None):
    """Noise-prediction loss ``mean_i ||eps_i - eps_hat_i||^2`` and its exact gradient.

    Returns ``(loss, grad)`` with ``grad`` laid out like ``model.params``.
    """
    schedule = schedule or model.schedule
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    n = len(x0)
    if n == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.asarray(t), (n,))
    x_t = forward_noise(x0, t, eps, schedule)
    u = model.encode(x_t, t, c)
    h1, h2, out = model._forward(u)
    r = out - eps
    loss = float(np.sum(r * r) / n)

    g_out = (2.0 / n) * r
    g_W3 = g_out.T @ h2
    g_b3 = g_out.sum(axis=0)
    g_a2 = (g_out @ model.W3) * (1.0 - h2 * h2)
    g_W2 = g_a2.T @ h1
    g_b2 = g_a2.sum(axis=0)
    g_a1 = (g_a2 @ model.W2) * (1.0 - h1 * h1)
    g_W1 = g_a1.T @ u
    g_b1 = g_a1.sum(axis=0)
    grad = np.concatenate([g.ravel() for g in (g_W1, g_b1, g_W2, g_b2, g_W3, g_b3)])
    return loss, grad


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    H: int = 128
    seed: int = 0


def _draws(seed: int, tag, n: int, d: int, T: int):
    rng = substream(seed, "train_denoiser", tag)
    return rng.integers(1, T + 1, size=n), rng.standard_normal((n, d))


def mean_noise_error(denoiser, X, y, schedule: NoiseSchedule, seed: int) -> float:
    """Monte Carlo ``E ||eps - eps_hat(x_t, t, c)||^2`` with ``t ~ U{1..T}``."""
    rng = substream(seed, "mean_noise_error")
    t = rng.integers(1, schedule.T_train + 1, size=len(X))
    eps = rng.standard_normal(X.shape)
    x_t = forward_noise(X, t, eps, schedule)
    pred = denoiser.predict(x_t, t, y)
    return float(np.mean(np.sum((pred - eps) ** 2, axis=1)))


def train_denoiser(dataset, schedule: NoiseSchedule, config: TrainConfig | None = None) -> MlpDenoiser:
    """Plain minibatch SGD on the noise-prediction loss.

    ``model.history`` holds the mean training loss of every epoch.  Raises
    :class:`TrainingDiverged` if the loss or parameters stop being finite.
    """
    cfg = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = init_mlp(dataset.dim, dataset.num_classes, cfg.H, cfg.seed, schedule)
    X, y = dataset.X, dataset.y
    n = len(X)
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "train_denoiser", "perm", epoch).permutation(n)
        t_all, eps_all = _draws(cfg.seed, epoch, n, dataset.dim, schedule.T_train)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_and_grad(model, X[idx], y[idx], t_all[idx], eps_all[idx], schedule)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch offset {start}")
            model.params -= cfg.learning_rate * grad
            total += loss * len(idx)
        if not np.all(np.isfinite(model.params)):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}")
        model.history.append(total / n)
    return model


def save_denoiser(model: MlpDenoiser, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, model.d, model.C, model.H))
        fh.write(model.params.astype("<f8").tobytes())


def load_denoiser(path, schedule: NoiseSchedule) -> MlpDenoiser:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, d, C, H = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    expected = _HEADER.size + 8 * param_count(d, C, H)
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    params = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).copy()
    return MlpDenoiser(d, C, H, schedule, params)
