"""Class-wise reconstruction timestep selection.

Candidates are inference-grid timesteps whose SNR lies in
``[gamma_min, gamma_max]``.  For each class we pick the candidate where the
log class-probability of a diffusion classifier changes fastest with ``t``,
estimated by a central finite difference over ``B`` class samples.

The trade-off weight of the underlying bottleneck objective never appears:
the SNR interval replaces it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax

from .diffusion import NoiseSchedule, forward_noise, snr
from .rng import substream


@dataclass
class SelectorParams:
    B: int = 20
    num_eps: int = 20
    dt: int = 1
    gamma_min: float = 0.05
    gamma_max: float = 1.0


@dataclass
class TimestepSelection:
    timesteps: dict[int, int]
    feasible: list[int]
    curves: dict[int, list[tuple[int, float]]]
    params: SelectorParams = field(default_factory=SelectorParams)
    grid_positions: dict[int, int] = field(default_factory=dict)

    def to_json(self, extra: dict | None = None) -> str:
        body = {
            "timesteps": {str(c): t for c, t in sorted(self.timesteps.items())},
            "grid_positions": {str(c): p for c, p in sorted(self.grid_positions.items())},
            "feasible": list(self.feasible),
            "params": asdict(self.params),
            "curves": {
                str(c): [[int(t), float(v)] for t, v in curve]
                for c, curve in sorted(self.curves.items())
            },
        }
        if extra:
            body = {**extra, **body}
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TimestepSelection":
        body = json.loads(text)
        return cls(
            timesteps={int(c): int(t) for c, t in body["timesteps"].items()},
            feasible=[int(t) for t in body["feasible"]],
            curves={int(c): [(int(t), float(v)) for t, v in cur] for c, cur in body["curves"].items()},
            params=SelectorParams(**body["params"]),
            grid_positions={int(c): int(p) for c, p in body.get("grid_positions", {}).items()},
        )


def feasible_timesteps(
    schedule: NoiseSchedule, gamma_min: float = 0.05, gamma_max: float = 1.0
) -> list[int]:
    """Grid timesteps with ``gamma_min <= SNR(t) <= gamma_max``, ascending."""
    if not 0 < gamma_min < gamma_max:
        raise ValueError(f"need 0 < gamma_min < gamma_max, got {gamma_min}, {gamma_max}")
    grid = schedule.inference_grid
    ratio = snr(schedule, grid)
    out = [int(t) for t, r in zip(grid, ratio) if gamma_min <= r <= gamma_max]
    if not out:
        raise ValueError(f"no grid timestep has SNR in [{gamma_min}, {gamma_max}]")
    return out


def classifier_logprob_given_noise(x0, t: int, eps, denoiser, schedule: NoiseSchedule) -> np.ndarray:
    """Diffusion-classifier log-probabilities for fixed noise draws.

    ``x0`` is ``(n, d)`` and ``eps`` is ``(n, J, d)``; the same draws are
    reused for every candidate class.  Returns ``(n, C)``.
    """
    x0 = np.atleast_2d(x0)
    n, J, d = eps.shape
    x0_rep = np.repeat(x0, J, axis=0)
    flat_eps = eps.reshape(n * J, d)
    x_t = forward_noise(x0_rep, t, flat_eps, schedule)
    C = denoiser.num_classes
    err = np.empty((n, C))
    for c in range(C):
        pred = denoiser.predict(x_t, t, c)
        err[:, c] = np.sum((flat_eps - pred) ** 2, axis=1).reshape(n, J).mean(axis=1)
    return log_softmax(-err, axis=1)


def diffusion_classifier_logprob(x0, t: int, denoiser, schedule: NoiseSchedule, num_eps: int = 20, seed: int = 0):
    """Log class-probabilities of one sample from ``num_eps`` paired noise draws."""
    if num_eps < 1:
        raise ValueError("num_eps must be at least 1")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = substream(seed, "diffusion_classifier").standard_normal((1, num_eps, x0.shape[-1]))
    return classifier_logprob_given_noise(x0[None], t, eps, denoiser, schedule)[0]


def logprob_differences(
    X, y, t: int, denoiser, schedule: NoiseSchedule, num_eps: int = 20, dt: int = 1,
    seed: int = 0, key=(),
) -> np.ndarray:
    """Per-sample ``(log p(c_i | x_{t+dt}) - log p(c_i | x_{t-dt})) / (2 dt)``.

    Each sample uses one set of draws for both ``t + dt`` and ``t - dt``.
    """
    if t - dt < 0 or t + dt > schedule.T_train:
        raise ValueError(f"t={t} with dt={dt} leaves the training range [0, {schedule.T_train}]")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    d = X.shape[1]
    eps = np.stack([
        substream(seed, "mi_derivative", *key, t, i).standard_normal((num_eps, d))
        for i in range(len(X))
    ])
    rows = np.arange(len(X))
    up = classifier_logprob_given_noise(X, t + dt, eps, denoiser, schedule)[rows, y]
    down = classifier_logprob_given_noise(X, t - dt, eps, denoiser, schedule)[rows, y]
    return (up - down) / (2.0 * dt)


def mi_derivative_proxy(
    X, y, t: int, denoiser, schedule: NoiseSchedule, num_eps: int = 20, dt: int = 1,
    seed: int = 0, absolute: str = "inside", key=(),
) -> float:
    """Mean absolute finite-difference derivative of ``log p(c | x_t)``.

    ``absolute="inside"`` averages ``|.|`` per sample (the selection
    objective); ``"outside"`` takes ``|mean|`` instead.
    """
    diffs = logprob_differences(X, y, t, denoiser, schedule, num_eps, dt, seed, key)
    if absolute == "inside":
        return float(np.mean(np.abs(diffs)))
    if absolute == "outside":
        return float(abs(np.mean(diffs)))
    raise ValueError(f"absolute must be 'inside' or 'outside', got {absolute!r}")


def select_timesteps(
    dataset, denoiser, schedule: NoiseSchedule, params: SelectorParams | None = None, seed: int = 0
) -> TimestepSelection:
    """Per class, the feasible timestep maximising the derivative proxy.

    Ties go to the smaller timestep.
    """
    p = params or SelectorParams()
    feasible = feasible_timesteps(schedule, p.gamma_min, p.gamma_max)
    chosen, curves = {}, {}
    for c in sorted(set(int(v) for v in dataset.y)):
        rows = np.flatnonzero(dataset.y == c)
        if len(rows) > p.B:
            rows = np.sort(substream(seed, "select_timesteps", c).choice(rows, size=p.B, replace=False))
        X = dataset.X[rows]
        y = dataset.y[rows]
        curve = [
            (t, mi_derivative_proxy(X, y, t, denoiser, schedule, p.num_eps, p.dt, seed, key=(c,)))
            for t in feasible
        ]
        values = np.array([v for _, v in curve])
        chosen[c] = curve[int(np.argmax(values))][0]  # argmax keeps the first (smallest t)
        curves[c] = curve
    return TimestepSelection(
        timesteps=chosen,
        feasible=feasible,
        curves=curves,
        params=p,
        grid_positions={c: schedule.grid_position(t) for c, t in chosen.items()},
    )
