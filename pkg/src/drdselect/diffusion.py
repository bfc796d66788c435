"""Noise schedules, forward noising and DDIM/DDPM reverse updates.

Timesteps are *training indices* ``t in [0, T_train]`` throughout; ``t = 0``
is clean data.  The DDIM inference grid is a strictly increasing subset of
``[1, T_train]`` and :meth:`NoiseSchedule.grid_timestep` translates grid
positions (0-based) into training indices.

All functions accept a single vector of shape ``(d,)`` or a batch of shape
``(n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import substream


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Variance schedule of the forward process.

    Attributes
    ----------
    T_train : int
        Number of training timesteps.
    betas : ndarray, shape (T_train,)
        ``betas[t - 1]`` is the variance increment of step ``t``.
    alpha_bars : ndarray, shape (T_train + 1,)
        Cumulative signal retention, ``alpha_bars[0] == 1``.
    posterior_sigmas : ndarray, shape (T_train,)
        ``posterior_sigmas[t - 1]`` is the posterior standard deviation of
        ``q(x_{t-1} | x_t, x_0)``.
    inference_grid : ndarray of int, shape (T_infer,)
        Training indices visited by the DDIM sampler.
    """

    T_train: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigmas: np.ndarray
    inference_grid: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    @property
    def T_infer(self) -> int:
        return len(self.inference_grid)

    def beta(self, t: int) -> float:
        _check_timestep(self, t, allow_zero=False)
        return float(self.betas[t - 1])

    def sigma(self, t: int) -> float:
        _check_timestep(self, t, allow_zero=False)
        return float(self.posterior_sigmas[t - 1])

    def grid_timestep(self, position: int) -> int:
        """Training index of grid position ``position`` (0-based)."""
        if not 0 <= position < self.T_infer:
            raise ValueError(f"grid position {position} outside [0, {self.T_infer})")
        return int(self.inference_grid[position])

    def grid_position(self, t: int) -> int:
        """Inverse of :meth:`grid_timestep`; raises if ``t`` is off-grid."""
        pos = int(np.searchsorted(self.inference_grid, t))
        if pos >= self.T_infer or self.inference_grid[pos] != t:
            raise ValueError(f"timestep {t} is not on the inference grid")
        return pos

    def check_invariants(self) -> None:
        ab = self.alpha_bars
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0), "alpha_bars must be strictly decreasing"
        assert np.all((ab > 0) & (ab <= 1))
        np.testing.assert_allclose(ab[1:], ab[:-1] * (1.0 - self.betas), rtol=1e-12)
        g = self.inference_grid
        assert np.all(np.diff(g) > 0) and g[0] >= 1 and g[-1] <= self.T_train


def _check_timestep(schedule: NoiseSchedule, t, allow_zero: bool = True) -> None:
    lo = 0 if allow_zero else 1
    t_arr = np.asarray(t)
    if np.any(t_arr < lo) or np.any(t_arr > schedule.T_train):
        raise ValueError(f"timestep {t} outside [{lo}, {schedule.T_train}]")


def schedule_from_betas(betas, T_infer: int) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    T = len(betas)
    if not 1 <= T_infer <= T:
        raise ValueError(f"T_infer must lie in [1, {T}], got {T_infer}")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must lie in (0, 1)")
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    post_var = betas * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
    grid = np.rint(np.linspace(1, T, T_infer)).astype(np.int64)
    return NoiseSchedule(
        T_train=T,
        betas=betas,
        alpha_bars=alpha_bars,
        posterior_sigmas=np.sqrt(post_var),
        inference_grid=grid,
    )


def linear_schedule(
    T_train: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    T_infer: int = 50,
) -> NoiseSchedule:
    """Linearly spaced betas with an evenly spaced DDIM grid over ``[1, T_train]``."""
    if T_train < 1:
        raise ValueError("T_train must be positive")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if T_train == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    sched = schedule_from_betas(betas, T_infer)
    object.__setattr__(sched, "beta_start", float(beta_start))
    object.__setattr__(sched, "beta_end", float(beta_end))
    return sched


def snr(schedule: NoiseSchedule, t):
    """Signal-to-noise ratio ``alpha_bar / (1 - alpha_bar)``; ``t = 0`` is rejected."""
    _check_timestep(schedule, t, allow_zero=False)
    ab = schedule.alpha_bars[t]
    return ab / (1.0 - ab)


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Sample ``x_t`` from ``q(x_t | x_0)`` given the noise ``eps``.

    ``t`` may be a scalar or one timestep per row of a batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    _check_timestep(schedule, t)
    ab = schedule.alpha_bars[np.asarray(t)]
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    if np.all(np.asarray(t) == 0):
        return x0.copy()
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bars[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(x_t, t_cur: int, t_prev: int, eps_hat, schedule: NoiseSchedule, noise=None):
    """One deterministic DDIM update from ``t_cur`` down to ``t_prev``.

    If ``noise`` is given it replaces ``eps_hat`` in the direction term, which
    turns the update into the stochastic variant (kept for comparison only).
    """
    if t_prev >= t_cur:
        raise ValueError(f"t_prev={t_prev} must be smaller than t_cur={t_cur}")
    _check_timestep(schedule, t_cur)
    _check_timestep(schedule, t_prev)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    x0_hat = predict_x0(x_t, t_cur, eps_hat, schedule)
    ab_prev = schedule.alpha_bars[t_prev]
    direction = eps_hat if noise is None else np.asarray(noise, dtype=np.float64)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * direction


def reverse_path(schedule: NoiseSchedule, t: int) -> list[int]:
    """Grid timesteps visited when reconstructing from ``t``, ending at 0."""
    pos = schedule.grid_position(t)
    return [int(s) for s in schedule.inference_grid[pos::-1]] + [0]


def ddim_reconstruct(
    x_t, t: int, c, denoiser, schedule: NoiseSchedule, noise_rng=None
) -> np.ndarray:
    """Run the DDIM sampler from grid timestep ``t`` all the way to ``t = 0``.

    ``noise_rng`` switches on the stochastic direction term of
    :func:`ddim_step`; leave it ``None`` for the deterministic sampler.
    """
    x = np.asarray(x_t, dtype=np.float64)
    path = reverse_path(schedule, t)
    for s, s_prev in zip(path[:-1], path[1:]):
        eps_hat = np.asarray(denoiser.predict(x, s, c), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise ValueError(
                f"denoiser returned shape {eps_hat.shape}, expected {x.shape}"
            )
        noise = None if noise_rng is None else noise_rng.standard_normal(x.shape)
        x = ddim_step(x, s, s_prev, eps_hat, schedule, noise=noise)
    return x


def ddpm_step(x_t, t: int, eps_hat, schedule: NoiseSchedule, z, sigma: float | None = None):
    """Ancestral update ``t -> t - 1`` written in the generalised DDIM form.

    With ``sigma`` equal to the posterior standard deviation this is the
    usual DDPM update; with ``sigma = 0`` it is a full-resolution DDIM step.
    """
    if sigma is None:
        sigma = schedule.sigma(t)
    x0_hat = predict_x0(x_t, t, eps_hat, schedule)
    ab_prev = schedule.alpha_bars[t - 1]
    dir_coef = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    return np.sqrt(ab_prev) * x0_hat + dir_coef * eps_hat + sigma * z


def ddpm_sample(
    c,
    denoiser,
    schedule: NoiseSchedule,
    seed: int,
    n: int | None = None,
    sigmas=None,
) -> np.ndarray:
    """Draw samples by ancestral sampling from ``x_T ~ N(0, I)``.

    Returns shape ``(d,)`` when ``n`` is None, else ``(n, d)``.  ``sigmas``
    (length ``T_train``) overrides the posterior standard deviations.
    """
    d = denoiser.dim
    rows = 1 if n is None else n
    rng = substream(seed, "ddpm_sample")
    x = rng.standard_normal((rows, d))
    sig = schedule.posterior_sigmas if sigmas is None else np.asarray(sigmas, float)
    for t in range(schedule.T_train, 0, -1):
        eps_hat = denoiser.predict(x, t, c)
        z = rng.standard_normal((rows, d))
        x = ddpm_step(x, t, eps_hat, schedule, z, sigma=float(sig[t - 1]))
    return x[0] if n is None else x
