"""Independent ground truth for the scoring and selection pipeline.

Mutual information ``I(x_t; c)`` is integrated on a tensor grid from the
exact class densities (Monte Carlo above two dimensions).  The checks
compare pipeline quantities with these closed-form values and emit an
:class:`OracleReport` each.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .coreset import window_select
from .diffusion import NoiseSchedule, forward_noise
from .experiment import Replicate, build_schedule, build_world, derive_seed, random_scores, selector_params
from .gmm import PRESETS, AnalyticDenoiser, GmmWorld, log_density, log_posterior, make_world, sample_dataset
from .rng import substream
from .scoring import SQUARED_L2, score_dataset
from .timestep import feasible_timesteps, select_timesteps

GRID_POINTS = {1: 2048, 2: 512}
MIN_MASS = 0.999


@dataclass
class OracleReport:
    check: str
    passed: bool
    oracle_value: object
    pipeline_value: object
    tolerance: object
    details: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(_plain(asdict(self)), indent=2, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("spearman needs two 1-D sequences of equal length >= 2")
    ra, rb = rankdata(a) - (len(a) + 1) / 2, rankdata(b) - (len(b) + 1) / 2
    den = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if den == 0:
        raise ValueError("zero rank variance")
    return float(np.sum(ra * rb) / den)


# --------------------------------------------------------------------------
# mutual information


def _alpha(t: int, schedule) -> float:
    return 1.0 if t == 0 else float(schedule.alpha_bars[t])


def mi_quadrature(world: GmmWorld, t: int, schedule: NoiseSchedule | None = None,
                  resolution: int | None = None, n_mc: int = 10**6, seed: int = 0) -> float:
    """``I(x_t; c) = H(c) - E[H(c | x_t)]`` in nats.

    Grid quadrature over +-8 standard deviations for ``d <= 2``; above that a
    Monte Carlo estimate with ``n_mc`` draws.  Raises if the grid captures
    less than 0.999 of the probability mass.
    """
    C = world.num_classes
    if C == 1:
        return 0.0
    a = _alpha(t, schedule)
    d = world.dim
    if d > 2:
        return mi_monte_carlo(world, t, schedule, n_mc, seed)[0]
    n = resolution or GRID_POINTS[d]
    means_t = np.sqrt(a) * world.means
    sd = np.sqrt(a * np.diagonal(world.covs, axis1=1, axis2=2) + (1.0 - a))
    lo = (means_t - 8 * sd).min(axis=0)
    hi = (means_t + 8 * sd).max(axis=0)
    axes = [np.linspace(lo[j], hi[j], n) for j in range(d)]
    cell = np.prod([(hi[j] - lo[j]) / (n - 1) for j in range(d)])
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    L = world.class_log_densities(pts, a)
    log_q = logsumexp(L, axis=1) - np.log(C)
    q = np.exp(log_q)
    mass = q.sum() * cell
    if mass < MIN_MASS:
        raise ValueError(f"quadrature grid captures only {mass:.6f} of the mass; increase resolution")
    post_log = L - logsumexp(L, axis=1, keepdims=True)
    cond_entropy = -np.sum(np.exp(post_log) * post_log, axis=1)
    return float(np.log(C) - np.sum(q * cond_entropy) * cell)


def mi_monte_carlo(world: GmmWorld, t: int, schedule, n: int = 10**6, seed: int = 0):
    """Monte Carlo ``I(x_t; c)`` and its standard error."""
    C = world.num_classes
    ds = sample_dataset(world, max(1, n // C), derive_seed(seed, "mi_mc"))
    eps = substream(seed, "mi_mc_eps").standard_normal(ds.X.shape)
    x_t = forward_noise(ds.X, t, eps, schedule) if t > 0 else ds.X
    lp = log_posterior(world, x_t, t, schedule)[np.arange(len(ds)), ds.y]
    vals = np.log(C) + lp
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def mi_curve(world: GmmWorld, schedule: NoiseSchedule, timesteps, resolution: int | None = None) -> np.ndarray:
    return np.array([mi_quadrature(world, int(t), schedule, resolution) for t in timesteps])


def mi_derivative_curve(world: GmmWorld, schedule: NoiseSchedule, timesteps, dt: int = 1,
                        resolution: int | None = None) -> np.ndarray:
    """``|I(t + dt) - I(t - dt)| / (2 dt)`` at each timestep."""
    return np.array([
        abs(mi_quadrature(world, t + dt, schedule, resolution) - mi_quadrature(world, t - dt, schedule, resolution))
        / (2 * dt)
        for t in timesteps
    ])


def mi_profile_check(world: GmmWorld, schedule: NoiseSchedule, slack: float = 0.003,
                     noise_floor: float = 0.02, resolution: int | None = None) -> OracleReport:
    """Bounds, full-noise endpoint and monotonicity of ``I(x_t; c)`` along the grid."""
    ts = [0] + [int(t) for t in schedule.inference_grid]
    values = mi_curve(world, schedule, ts, resolution)
    log_c = float(np.log(world.num_classes))
    rises = np.diff(values)
    bounded = bool(np.all(values <= log_c + 1e-9) and np.all(values >= -1e-9))
    endpoint = bool(values[-1] < noise_floor)
    monotone = bool(np.all(rises <= slack))
    return OracleReport(
        "mi_profile", bounded and endpoint and monotone,
        oracle_value={"log_C": log_c, "noise_floor": noise_floor},
        pipeline_value={"max_I": float(values.max()), "noisiest_I": float(values[-1]),
                        "max_rise": float(rises.max(initial=0.0))},
        tolerance={"slack": slack},
        details={"world": world.name, "timesteps": ts, "values": values,
                 "bounded": bounded, "endpoint": endpoint, "monotone": monotone},
    )


# --------------------------------------------------------------------------
# checks


def lemma1_check(world: GmmWorld, schedule: NoiseSchedule, t_list, dt: int = 1, n_mc: int = 10**6,
                 seed: int = 0, rel_tol: float = 0.05, abs_tol: float = 0.005,
                 resolution: int | None = None) -> OracleReport:
    """Quadrature ``|dI/dt|`` against ``|E[d log p(c | x_t) / dt]|`` with exact posteriors.

    Both sides use a central difference of width ``2 dt``; the right side
    pairs ``(x_0, c, eps)`` across ``t - dt`` and ``t + dt``.  A timestep
    passes when the discrepancy is within ``max(rel_tol |lhs|, abs_tol)`` and
    the Monte Carlo standard error is below half of that tolerance.
    """
    rows, ok = [], True
    C = world.num_classes
    for t in t_list:
        t = int(t)
        if not dt <= t <= schedule.T_train - dt:
            raise ValueError(f"timestep {t} is not interior to [{dt}, {schedule.T_train - dt}]")
        lhs = abs(mi_quadrature(world, t + dt, schedule, resolution)
                  - mi_quadrature(world, t - dt, schedule, resolution)) / (2 * dt)
        ds = sample_dataset(world, max(1, n_mc // C), derive_seed(seed, "lemma1", t))
        eps = substream(seed, "lemma1_eps", t).standard_normal(ds.X.shape)
        idx = np.arange(len(ds))
        up = log_posterior(world, forward_noise(ds.X, t + dt, eps, schedule), t + dt, schedule)[idx, ds.y]
        down = log_posterior(world, forward_noise(ds.X, t - dt, eps, schedule), t - dt, schedule)[idx, ds.y]
        diffs = (up - down) / (2 * dt)
        rhs = abs(float(diffs.mean()))
        se = float(diffs.std(ddof=1) / np.sqrt(len(diffs)))
        tol = max(rel_tol * lhs, abs_tol)
        conclusive = se < tol / 2
        passed = abs(lhs - rhs) <= tol and conclusive
        ok &= passed
        rows.append({"t": t, "lhs": lhs, "rhs": rhs, "standard_error": se, "tolerance": tol,
                     "relative_error": abs(lhs - rhs) / lhs if lhs > 0 else 0.0,
                     "conclusive": conclusive, "passed": passed})
    return OracleReport(
        "lemma1", bool(ok),
        oracle_value=[r["lhs"] for r in rows], pipeline_value=[r["rhs"] for r in rows],
        tolerance={"relative": rel_tol, "absolute": abs_tol},
        details={"world": world.name, "rows": rows, "n_mc": n_mc, "dt": dt}, seeds=[seed],
    )


def binned_means(values, likelihood, bins: int = 5) -> np.ndarray:
    """Mean of ``values`` in ``bins`` groups of descending ``likelihood``."""
    order = np.argsort(-np.asarray(likelihood), kind="stable")
    return np.array([np.mean(np.asarray(values)[g]) for g in np.array_split(order, bins)])


def theorem1_check(world: GmmWorld, denoiser, schedule: NoiseSchedule, timesteps=None, n_samples: int = 500,
                   K: int = 8, seed: int = 0, rho_min: float = 0.3, max_inversions: int = 1,
                   deviation_fn=None) -> OracleReport:
    """Rank agreement between deviation and ``-log q(x_0)`` on fresh world draws.

    ``timesteps`` is a class mapping, a single timestep, or ``None`` to run
    the IB selector on the drawn samples.  ``deviation_fn(dataset, records)``
    may replace the deviations (negative controls).
    """
    if n_samples < 200:
        raise ValueError("theorem1_check needs n_samples >= 200")
    C = world.num_classes
    ds = sample_dataset(world, n_samples // C, derive_seed(seed, "theorem1"))
    if timesteps is None:
        timesteps = select_timesteps(ds, denoiser, schedule, seed=derive_seed(seed, "theorem1_select")).timesteps
    elif np.isscalar(timesteps):
        timesteps = {c: int(timesteps) for c in range(C)}
    recs = score_dataset(ds, timesteps, denoiser, schedule, SQUARED_L2, K, derive_seed(seed, "theorem1_score"))
    dev = np.array([r.deviation for r in recs])
    if deviation_fn is not None:
        dev = np.asarray(deviation_fn(ds, recs), dtype=np.float64)
    log_q = log_density(world, ds.X)
    try:
        rho = spearman(dev, -log_q)
    except ValueError:
        rho = 0.0
    means = binned_means(dev, log_q)
    inversions = int(np.sum(np.diff(means) < 0))
    passed = rho >= rho_min and inversions <= max_inversions
    return OracleReport(
        "theorem1", bool(passed),
        oracle_value={"rho_min": rho_min, "max_inversions": max_inversions},
        pipeline_value={"rho": rho, "inversions": inversions},
        tolerance=rho_min,
        details={"world": world.name, "timesteps": {str(c): int(t) for c, t in timesteps.items()},
                 "binned_mean_deviation": means, "n_samples": len(ds), "K": K},
        seeds=[seed],
    )


def oracle_timestep(world: GmmWorld, schedule: NoiseSchedule, gamma_min: float = 0.05, gamma_max: float = 1.0,
                    dt: int = 1, resolution: int | None = None):
    """Feasible timestep maximising the quadrature ``|dI/dt|`` and the curve itself."""
    feas = feasible_timesteps(schedule, gamma_min, gamma_max)
    curve = mi_derivative_curve(world, schedule, feas, dt, resolution)
    return feas[int(np.argmax(curve))], list(zip(feas, curve.tolist()))


def exhaustive_timestep_search(cfg: dict, budget: float = 0.3, start: float = 0.3, threads: int = 1,
                               max_grid_gap: int = 2, control: bool = True) -> OracleReport:
    """Grid search over every feasible timestep against the IB-selected timesteps.

    Per replicate: score the training set at each feasible ``t`` (all
    classes), take the fixed window ``[start, start + budget)``, train and
    test.  Passes when the IB accuracy is within one standard deviation of
    the best grid accuracy and the median distance between the selected and
    the oracle-curve timestep is at most ``max_grid_gap`` grid steps.
    """
    seeds = list(cfg["evaluation"]["seeds"])
    reps = [Replicate(cfg, s, threads) for s in seeds]
    sched = reps[0].schedule
    p = selector_params(cfg)
    feas = feasible_timesteps(sched, p.gamma_min, p.gamma_max)

    def acc_for(rep, scores):
        return rep.test_accuracy(window_select(scores, budget, start).selected)

    grid = np.array([[acc_for(r, r.drd_scores(t)) for r in reps] for t in feas])
    ib = np.array([acc_for(r, r.drd_scores()) for r in reps])
    means = grid.mean(axis=1)
    best = int(np.argmax(means))
    delta = float(grid[best].std(ddof=1))
    within = bool(ib.mean() >= means[best] - delta)

    t_oracle, oracle_curve = oracle_timestep(reps[0].world, sched, p.gamma_min, p.gamma_max, p.dt)
    pos_oracle = sched.grid_position(t_oracle)
    gaps = [abs(sched.grid_position(t) - pos_oracle) for r in reps for t in r.selection().timesteps.values()]
    median_gap = float(np.median(gaps))
    close = median_gap <= max_grid_gap

    details = {
        "world": reps[0].world.name, "budget": budget, "start": start,
        "feasible": feas, "grid_mean_accuracy": means, "grid_accuracy": grid,
        "grid_best_timestep": feas[best], "ib_accuracy": ib, "ib_mean": float(ib.mean()),
        "ib_timesteps": [{str(c): t for c, t in r.selection().timesteps.items()} for r in reps],
        "oracle_timestep": t_oracle, "oracle_grid_position": pos_oracle, "oracle_curve": oracle_curve,
        "proxy_curves": [{str(c): cur for c, cur in r.selection().curves.items()} for r in reps],
        "grid_gaps": gaps, "median_grid_gap": median_gap,
        "accuracy_within_delta": within, "timestep_within_gap": close,
    }
    if control:
        ctrl = np.array([[acc_for(r, random_scores(r.train, derive_seed(r.seed, "ctrl", t))) for r in reps]
                         for t in feas])
        details["random_control_mean_accuracy"] = ctrl.mean(axis=1)
    return OracleReport(
        "exhaustive_timestep_search", within and close,
        oracle_value={"grid_best_mean": float(means[best]), "oracle_timestep": t_oracle},
        pipeline_value={"ib_mean": float(ib.mean()), "median_grid_gap": median_gap},
        tolerance={"delta": delta, "max_grid_gap": max_grid_gap},
        details=details, seeds=seeds,
    )


# --------------------------------------------------------------------------
# battery

CHECKS = ("mi", "lemma1", "theorem1", "exhaustive")


def lemma1_timesteps(schedule: NoiseSchedule, params, count: int = 5) -> list[int]:
    """``count`` feasible grid timesteps spread evenly over the feasible set."""
    feas = feasible_timesteps(schedule, params.gamma_min, params.gamma_max)
    idx = np.unique(np.rint(np.linspace(0, len(feas) - 1, count)).astype(int))
    return [feas[i] for i in idx]


def run_check(name: str, cfg: dict, threads: int = 1) -> list[OracleReport]:
    """Run one named check of :data:`CHECKS` for ``cfg``."""
    sched = build_schedule(cfg)
    params = selector_params(cfg)
    seed = cfg["seed"]
    if name == "mi":
        return [mi_profile_check(make_world(w), sched) for w in PRESETS]
    if name == "lemma1":
        return [lemma1_check(make_world("W2"), sched, lemma1_timesteps(sched, params), params.dt,
                             seed=derive_seed(seed, "oracle_lemma1"))]
    if name == "theorem1":
        world = build_world(cfg)
        den = AnalyticDenoiser(world, sched)
        return [theorem1_check(world, den, sched, None, 500, cfg["scoring"]["K"], derive_seed(seed, "oracle_t1", s))
                for s in cfg["evaluation"]["seeds"]]
    if name == "exhaustive":
        return [exhaustive_timestep_search(cfg, threads=threads)]
    raise ValueError(f"unknown oracle check {name!r}; choose from {CHECKS}")
