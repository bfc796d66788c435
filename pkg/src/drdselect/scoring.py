"""Reconstruction-deviation scores.

A sample is noised to timestep ``t``, reconstructed with the deterministic
DDIM sampler, and compared with the original.  The score averages ``K``
noise draws whose generators are keyed by ``(seed, sample_id)`` only, so a
sample's score does not depend on which chunk or thread computed it.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffusion import NoiseSchedule, ddim_reconstruct, forward_noise
from .rng import substream

CHUNK_SIZE = 256
SCORE_HEADER = ["sample_id", "label", "timestep", "deviation", "K", "metric"]


@dataclass(frozen=True)
class DeviationMetric:
    """Row-wise distance ``fn(a, b) -> (n,)`` between two batches of points."""

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, a, b) -> np.ndarray:
        return self.fn(np.atleast_2d(a), np.atleast_2d(b))


def _mean_squared_l2(a, b):
    diff = a - b
    return np.mean(diff * diff, axis=1)


def _lpips(a, b):
    raise NotImplementedError("LPIPS needs image features and is not available here")


SQUARED_L2 = DeviationMetric("squared_l2", _mean_squared_l2)
METRICS = {
    "squared_l2": SQUARED_L2,
    "lpips": DeviationMetric("lpips", _lpips),
}


def get_metric(name: str) -> DeviationMetric:
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: int
    label: int
    timestep_used: int
    deviation: float
    num_noise_draws: int
    metric_name: str


def _noise(seed: int, sample_id: int, K: int, d: int) -> np.ndarray:
    return substream(seed, "drd", sample_id).standard_normal((K, d))


def deviations(
    X,
    labels,
    sample_ids,
    t: int,
    denoiser,
    schedule: NoiseSchedule,
    metric: DeviationMetric = SQUARED_L2,
    K: int = 8,
    seed: int = 0,
) -> np.ndarray:
    """Mean deviation over ``K`` draws for each row of ``X`` at timestep ``t``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if t == 0:
        return np.zeros(n)
    schedule.grid_position(t)
    eps = np.concatenate([_noise(seed, int(i), K, d) for i in sample_ids])
    x0 = np.repeat(X, K, axis=0)
    c = np.repeat(np.broadcast_to(np.asarray(labels), (n,)), K)
    x_t = forward_noise(x0, t, eps, schedule)
    recon = ddim_reconstruct(x_t, t, c, denoiser, schedule)
    dist = metric(recon, x0)
    return dist.reshape(n, K).mean(axis=1)


def reconstruction_deviation(
    x0,
    c: int,
    t: int,
    denoiser,
    schedule: NoiseSchedule,
    metric: DeviationMetric = SQUARED_L2,
    K: int = 8,
    seed: int = 0,
    sample_id: int = 0,
) -> float:
    """Deviation of one sample; ``t`` must be 0 or on the inference grid."""
    return float(deviations([x0], [c], [sample_id], t, denoiser, schedule, metric, K, seed)[0])


def score_dataset(
    dataset,
    selection,
    denoiser,
    schedule: NoiseSchedule,
    metric: DeviationMetric = SQUARED_L2,
    K: int = 8,
    seed: int = 0,
    threads: int = 1,
) -> list[ScoreRecord]:
    """Score every sample at its class timestep, returned in ascending id order.

    ``selection`` is a :class:`~drdselect.timestep.TimestepSelection` or a
    plain ``{class: timestep}`` mapping.  Chunks are fixed-size per class, so
    the output is identical for any ``threads``.
    """
    t_of = getattr(selection, "timesteps", selection)
    present = sorted(set(int(v) for v in dataset.y))
    missing = [c for c in present if c not in t_of]
    if missing:
        raise KeyError(f"timestep selection has no entry for classes {missing}")

    order = np.argsort(dataset.ids, kind="stable")
    jobs = []
    for c in present:
        rows = order[dataset.y[order] == c]
        for start in range(0, len(rows), CHUNK_SIZE):
            jobs.append((c, rows[start : start + CHUNK_SIZE]))

    def run(job):
        c, rows = job
        return deviations(
            dataset.X[rows], c, dataset.ids[rows], int(t_of[c]),
            denoiser, schedule, metric, K, seed,
        )

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    dev = np.empty(len(dataset))
    for (c, rows), vals in zip(jobs, results):
        dev[rows] = vals
    return [
        ScoreRecord(int(dataset.ids[i]), int(dataset.y[i]), int(t_of[int(dataset.y[i])]),
                    float(dev[i]), K, metric.name)
        for i in order
    ]


def write_scores_csv(records: list[ScoreRecord], path, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for r in records:
            w.writerow([r.sample_id, r.label, r.timestep_used, repr(float(r.deviation)),
                        r.num_noise_draws, r.metric_name])


def read_scores_csv(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if rows[0] != SCORE_HEADER:
        raise ValueError(f"{path}: unexpected score header {rows[0]}")
    return [
        ScoreRecord(int(r[0]), int(r[1]), int(r[2]), float(r[3]), int(r[4]), r[5])
        for r in rows[1:]
    ]
