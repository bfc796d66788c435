"""Subset construction from per-sample scores.

Every strategy works class by class on the ascending-score order (ties
broken by ``sample_id``) and unions the per-class picks.  Per-class budgets
are ``floor(budget * n_c)``.  Only ranks matter, so any strictly increasing
transform of the scores leaves every subset unchanged.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import substream
from .scoring import ScoreRecord

_EPS = 1e-9


@dataclass
class SubsetSpec:
    method: str
    budget: float
    params: dict
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.selected = np.sort(np.asarray(self.selected, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.selected)

    def to_json(self, extra: dict | None = None) -> str:
        body = {
            "method": self.method,
            "budget": self.budget,
            "params": self.params,
            "selected": [int(i) for i in self.selected],
        }
        if extra:
            body = {**extra, **body}
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SubsetSpec":
        body = json.loads(text)
        return cls(body["method"], body["budget"], body["params"], body["selected"])

    def write_ids_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id"])
            w.writerows([int(i)] for i in self.selected)


def _columns(scores: Sequence[ScoreRecord]):
    ids = np.array([r.sample_id for r in scores], dtype=np.int64)
    labels = np.array([r.label for r in scores], dtype=np.int64)
    values = np.array([r.deviation for r in scores], dtype=np.float64)
    return ids, labels, values


def sorted_ids(ids, values) -> np.ndarray:
    """Ids in ascending score order, ties by id."""
    return ids[np.lexsort((ids, values))]


def _per_class(scores):
    ids, labels, values = _columns(scores)
    return {int(c): sorted_ids(ids[labels == c], values[labels == c]) for c in np.unique(labels)}


def budget_count(budget: float, n: int) -> int:
    return int(math.floor(budget * n + _EPS))


def _check_budget(budget: float) -> None:
    if not 0 < budget <= 1 + _EPS:
        raise ValueError(f"budget must lie in (0, 1], got {budget}")


def stratify_quantiles(scores: Sequence[ScoreRecord], k: int) -> list[np.ndarray]:
    """Split all samples, sorted by ascending score, into ``k`` near-equal groups.

    Group 0 holds the lowest scores.  When ``k`` does not divide ``N`` the
    first ``N mod k`` groups get one extra sample.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(scores):
        raise ValueError(f"cannot split {len(scores)} samples into {k} groups")
    ids, _, values = _columns(scores)
    return [np.sort(g) for g in np.array_split(sorted_ids(ids, values), k)]


def window_select(scores: Sequence[ScoreRecord], budget: float, start: float) -> SubsetSpec:
    """Per class, the contiguous run of ranks ``[floor(start n_c), + floor(budget n_c))``."""
    _check_budget(budget)
    if start < 0 or start + budget > 1 + _EPS:
        raise ValueError(f"window start {start} + budget {budget} exceeds 1")
    picked = []
    for c, order in _per_class(scores).items():
        n_c = len(order)
        lo = budget_count(start, n_c)
        width = budget_count(budget, n_c)
        if lo + width > n_c:
            raise ValueError(f"class {c}: window [{lo}, {lo + width}) exceeds {n_c} samples")
        picked.append(order[lo : lo + width])
    return SubsetSpec("window", budget, {"start": start}, np.concatenate(picked))


def ccs_select(scores: Sequence[ScoreRecord], budget: float, num_strata: int = 5, seed: int = 0) -> SubsetSpec:
    """Stratified sampling: equal strata of the sorted class list, visited round-robin.

    Each visit draws one not-yet-chosen sample uniformly from the stratum;
    exhausted strata are skipped.
    """
    _check_budget(budget)
    if num_strata < 1:
        raise ValueError("num_strata must be at least 1")
    picked = []
    for c, order in _per_class(scores).items():
        want = budget_count(budget, len(order))
        strata = []
        for s, members in enumerate(np.array_split(order, num_strata)):
            rng = substream(seed, "ccs", c, s)
            strata.append(list(members[rng.permutation(len(members))]))
        chosen = []
        while len(chosen) < want:
            for stratum in strata:
                if stratum and len(chosen) < want:
                    chosen.append(stratum.pop(0))
        picked.append(np.array(chosen, dtype=np.int64))
    return SubsetSpec("ccs", budget, {"num_strata": num_strata, "seed": seed}, np.concatenate(picked))


def random_select(scores: Sequence[ScoreRecord], budget: float, seed: int = 0) -> SubsetSpec:
    """Uniform sampling within each class (scores only supply ids and labels)."""
    spec = ccs_select(scores, budget, num_strata=1, seed=seed)
    return SubsetSpec("random", budget, {"seed": seed}, spec.selected)


def bws_starts(budget: float, step: float = 0.05, max_start: float = 0.5) -> list[float]:
    """Window starts ``0, step, ...`` up to ``min(max_start, 1 - budget)`` inclusive."""
    _check_budget(budget)
    upper = min(max_start, 1.0 - budget)
    count = int(math.floor(upper / step + _EPS)) + 1
    return [round(k * step, 10) for k in range(count)]


def bws_select(
    scores: Sequence[ScoreRecord],
    budget: float,
    evaluator: Callable[[np.ndarray], float],
    step: float = 0.05,
    threads: int = 1,
) -> SubsetSpec:
    """Best window: try every start from :func:`bws_starts`, keep the highest accuracy.

    ``evaluator(ids) -> accuracy`` trains the proxy model on a candidate
    window.  Ties go to the smaller start.
    """
    starts = bws_starts(budget, step)
    windows = [window_select(scores, budget, s) for s in starts]

    def run(pair):
        s, spec = pair
        try:
            return float(evaluator(spec.selected))
        except Exception as exc:
            raise RuntimeError(f"BWS evaluator failed at window start {s}") from exc

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(run, zip(starts, windows)))
    else:
        accs = [run(p) for p in zip(starts, windows)]
    best = int(np.argmax(accs))
    return SubsetSpec(
        "bws",
        budget,
        {"start": starts[best], "step": step, "candidates": [[s, a] for s, a in zip(starts, accs)]},
        windows[best].selected,
    )


# --------------------------------------------------------------------------
# training-dynamics baselines


def _as_list(dynamics):
    return list(dynamics) if isinstance(dynamics, (list, tuple)) else [dynamics]


def el2n_score(dynamics, probe_epoch: int = 5) -> list[ScoreRecord]:
    """``||p(x_i) - onehot(y_i)||_2`` after ``probe_epoch`` epochs, averaged over runs."""
    runs = _as_list(dynamics)
    total = None
    for dyn in runs:
        if not 1 <= probe_epoch <= len(dyn.probs):
            raise ValueError(f"probe epoch {probe_epoch} not in recorded range 1..{len(dyn.probs)}")
        p = dyn.probs[probe_epoch - 1]
        onehot = np.eye(p.shape[1])[dyn.labels]
        val = np.linalg.norm(p - onehot, axis=1)
        total = val if total is None else total + val
    score = total / len(runs)
    ref = runs[0]
    return [
        ScoreRecord(int(i), int(c), -1, float(s), len(runs), "el2n")
        for i, c, s in zip(ref.ids, ref.labels, score)
    ]


def forgetting_counts(correct) -> np.ndarray:
    """Correct-to-incorrect transitions per sample; never-learned samples get ``num_epochs``."""
    correct = np.asarray(correct, dtype=bool)
    if correct.shape[0] < 2:
        raise ValueError("forgetting needs at least 2 recorded epochs")
    events = np.sum(correct[:-1] & ~correct[1:], axis=0)
    never = ~correct.any(axis=0)
    return np.where(never, correct.shape[0], events)


def forgetting_score(dynamics) -> list[ScoreRecord]:
    runs = _as_list(dynamics)
    score = np.mean([forgetting_counts(d.correct) for d in runs], axis=0)
    ref = runs[0]
    return [
        ScoreRecord(int(i), int(c), -1, float(s), len(runs), "forgetting")
        for i, c, s in zip(ref.ids, ref.labels, score)
    ]
