"""Evaluation protocols: cross-evaluation of score strata and factorial sweeps.

Every sweep cell is averaged over the configured replicate seeds and is a
pure function of ``(config, replicate index)``.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierConfig, evaluate, train_classifier
from .config import config_hash, provenance
from .coreset import bws_starts, stratify_quantiles, window_select
from .experiment import Replicate, classifier_config, derive_seed, selector_params
from .timestep import SelectorParams, feasible_timesteps

EXPERIMENTS = ("ratio_sweep", "window_sweep", "strategy_grid", "hyper_sensitivity", "timestep_comparison")


@dataclass
class EvalReport:
    name: str
    axes: dict
    cells: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    config_hash: str = ""
    runtime: float = 0.0
    meta: dict = field(default_factory=dict)

    def add(self, accs, **axis_values) -> dict:
        accs = [float(a) for a in accs]
        assert all(0.0 <= a <= 1.0 for a in accs)
        cell = {**axis_values, "accuracies": accs, "mean": float(np.mean(accs)),
                "std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0}
        self.cells.append(cell)
        return cell

    def cell(self, **axis_values) -> dict:
        for c in self.cells:
            if all(c.get(k) == v for k, v in axis_values.items()):
                return c
        raise KeyError(axis_values)

    def to_dict(self, include_runtime: bool = False) -> dict:
        body = {"experiment": self.name, "axes": self.axes, "seeds": self.seeds,
                "config_hash": self.config_hash, "cells": self.cells, **self.meta}
        if include_runtime:
            body["runtime_seconds"] = self.runtime
        return body

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        axis_keys = list(self.axes)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment"] + axis_keys + ["mean", "std", "n_seeds", "accuracies"])
        for c in self.cells:
            w.writerow([self.name] + [c.get(k) for k in axis_keys]
                       + [repr(c["mean"]), repr(c["std"]), len(c["accuracies"]),
                          ";".join(repr(a) for a in c["accuracies"])])
        return buf.getvalue()


def cross_eval(train, train_scores, test, test_scores, k: int = 5, config: ClassifierConfig | None = None) -> np.ndarray:
    """Train one model per score stratum of ``train``; test it on every stratum of ``test``.

    Row ``i`` is the model trained on stratum ``i`` (stratum 0 = lowest
    deviation, i.e. highest estimated likelihood).
    """
    cfg = config or ClassifierConfig(record=False)
    C = train.num_classes
    train_groups = stratify_quantiles(train_scores, k)
    test_groups = stratify_quantiles(test_scores, k)
    for i, g in enumerate(train_groups):
        missing = set(range(C)) - set(int(v) for v in train.subset(g).y)
        if missing:
            raise ValueError(f"training stratum {i} has no samples of classes {sorted(missing)}")
    out = np.zeros((k, k))
    for i, g in enumerate(train_groups):
        model = train_classifier(train.subset(g), cfg, num_classes=C).model
        for j, h in enumerate(test_groups):
            out[i, j] = evaluate(model, test.subset(h))
    return out


def replicate_cross_eval(rep: Replicate, k: int = 5) -> np.ndarray:
    sel = rep.selection()
    train_scores = rep.drd_scores()
    test_scores = rep.drd_scores(sel.timesteps, dataset=rep.test, tag="test")
    cfg = classifier_config(rep.cfg, derive_seed(rep.seed, "cross_eval"))
    return cross_eval(rep.train, train_scores, rep.test, test_scores, k, cfg)


def off_diagonal_means(matrix: np.ndarray) -> np.ndarray:
    k = len(matrix)
    mask = ~np.eye(k, dtype=bool)
    return np.array([matrix[i][mask[i]].mean() for i in range(k)])


def _method_accuracy(rep: Replicate, method: str, budget: float) -> float:
    if method == "random":
        spec = rep.select("random", rep.scores("random"), budget)
    else:
        score, _, strategy = method.partition("+")
        spec = rep.select(strategy, rep.scores(score), budget)
    return rep.test_accuracy(spec.selected)


def run_sweep(experiment: str, cfg: dict, threads: int = 1) -> EvalReport:
    """Run one of :data:`EXPERIMENTS` over every configured replicate seed."""
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    t0 = time.perf_counter()
    sw = cfg["sweep"]
    seeds = list(cfg["evaluation"]["seeds"])
    reps = [Replicate(cfg, s, threads) for s in seeds]
    report = EvalReport(experiment, {}, seeds=seeds, config_hash=config_hash(cfg), meta=provenance(cfg))

    if experiment == "ratio_sweep":
        report.axes = {"budget": sw["budgets"], "method": sw["methods"]}
        for b in sw["budgets"]:
            for m in sw["methods"]:
                report.add([_method_accuracy(r, m, b) for r in reps], budget=b, method=m)

    elif experiment == "window_sweep":
        starts = {b: bws_starts(b, cfg["selection"]["step"]) for b in sw["window_budgets"]}
        report.axes = {"budget": sw["window_budgets"], "start": sorted({s for v in starts.values() for s in v})}
        for b in sw["window_budgets"]:
            for s in starts[b]:
                accs = [r.test_accuracy(window_select(r.drd_scores(), b, s).selected) for r in reps]
                report.add(accs, budget=b, start=s)

    elif experiment == "strategy_grid":
        strategies, kinds = ["ccs", "bws"], ["forgetting", "el2n", "drd"]
        report.axes = {"strategy": strategies, "score": kinds, "budget": sw["strategy_budgets"]}
        for st in strategies:
            for kind in kinds:
                for b in sw["strategy_budgets"]:
                    accs = [r.test_accuracy(r.select(st, r.scores(kind), b).selected) for r in reps]
                    report.add(accs, strategy=st, score=kind, budget=b)

    elif experiment == "hyper_sensitivity":
        report.axes = {"B": sw["hyper_B"], "num_eps": sw["hyper_num_eps"], "budget": sw["hyper_budgets"]}
        base = selector_params(cfg)
        for B in sw["hyper_B"]:
            for ne in sw["hyper_num_eps"]:
                p = SelectorParams(B, ne, base.dt, base.gamma_min, base.gamma_max)
                chosen = [r.selection(p).timesteps for r in reps]
                for b in sw["hyper_budgets"]:
                    accs = [r.test_accuracy(r.select("bws", r.drd_scores(r.selection(p).timesteps), b).selected)
                            for r in reps]
                    cell = report.add(accs, B=B, num_eps=ne, budget=b)
                    cell["timesteps"] = [{str(c): t for c, t in sorted(ts.items())} for ts in chosen]

    elif experiment == "timestep_comparison":
        sched = reps[0].schedule
        fixed = sw["timesteps"]
        if fixed is None:
            p = selector_params(cfg)
            fixed = feasible_timesteps(sched, p.gamma_min, p.gamma_max)
        labels = [int(t) for t in fixed] + ["ib"]
        report.axes = {"timestep": labels, "budget": sw["timestep_budgets"]}
        for t in labels:
            for b in sw["timestep_budgets"]:
                ts = None if t == "ib" else t
                accs = [r.test_accuracy(r.select("bws", r.drd_scores(ts), b).selected) for r in reps]
                cell = report.add(accs, timestep=t, budget=b)
                if t != "ib":
                    cell["grid_position"] = sched.grid_position(t)

    report.runtime = time.perf_counter() - t0
    return report
