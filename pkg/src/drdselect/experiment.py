"""Build the objects of one experiment replicate from a resolved config.

A replicate is one draw of train/test data plus everything computed from
it (denoiser, timestep selection, scores).  Its seeds derive from the master
seed and the replicate index, so replicates are independent of each other
and of evaluation order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierConfig, evaluate, train_classifier
from .coreset import SubsetSpec, bws_select, ccs_select, random_select, window_select
from .coreset import el2n_score, forgetting_score
from .denoiser import TrainConfig, train_denoiser
from .diffusion import NoiseSchedule, linear_schedule
from .gmm import PRESET_OUTLIERS, AnalyticDenoiser, GmmWorld, inject_outliers, make_world, sample_dataset
from .rng import substream
from .scoring import ScoreRecord, get_metric, score_dataset
from .timestep import SelectorParams, TimestepSelection, select_timesteps


def derive_seed(master: int, *keys) -> int:
    return int(substream(master, "derive", *keys).integers(0, 2**62))


def build_schedule(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return linear_schedule(s["T_train"], s["beta_start"], s["beta_end"], s["T_infer"])


def build_world(cfg: dict) -> GmmWorld:
    return make_world(cfg["world"])


def outlier_settings(cfg: dict) -> tuple[float, float]:
    name = cfg["world"] if isinstance(cfg["world"], str) else None
    frac, off = PRESET_OUTLIERS.get(name, (0.0, 10.0))
    d = cfg["data"]
    if d["outlier_fraction"] is not None:
        frac = d["outlier_fraction"]
    if d["outlier_offset"] is not None:
        off = d["outlier_offset"]
    return float(frac), float(off)


def selector_params(cfg: dict) -> SelectorParams:
    return SelectorParams(**cfg["selector"])


def classifier_config(cfg: dict, seed: int, record: bool = False) -> ClassifierConfig:
    ev = cfg["evaluation"]
    return ClassifierConfig(ev["model"], ev["epochs"], ev["lr"], ev["hidden"], seed, record)


def make_train_set(cfg: dict, world: GmmWorld, seed: int):
    ds = sample_dataset(world, cfg["data"]["n_per_class"], derive_seed(seed, "train"))
    frac, off = outlier_settings(cfg)
    if frac > 0:
        ds = inject_outliers(ds, world, frac, off, derive_seed(seed, "outliers"))
    ds.seed = seed
    return ds


def make_test_set(cfg: dict, world: GmmWorld, seed: int, tag: str = "test"):
    ds = sample_dataset(world, cfg["data"]["test_n_per_class"], derive_seed(seed, tag))
    ds.seed = seed
    return ds


def make_denoiser(cfg: dict, world: GmmWorld, schedule: NoiseSchedule, train, seed: int):
    den = cfg["denoiser"]
    if den["kind"] == "analytic":
        return AnalyticDenoiser(world, schedule)
    tc = TrainConfig(den["epochs"], den["batch_size"], den["learning_rate"], den["H"], derive_seed(seed, "denoiser"))
    return train_denoiser(train, schedule, tc)


def random_scores(dataset, seed: int) -> list[ScoreRecord]:
    vals = substream(seed, "random_scores").random(len(dataset))
    return [ScoreRecord(int(i), int(c), -1, float(v), 1, "random") for i, c, v in zip(dataset.ids, dataset.y, vals)]


@dataclass
class Replicate:
    """Lazily computed artifacts of replicate ``index``."""

    cfg: dict
    index: int
    threads: int = 1
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def seed(self) -> int:
        return derive_seed(self.cfg["seed"], "replicate", self.index)

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def schedule(self) -> NoiseSchedule:
        return self._get("schedule", lambda: build_schedule(self.cfg))

    @property
    def world(self) -> GmmWorld:
        return self._get("world", lambda: build_world(self.cfg))

    @property
    def train(self):
        return self._get("train", lambda: make_train_set(self.cfg, self.world, self.seed))

    @property
    def test(self):
        return self._get("test", lambda: make_test_set(self.cfg, self.world, self.seed))

    @property
    def holdout(self):
        return self._get("holdout", lambda: make_test_set(self.cfg, self.world, self.seed, "holdout"))

    @property
    def denoiser(self):
        return self._get("denoiser", lambda: make_denoiser(self.cfg, self.world, self.schedule, self.train, self.seed))

    def selection(self, params: SelectorParams | None = None) -> TimestepSelection:
        p = params or selector_params(self.cfg)
        return self._get(("selection", p.B, p.num_eps, p.dt, p.gamma_min, p.gamma_max), lambda: select_timesteps(
            self.train, self.denoiser, self.schedule, p, derive_seed(self.seed, "selector")))

    def drd_scores(self, timesteps=None, dataset=None, tag: str = "train") -> list[ScoreRecord]:
        """DRD scores at ``timesteps`` (mapping or int); defaults to the IB selection."""
        if timesteps is None:
            timesteps = self.selection().timesteps
        elif np.isscalar(timesteps):
            timesteps = {c: int(timesteps) for c in range(self.world.num_classes)}
        ds = self.train if dataset is None else dataset
        key = ("drd", tag, tuple(sorted(timesteps.items())))
        sc = self.cfg["scoring"]
        return self._get(key, lambda: score_dataset(
            ds, timesteps, self.denoiser, self.schedule, get_metric(sc["metric"]), sc["K"],
            derive_seed(self.seed, "drd"), self.threads))

    def dynamics(self):
        ev = self.cfg["evaluation"]

        def build():
            runs = []
            for r in range(ev["dynamics_runs"]):
                conf = ClassifierConfig(ev["dynamics_model"], ev["dynamics_epochs"], ev["lr"], ev["hidden"],
                                        derive_seed(self.seed, "dynamics", r), record=True)
                runs.append(train_classifier(self.train, conf))
            return runs
        return self._get("dynamics", build)

    def scores(self, kind: str) -> list[ScoreRecord]:
        if kind == "drd":
            return self.drd_scores()
        if kind == "forgetting":
            return self._get("forgetting", lambda: forgetting_score(self.dynamics()))
        if kind == "el2n":
            return self._get("el2n", lambda: el2n_score(self.dynamics(), self.cfg["evaluation"]["probe_epoch"]))
        if kind == "random":
            return self._get("random_scores", lambda: random_scores(self.train, derive_seed(self.seed, "random")))
        raise ValueError(f"unknown score kind {kind!r}")

    # -- training and selection ------------------------------------------

    def fit(self, ids) -> object:
        sub = self.train.subset(ids)
        return train_classifier(sub, classifier_config(self.cfg, derive_seed(self.seed, "eval_model")),
                                num_classes=self.world.num_classes).model

    def test_accuracy(self, ids) -> float:
        return evaluate(self.fit(ids), self.test)

    def bws_evaluator(self):
        target = self.train if self.cfg["selection"]["bws_eval"] == "full_train" else self.holdout
        return lambda ids: evaluate(self.fit(ids), target)

    def select(self, method: str, scores: list[ScoreRecord], budget: float, start: float | None = None) -> SubsetSpec:
        ch = self.cfg["selection"]
        if method == "random":
            return random_select(scores, budget, derive_seed(self.seed, "random_select"))
        if method == "window":
            return window_select(scores, budget, ch["window_start"] if start is None else start)
        if method == "ccs":
            return ccs_select(scores, budget, ch["num_strata"], derive_seed(self.seed, "ccs"))
        if method == "bws":
            return bws_select(scores, budget, self.bws_evaluator(), ch["step"], self.threads)
        raise ValueError(f"unknown selection method {method!r}")
