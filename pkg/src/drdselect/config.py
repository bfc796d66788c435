"""Experiment configuration: defaults, validation and hashing.

A config file is YAML (JSON also parses).  Missing keys take the defaults
below; the hash is taken over the fully resolved config, so defaults are
part of every hash preimage.  Output location and thread count are run
options and stay out of the hash.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from . import __version__

# names of the worlds defined in gmm.PRESETS (kept here so validation stays import-light)
PRESET_NAMES = ("W2", "W2overlap", "W2o", "W1overlap", "G2")

DEFAULTS: dict = {
    "seed": 0,
    "world": "W2overlap",
    "data": {
        "n_per_class": 500,
        "test_n_per_class": 500,
        "outlier_fraction": None,   # None -> preset default (W2o: 0.1)
        "outlier_offset": None,     # None -> preset default (W2o: 10.0)
    },
    "schedule": {"T_train": 1000, "beta_start": 1e-4, "beta_end": 0.02, "T_infer": 50},
    "denoiser": {
        "kind": "analytic",
        "epochs": 200,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "H": 128,
    },
    "scoring": {"K": 8, "metric": "squared_l2", "timestep_override": None},
    "selector": {"B": 20, "num_eps": 20, "dt": 1, "gamma_min": 0.05, "gamma_max": 1.0},
    "selection": {
        "method": "bws",
        "score": "drd",
        "budget": 0.3,
        "window_start": 0.3,
        "num_strata": 5,
        "step": 0.05,
        "bws_eval": "full_train",
    },
    "evaluation": {
        "model": "logistic",
        "epochs": 300,
        "lr": 0.5,
        "hidden": 16,
        "seeds": [0, 1, 2, 3, 4],
        "probe_epoch": 5,
        "dynamics_model": "mlp2",
        "dynamics_epochs": 30,
        "dynamics_runs": 3,
    },
    "sweep": {
        "budgets": [0.1, 0.2, 0.3, 0.5, 0.75],
        "methods": ["random", "drd+bws", "drd+ccs", "forgetting+bws", "el2n+bws"],
        "strategy_budgets": [0.1, 0.3, 0.75],
        "hyper_B": [5, 20, 40],
        "hyper_num_eps": [5, 20, 40],
        "hyper_budgets": [0.1, 0.3, 0.75],
        "window_budgets": [0.3],
        "timestep_budgets": [0.3],
        "timesteps": None,          # None -> every feasible grid timestep
    },
}

METHODS = {"bws", "ccs", "window", "random"}
SCORES = {"drd", "forgetting", "el2n", "random"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "world":
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def resolve(raw: dict | None = None) -> dict:
    """Merge ``raw`` over the defaults and validate the result."""
    cfg = _merge(DEFAULTS, raw or {})
    validate(cfg)
    return cfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: dict) -> None:
    world = cfg["world"]
    if isinstance(world, str):
        _require(world in PRESET_NAMES, f"unknown world preset {world!r}")
    else:
        _require(isinstance(world, dict) and "classes" in world, "inline world needs 'classes'")
    d = cfg["data"]
    _require(int(d["n_per_class"]) >= 1, "data.n_per_class must be >= 1")
    _require(int(d["test_n_per_class"]) >= 1, "data.test_n_per_class must be >= 1")
    if d["outlier_fraction"] is not None:
        _require(0 <= d["outlier_fraction"] < 0.5, "data.outlier_fraction must lie in [0, 0.5)")
    s = cfg["schedule"]
    _require(0 < s["beta_start"] <= s["beta_end"] < 1, "need 0 < beta_start <= beta_end < 1")
    _require(1 <= s["T_infer"] <= s["T_train"], "need 1 <= T_infer <= T_train")
    den = cfg["denoiser"]
    _require(den["kind"] in ("analytic", "learned"), "denoiser.kind must be analytic or learned")
    _require(den["H"] >= 1 and den["batch_size"] >= 1 and den["epochs"] >= 0, "bad denoiser hyperparameters")
    sc = cfg["scoring"]
    _require(sc["K"] >= 1, "scoring.K must be >= 1")
    _require(sc["metric"] in ("squared_l2", "lpips"), f"unknown metric {sc['metric']!r}")
    sel = cfg["selector"]
    _require(sel["B"] >= 1 and sel["num_eps"] >= 1 and sel["dt"] >= 1, "selector B, num_eps, dt must be >= 1")
    _require(0 < sel["gamma_min"] < sel["gamma_max"], "need 0 < gamma_min < gamma_max")
    ch = cfg["selection"]
    _require(ch["method"] in METHODS, f"selection.method must be one of {sorted(METHODS)}")
    _require(ch["score"] in SCORES, f"selection.score must be one of {sorted(SCORES)}")
    _require(0 < ch["budget"] <= 1, "selection.budget must lie in (0, 1]")
    _require(0 <= ch["window_start"] and ch["window_start"] + ch["budget"] <= 1 + 1e-9,
             "selection.window_start + budget must not exceed 1")
    _require(ch["num_strata"] >= 1 and 0 < ch["step"] <= 0.5, "bad num_strata or step")
    _require(ch["bws_eval"] in ("full_train", "holdout"), "selection.bws_eval must be full_train or holdout")
    ev = cfg["evaluation"]
    _require(ev["model"] in ("logistic", "mlp2"), "evaluation.model must be logistic or mlp2")
    _require(ev["dynamics_model"] in ("logistic", "mlp2"), "evaluation.dynamics_model must be logistic or mlp2")
    _require(len(ev["seeds"]) >= 3, "evaluation.seeds needs at least 3 seeds")
    _require(ev["dynamics_epochs"] >= max(2, ev["probe_epoch"]), "dynamics_epochs must cover probe_epoch and be >= 2")
    sw = cfg["sweep"]
    for key in ("budgets", "strategy_budgets", "hyper_budgets", "window_budgets", "timestep_budgets"):
        _require(all(0 < b <= 1 for b in sw[key]), f"sweep.{key} entries must lie in (0, 1]")
    for m in sw["methods"]:
        score, _, strat = m.partition("+")
        _require(m == "random" or (score in SCORES and strat in ("bws", "ccs")), f"unknown sweep method {m!r}")


def load_config(path) -> dict:
    """Read and resolve a YAML/JSON config file."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return resolve(raw)


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()[:16]


def provenance(cfg: dict) -> dict:
    """Fields embedded in every artifact."""
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "tool_version": __version__}


def provenance_line(cfg: dict) -> str:
    p = provenance(cfg)
    return f"config_hash={p['config_hash']} seed={p['seed']} tool_version={p['tool_version']}"
