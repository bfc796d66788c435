"""Pipeline stages with content-addressed artifact reuse.

Stage order: gen-data -> train-denoiser -> pick-timestep -> score -> select
-> evaluate -> report.  Every artifact records the full config hash plus a
*stage hash* covering only the config sections the stage depends on
(cumulatively).  A stage is skipped when its artifact exists with the
current stage hash; a mismatch raises :class:`HashMismatch` unless
``force`` is set.  Numerical modules are imported inside the stages so a
fully cached rerun only pays for hashing.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from pathlib import Path

from . import __version__
from .config import canonical, config_hash

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-denoiser", "pick-timestep", "score", "select", "evaluate", "report")
_SECTIONS = {
    "gen-data": ("seed", "world", "data"),
    "train-denoiser": ("schedule", "denoiser"),
    "pick-timestep": ("selector",),
    "score": ("scoring",),
    "select": ("selection", "evaluation"),
    "evaluate": (),
    "report": ("sweep",),
}
ARTIFACTS = {
    "gen-data": "dataset.csv",
    "train-denoiser": "denoiser.json",
    "pick-timestep": "selection.json",
    "score": "scores.csv",
    "select": "subset.json",
    "evaluate": "eval.json",
    "report": "report.csv",
}


class StageError(RuntimeError):
    pass


class HashMismatch(StageError):
    pass


class MissingArtifact(StageError):
    pass


def stage_hash(cfg: dict, stage: str) -> str:
    keys = []
    for s in STAGES[: STAGES.index(stage) + 1]:
        keys.extend(_SECTIONS[s])
    sub = {k: cfg[k] for k in keys}
    return hashlib.sha256(canonical(sub).encode()).hexdigest()[:16]


def stamp(cfg: dict, stage: str) -> dict:
    return {"config_hash": config_hash(cfg), "stage_hash": stage_hash(cfg, stage),
            "seed": cfg["seed"], "tool_version": __version__}


def stamp_line(cfg: dict, stage: str) -> str:
    return " ".join(f"{k}={v}" for k, v in stamp(cfg, stage).items())


def read_stamp(path: Path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        body = json.loads(path.read_text())
        return {k: body.get(k) for k in ("config_hash", "stage_hash", "seed", "tool_version")}
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(re.findall(r"(\w+)=(\S+)", first))


def artifact_state(cfg: dict, out: Path, stage: str) -> str:
    """``"missing"``, ``"fresh"`` or ``"stale"`` for the artifact of ``stage``."""
    path = Path(out) / ARTIFACTS[stage]
    if not path.exists():
        return "missing"
    return "fresh" if read_stamp(path).get("stage_hash") == stage_hash(cfg, stage) else "stale"


def require(cfg: dict, out: Path, stage: str) -> Path:
    """Path of an upstream artifact, checked against the current config."""
    path = Path(out) / ARTIFACTS[stage]
    state = artifact_state(cfg, out, stage)
    if state == "missing":
        raise MissingArtifact(f"missing upstream artifact {path} (run `{stage}` first)")
    if state == "stale":
        raise HashMismatch(f"{path} was produced by a different config (stage {stage})")
    return path


# --------------------------------------------------------------------------
# loaders


def load_train(cfg: dict, out: Path):
    from .experiment import build_world
    from .gmm import read_dataset_csv

    world = build_world(cfg)
    ds = read_dataset_csv(require(cfg, out, "gen-data"), world.num_classes)
    ds.seed = cfg["seed"]
    return ds


def load_test(cfg: dict, out: Path):
    from .experiment import build_world
    from .gmm import read_dataset_csv

    require(cfg, out, "gen-data")
    return read_dataset_csv(Path(out) / "test.csv", build_world(cfg).num_classes)


def load_denoiser_for(cfg: dict, out: Path):
    from .denoiser import load_denoiser
    from .experiment import build_schedule, build_world
    from .gmm import AnalyticDenoiser

    schedule = build_schedule(cfg)
    if cfg["denoiser"]["kind"] == "analytic":
        return AnalyticDenoiser(build_world(cfg), schedule)
    require(cfg, out, "train-denoiser")
    return load_denoiser(Path(out) / "denoiser.bin", schedule)


def _pipeline_replicate(cfg: dict):
    from .experiment import Replicate

    return Replicate(cfg, 0)


# --------------------------------------------------------------------------
# stages


def gen_data(cfg: dict, out: Path, threads: int = 1) -> None:
    from .gmm import write_dataset_csv

    rep = _pipeline_replicate(cfg)
    write_dataset_csv(rep.train, Path(out) / "dataset.csv", stamp_line(cfg, "gen-data"))
    write_dataset_csv(rep.test, Path(out) / "test.csv", stamp_line(cfg, "gen-data"))


def train_denoiser_stage(cfg: dict, out: Path, threads: int = 1) -> None:
    from .denoiser import save_denoiser
    from .experiment import build_schedule, build_world, make_denoiser

    meta = stamp(cfg, "train-denoiser")
    meta["kind"] = cfg["denoiser"]["kind"]
    if cfg["denoiser"]["kind"] == "learned":
        train = load_train(cfg, out)
        model = make_denoiser(cfg, build_world(cfg), build_schedule(cfg), train, _pipeline_replicate(cfg).seed)
        save_denoiser(model, Path(out) / "denoiser.bin")
        meta.update({"d": model.d, "C": model.C, "H": model.H, "loss_history": model.history})
    (Path(out) / "denoiser.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def pick_timestep(cfg: dict, out: Path, threads: int = 1):
    from .experiment import build_schedule, derive_seed, selector_params
    from .timestep import select_timesteps

    train = load_train(cfg, out)
    den = load_denoiser_for(cfg, out)
    sched = build_schedule(cfg)
    sel = select_timesteps(train, den, sched, selector_params(cfg),
                           derive_seed(_pipeline_replicate(cfg).seed, "selector"))
    extra = stamp(cfg, "pick-timestep")
    extra["grid_positions_note"] = "grid positions are 0-based indices into the inference grid"
    (Path(out) / "selection.json").write_text(sel.to_json(extra))
    log.info("feasible timesteps %s; selected %s", sel.feasible, sel.timesteps)
    return sel


def score(cfg: dict, out: Path, threads: int = 1) -> None:
    from .experiment import build_schedule, derive_seed
    from .scoring import get_metric, score_dataset, write_scores_csv
    from .timestep import TimestepSelection

    train = load_train(cfg, out)
    den = load_denoiser_for(cfg, out)
    sched = build_schedule(cfg)
    override = cfg["scoring"]["timestep_override"]
    if override is not None:
        t = sched.grid_timestep(int(override))
        timesteps = {c: t for c in range(train.num_classes)}
    else:
        timesteps = TimestepSelection.from_json(require(cfg, out, "pick-timestep").read_text()).timesteps
    sc = cfg["scoring"]
    recs = score_dataset(train, timesteps, den, sched, get_metric(sc["metric"]), sc["K"],
                         derive_seed(_pipeline_replicate(cfg).seed, "drd"), threads)
    write_scores_csv(recs, Path(out) / "scores.csv", stamp_line(cfg, "score"))


def select(cfg: dict, out: Path, threads: int = 1):
    from .scoring import read_scores_csv

    train = load_train(cfg, out)
    rep = _pipeline_replicate(cfg)
    rep.threads = threads
    rep._cache["train"] = train
    ch = cfg["selection"]
    kind = ch["score"]
    if kind == "drd":
        scores = read_scores_csv(require(cfg, out, "score"))
    else:
        scores = rep.scores(kind)
    spec = rep.select(ch["method"], scores, ch["budget"])
    spec.params["score"] = kind
    (Path(out) / "subset.json").write_text(spec.to_json(stamp(cfg, "select")))
    spec.write_ids_csv(Path(out) / "subset_ids.csv")
    return spec


def evaluate_stage(cfg: dict, out: Path, threads: int = 1) -> dict:
    from .classifier import evaluate, train_classifier
    from .coreset import SubsetSpec
    from .experiment import classifier_config, derive_seed

    train = load_train(cfg, out)
    test = load_test(cfg, out)
    spec = SubsetSpec.from_json(require(cfg, out, "select").read_text())
    seed = derive_seed(_pipeline_replicate(cfg).seed, "eval_model")
    conf = classifier_config(cfg, seed)
    acc = evaluate(train_classifier(train.subset(spec.selected), conf).model, test)
    full = evaluate(train_classifier(train, conf).model, test)
    body = {**stamp(cfg, "evaluate"), "method": spec.method, "budget": spec.budget,
            "subset_size": len(spec), "train_size": len(train), "test_size": len(test),
            "test_accuracy": acc, "full_data_test_accuracy": full}
    (Path(out) / "eval.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return body


def _flatten(prefix: str, obj, rows: list) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], rows)
    elif isinstance(obj, (int, float, str, bool)) or obj is None:
        rows.append((prefix, obj))


def report(cfg: dict, out: Path, threads: int = 1) -> None:
    """Collate every JSON report under ``out`` into ``report.csv`` and ``summary.txt``."""
    out = Path(out)
    # timing.json holds wall-clock times and would break byte-identical reports
    files = sorted(p for p in out.rglob("*.json") if p.name not in ("denoiser.json", "timing.json"))
    rows = []
    for p in files:
        body = json.loads(p.read_text())
        flat: list = []
        _flatten("", {k: v for k, v in body.items() if k not in ("curves", "selected")}, flat)
        rows.extend((str(p.relative_to(out)), k, v) for k, v in flat)
    with open(out / "report.csv", "w", newline="") as fh:
        fh.write(f"# {stamp_line(cfg, 'report')}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["artifact", "key", "value"])
        w.writerows(rows)
    lines = [f"drdselect report  ({stamp_line(cfg, 'report')})", ""]
    for p in files:
        body = json.loads(p.read_text())
        name = str(p.relative_to(out))
        if "passed" in body:
            lines.append(f"{name}: {'PASS' if body['passed'] else 'FAIL'} ({body.get('check')})")
        elif "test_accuracy" in body:
            lines.append(f"{name}: test accuracy {body['test_accuracy']:.4f} "
                         f"(full data {body['full_data_test_accuracy']:.4f}, subset {body['subset_size']})")
        elif "timesteps" in body and "feasible" in body:
            lines.append(f"{name}: timesteps {body['timesteps']} grid positions {body.get('grid_positions')}")
        elif "cells" in body:
            lines.append(f"{name}: {body['experiment']} with {len(body['cells'])} cells")
            for c in body["cells"]:
                axes = ", ".join(f"{k}={c[k]}" for k in body["axes"])
                lines.append(f"    {axes}: {c['mean']:.4f} +- {c['std']:.4f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


STAGE_FUNCS = {
    "gen-data": gen_data,
    "train-denoiser": train_denoiser_stage,
    "pick-timestep": pick_timestep,
    "score": score,
    "select": select,
    "evaluate": evaluate_stage,
    "report": report,
}


def run_pipeline(cfg: dict, out, threads: int = 1, force: bool = False) -> list[tuple[str, str]]:
    """Run every stage in order; returns ``(stage, "cached" | "ran")`` pairs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    done = []
    for stage in STAGES:
        state = artifact_state(cfg, out, stage)
        if stage != "report" and state == "fresh":
            done.append((stage, "cached"))
            continue
        if state == "stale" and not force:
            raise HashMismatch(f"{out / ARTIFACTS[stage]} exists with a different config hash; use --force")
        if stage == "report" and state == "fresh" and all(s == "cached" for _, s in done):
            done.append((stage, "cached"))
            continue
        STAGE_FUNCS[stage](cfg, out, threads)
        done.append((stage, "ran"))
    return done
