"""Command-line driver.

Exit codes: 0 success, 1 stage failure, 2 invalid config, 3 hash mismatch
on artifact reuse.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config, resolve

log = logging.getLogger("drdselect")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG, EXIT_HASH = 0, 1, 2, 3
# mirrors of evaluation.EXPERIMENTS and oracle.CHECKS; importing those modules
# would pull scipy into every invocation
EXPERIMENTS = ("ratio_sweep", "window_sweep", "strategy_grid", "hyper_sensitivity", "timestep_comparison")
CHECKS = ("mi", "lemma1", "theorem1", "exhaustive")


def _threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config (defaults if omitted)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=_threads, default=os.cpu_count() or 1)
    common.add_argument("--force", action="store_true", help="overwrite artifacts from a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drdselect", description="Diffusion reconstruction deviation core-set selection.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "run every pipeline stage with artifact reuse"),
        ("gen-data", "sample train and test sets"),
        ("train-denoiser", "train the learned denoiser (no-op for the analytic one)"),
        ("pick-timestep", "select per-class scoring timesteps"),
        ("select", "select the core set"),
        ("evaluate", "train the proxy classifier on the core set and test it"),
        ("report", "collate JSON reports into report.csv and summary.txt"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    sc = sub.add_parser("score", parents=[common], help="compute reconstruction deviations")
    sc.add_argument("--timestep-override", type=int, metavar="GRID_POS",
                    help="score every class at this inference-grid position instead of the selected timesteps")
    sw = sub.add_parser("sweep", parents=[common], help="run an evaluation sweep")
    sw.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    orc = sub.add_parser("oracle", parents=[common], help="run oracle checks")
    orc.add_argument("--check", choices=CHECKS + ("all",), default="all")
    return p


def _load(args) -> dict:
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        cfg = load_config(args.config)
    else:
        cfg = resolve()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg["seed"] = args.seed
    override = getattr(args, "timestep_override", None)
    if override is not None:
        T_infer = cfg["schedule"]["T_infer"]
        if not 0 <= override < T_infer:
            raise ConfigError(f"--timestep-override must lie in [0, {T_infer})")
        cfg["scoring"]["timestep_override"] = override
    return resolve(cfg)


def _write_timing(out: Path, command: str, seconds: float) -> None:
    path = out / "timing.json"
    body = json.loads(path.read_text()) if path.exists() else {}
    body[command] = round(seconds, 3)
    path.write_text(json.dumps(body, indent=2, sort_keys=True))


def _dispatch(args, cfg: dict) -> int:
    from . import pipeline

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "run":
        for stage, status in pipeline.run_pipeline(cfg, out, args.threads, args.force):
            print(f"{stage}: {status}")
        return EXIT_OK
    if args.command == "sweep":
        from .evaluation import run_sweep

        rep = run_sweep(args.experiment, cfg, args.threads)
        base = out / "reports" / f"sweep_{args.experiment}"
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".json").write_text(rep.to_json())
        base.with_suffix(".csv").write_text(f"# {pipeline.stamp_line(cfg, 'report')}\n" + rep.to_csv())
        print(f"wrote {base}.json and {base}.csv")
        return EXIT_OK
    if args.command == "oracle":
        from .oracle import run_check

        names = CHECKS if args.check == "all" else (args.check,)
        d = out / "reports" / "oracle"
        d.mkdir(parents=True, exist_ok=True)
        ok = True
        for name in names:
            for i, r in enumerate(run_check(name, cfg, args.threads)):
                world = r.details.get("world", "")
                (d / f"{name}_{world}_{i}.json").write_text(r.to_json())
                print(f"{'PASS' if r.passed else 'FAIL'} {name} {world} {i}")
                ok &= r.passed
        return EXIT_OK if ok else EXIT_STAGE
    stage = args.command
    state = pipeline.artifact_state(cfg, out, stage)
    if state == "stale" and not args.force:
        raise pipeline.HashMismatch(f"{out / pipeline.ARTIFACTS[stage]} exists with a different config hash; "
                                    "use --force")
    pipeline.STAGE_FUNCS[stage](cfg, out, args.threads)
    print(f"{stage}: wrote {out / pipeline.ARTIFACTS[stage]}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .pipeline import HashMismatch

    t0 = time.perf_counter()
    try:
        code = _dispatch(args, cfg)
    except HashMismatch as exc:
        print(f"hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except Exception as exc:  # any stage failure maps to exit 1
        log.debug("stage failure", exc_info=True)
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    _write_timing(args.out, args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
