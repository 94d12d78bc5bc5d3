"""Command-line front end: ``tpoverlap verify|sweep|bench|tune|report``.

Exit codes: 0 success, 1 numerical mismatch, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import kernels
from .config import STRATEGIES, RunConfig, load_config
from .core import (
    DETERMINISTIC_RTOL,
    NONDETERMINISTIC_RTOL,
    TransferMode,
    WriteMode,
    dense_oracle,
    make_workspace,
    max_relative_error,
)
from .engine import EngineOptions, run_strategy
from .errors import ConfigError, OverlapError, ShapeError
from .sim import METRICS_COLUMNS, Timeline, machine_to_dict, metrics, metrics_row, simulate, write_metrics_csv
from .tune import Objective, tune

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG = 0, 1, 2
SWEEP_CSV = "sweep.csv"
TIMELINE_DIR = "timelines"


def _strategy_kwargs(cfg: RunConfig, options: EngineOptions | None = None) -> dict:
    f = cfg.fine
    kw = {"swizzle_on": f.swizzle, "comm": f.comm_rows, "transfer": TransferMode(f.transfer),
          "write_mode": WriteMode(f.write_mode), "partitions": cfg.medium.partitions}
    if options is not None:
        kw["options"] = options
    return kw


def _engine_options(cfg: RunConfig) -> EngineOptions:
    return EngineOptions(workers=cfg.fine.workers, deterministic=cfg.fine.deterministic, seed=cfg.seed)


def _write_meta(out: Path, name: str, cfg: RunConfig, **extra) -> None:
    meta = {"command": name, "seed": cfg.seed, "kernel_backend": kernels.BACKEND, "config": cfg.to_dict()}
    meta.update(extra)
    (out / f"{name}.meta.json").write_text(json.dumps(meta, indent=2))


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    problem = cfg.problem_spec()
    tile = cfg.tile_shape()
    ws = make_workspace(problem, cfg.seed)
    expected = dense_oracle(problem, ws)
    options = _engine_options(cfg)
    tol = DETERMINISTIC_RTOL if cfg.fine.deterministic else NONDETERMINISTIC_RTOL
    rows, status = [], EXIT_OK
    for name in cfg.strategies:
        result = run_strategy(name, problem, ws, tile, **_strategy_kwargs(cfg, options))
        err = max(max_relative_error(a, e) for a, e in zip(result.outputs, expected))
        ok = err <= tol
        status = status if ok else EXIT_MISMATCH
        rows.append({"strategy": name, "pattern": problem.pattern.value, "max_rel_error": err,
                     "tolerance": tol, "status": "PASS" if ok else "FAIL"})
        print(f"{name:8s} {problem.pattern.value:20s} max_rel_error={err:.3e} tol={tol:g} "
              f"{'PASS' if ok else 'FAIL'}")
    with open(out / "verify.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _write_meta(out, "verify", cfg, passed=status == EXIT_OK)
    return status


def run_sweep(cfg: RunConfig) -> tuple[list[dict], dict[str, Timeline]]:
    """Simulate every (pattern, m, strategy) and score it against the coarse baseline."""
    machine = cfg.machine_model()
    tile = cfg.tile_shape()
    rows, timelines = [], {}
    for pattern in cfg.sweep.patterns:
        for m in cfg.sweep.m:
            problem = cfg.problem_spec(m=m, pattern=pattern)
            kw = {"swizzle": cfg.fine.swizzle, "comm": cfg.fine.comm_rows,
                  "transfer": TransferMode(cfg.fine.transfer), "write_mode": WriteMode(cfg.fine.write_mode),
                  "partitions": cfg.medium.partitions}
            base = simulate("coarse", problem, tile, machine)
            for name in cfg.strategies:
                tl = base if name == "coarse" else simulate(name, problem, tile, machine, **kw)
                rows.append(metrics_row(name, problem, metrics(tl, base, problem, tile, machine)))
                timelines[f"{pattern}_m{m}_{name}"] = tl
    return rows, timelines


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    rows, timelines = run_sweep(cfg)
    write_metrics_csv(out / SWEEP_CSV, rows)
    tdir = out / TIMELINE_DIR
    tdir.mkdir(exist_ok=True)
    for key, tl in timelines.items():
        tl.meta["seed"] = cfg.seed
        tl.to_jsonl(tdir / f"{key}.jsonl")
    _write_meta(out, "sweep", cfg, rows=len(rows), machine=machine_to_dict(cfg.machine_model()))
    for row in rows:
        print(f"{row['pattern']:20s} m={row['m']:<6d} {row['strategy']:7s} overall={row['overall_us']:.1f}us "
              f"ect={row['ect_us']:.1f}us eff={row['efficiency']:.3f}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    problem = cfg.problem_spec()
    tile = cfg.tile_shape()
    ws = make_workspace(problem, cfg.seed)
    expected = dense_oracle(problem, ws)
    options = _engine_options(cfg)
    reps = cfg.bench.repetitions
    rows, status = [], EXIT_OK
    for name in cfg.strategies:
        kw = _strategy_kwargs(cfg, options)
        for _ in range(cfg.bench.warmup):
            run_strategy(name, problem, ws, tile, **kw)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            result = run_strategy(name, problem, ws, tile, **kw)
            samples.append((time.perf_counter() - t0) * 1e6)
        err = max(max_relative_error(a, e) for a, e in zip(result.outputs, expected))
        if err > NONDETERMINISTIC_RTOL:
            status = EXIT_MISMATCH
        med = statistics.median(samples)
        row = {"strategy": name, "pattern": problem.pattern.value, "m": problem.m, "n": problem.n,
               "k": problem.k, "tp": problem.tp}
        row.update({f"rep_{i}": s for i, s in enumerate(samples)})
        row.update({"median_us": med, "dispersion": (max(samples) - min(samples)) / med,
                    "max_rel_error": err})
        row["flagged"] = int(row["dispersion"] > 0.20)
        rows.append(row)
        print(f"{name:8s} median={med:.0f}us dispersion={row['dispersion']:.2f} max_rel_error={err:.1e}")
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _write_meta(out, "bench", cfg, warmup=cfg.bench.warmup, repetitions=reps)
    return status


def cmd_tune(cfg: RunConfig, out: Path) -> int:
    problem = cfg.problem_spec()
    ws = make_workspace(problem, cfg.seed)
    objective = Objective(cfg.tune.objective)
    cache = out / "tune_cache.json" if cfg.tune.cache else None
    result = tune(problem, ws, cfg.knob_space(), objective, cfg.tune.repetitions, cfg.machine_model(),
                  cache, _engine_options(cfg), tile=cfg.tile_shape())
    result.to_csv(out / "tune.csv")
    result.to_json(out / "tune.json")
    _write_meta(out, "tune", cfg, provenance=result.provenance)
    print(f"best {result.best_config.encoding()} objective={result.objective_us:.3f}us "
          f"configs={len(result.table)} provenance={result.provenance}")
    return EXIT_OK


def _read_sweep(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ConfigError(f"{path}: header {reader.fieldnames} does not match {METRICS_COLUMNS}")
        return list(reader)


def cmd_report(directory: Path, out: Path) -> int:
    sweeps = sorted(directory.glob(f"**/{SWEEP_CSV}"))
    timelines = sorted(directory.glob(f"**/{TIMELINE_DIR}/*.jsonl"))
    if not sweeps and not timelines:
        raise ConfigError(
            f"no inputs in {directory}: expected {SWEEP_CSV} and {TIMELINE_DIR}/*.jsonl "
            f"(produced by `tpoverlap sweep --out {directory}`)"
        )
    rows = [r for path in sweeps for r in _read_sweep(path)]
    out.mkdir(parents=True, exist_ok=True)
    for pattern in sorted({r["pattern"] for r in rows}):
        sel = [r for r in rows if r["pattern"] == pattern]
        strategies = [s for s in STRATEGIES if any(r["strategy"] == s for r in sel)]
        ms = sorted({int(r["m"]) for r in sel})
        table = out / f"report_{pattern}.csv"
        with open(table, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["m"] + [f"{s}_overall_us" for s in strategies] + [f"{s}_efficiency" for s in strategies])
            lines = [f"## {pattern}", "", "| m | " + " | ".join(f"{s} us (eff)" for s in strategies) + " |",
                     "|---" * (len(strategies) + 1) + "|"]
            for m in ms:
                by = {r["strategy"]: r for r in sel if int(r["m"]) == m}
                writer.writerow([m] + [by[s]["overall_us"] if s in by else "" for s in strategies]
                                + [by[s]["efficiency"] if s in by else "" for s in strategies])
                cells = [f"{float(by[s]['overall_us']):.1f} ({float(by[s]['efficiency']):.3f})" if s in by else "-"
                         for s in strategies]
                lines.append(f"| {m} | " + " | ".join(cells) + " |")
        (out / f"report_{pattern}.md").write_text("\n".join(lines) + "\n")
        print("\n".join(lines) + "\n")
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for path in timelines:
        Timeline.from_jsonl(path).to_chrome_trace(tdir / f"{path.stem}.json")
    print(f"wrote {len(timelines)} Chrome traces to {tdir}")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "sweep": cmd_sweep, "bench": cmd_bench, "tune": cmd_tune}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpoverlap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("verify", "sweep", "bench", "tune", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--out", type=Path, help="output directory (default: the config's out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--strategies", help="comma-separated subset of coarse,medium,fine")
        if name == "report":
            p.add_argument("directory", type=Path, nargs="?", help="directory holding sweep outputs")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.strategies is not None:
        names = [s.strip() for s in args.strategies.split(",") if s.strip()]
        if not names:
            raise ConfigError("--strategies: at least one strategy is required")
        for s in names:
            if s not in STRATEGIES:
                raise ConfigError(f"--strategies: unknown strategy {s!r}; expected one of {', '.join(STRATEGIES)}")
        cfg = replace(cfg, strategies=names)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = _apply_overrides(cfg, args)
        out = Path(cfg.out)
        if args.command == "report":
            directory = args.directory or out
            return cmd_report(directory, out if args.out else directory)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OverlapError as exc:
        # failed correctness checks, deadlocks and the like
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
