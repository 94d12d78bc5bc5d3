"""Grid autotuner over the fused kernels' knobs."""

from __future__ import annotations

import csv
import enum
import hashlib
import itertools
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .core import (
    DETERMINISTIC_RTOL,
    NONDETERMINISTIC_RTOL,
    Pattern,
    ProblemSpec,
    ShardedWorkspace,
    TileShape,
    TransferMode,
    WriteMode,
    dense_oracle,
    max_relative_error,
    validate_tile,
)
from .engine import EngineOptions, run_fused_allgather_gemm, run_fused_gemm_reducescatter
from .errors import ConfigError, TuneError
from .sim import MachineModel, default_machine, machine_to_dict, simulate
from .swizzle import SwizzleKind

DEFAULT_TILE_SHAPES = ((64, 64), (128, 64), (64, 128), (128, 128))
DISPERSION_FLAG = 0.20


class Objective(str, enum.Enum):
    SIMULATED_TIME = "simulated_time"
    ENGINE_WALL_CLOCK = "engine_wall_clock"


def comm_tile_sizes(shard_rows: int, tm: int) -> list[int]:
    """Rows per communication tile: the full row block, halved until it reaches ``tm``."""
    if tm <= 0 or shard_rows % tm:
        raise ConfigError(f"tile rows tm={tm} must divide the row block of {shard_rows} rows")
    sizes = [shard_rows]
    # halves stay multiples of tm, so each one still divides the row block
    while sizes[-1] > tm and (sizes[-1] // 2) % tm == 0 and sizes[-1] % 2 == 0:
        sizes.append(sizes[-1] // 2)
    return sizes


def default_tile_shapes(problem: ProblemSpec) -> list[TileShape]:
    """Standard candidates, each side halved until it divides the problem."""
    out = []
    for tm, tn in DEFAULT_TILE_SHAPES:
        while problem.shard_rows % tm:
            tm //= 2
        while problem.n % tn:
            tn //= 2
        shape = TileShape(tm, tn)
        if shape not in out:
            out.append(shape)
    return out


def _swizzle_choices(pattern: Pattern) -> tuple[SwizzleKind, SwizzleKind]:
    if pattern is Pattern.ALLGATHER_GEMM:
        return (SwizzleKind.NAIVE, SwizzleKind.ARRIVAL_ALIGNED)
    return (SwizzleKind.NAIVE, SwizzleKind.RANK_SHIFTED)


@dataclass(frozen=True)
class TuneConfig:
    tile: TileShape
    swizzle: SwizzleKind
    transfer: TransferMode | None = None
    comm_rows: int | None = None
    write_mode: WriteMode | None = None

    @property
    def swizzle_on(self) -> bool:
        return self.swizzle is not SwizzleKind.NAIVE

    def encoding(self) -> str:
        parts = [f"tile={self.tile.tm:05d}x{self.tile.tn:05d}", f"swizzle={self.swizzle.value}"]
        if self.transfer is not None:
            parts.append(f"transfer={self.transfer.value}")
        if self.comm_rows is not None:
            parts.append(f"comm={self.comm_rows:06d}")
        if self.write_mode is not None:
            parts.append(f"write={self.write_mode.value}")
        return ";".join(parts)

    def to_dict(self) -> dict:
        return {"tm": self.tile.tm, "tn": self.tile.tn, "swizzle": self.swizzle.value,
                "transfer": self.transfer.value if self.transfer else None, "comm_rows": self.comm_rows,
                "write_mode": self.write_mode.value if self.write_mode else None}

    @classmethod
    def from_dict(cls, d: dict) -> "TuneConfig":
        return cls(TileShape(d["tm"], d["tn"]), SwizzleKind(d["swizzle"]),
                   TransferMode(d["transfer"]) if d.get("transfer") else None, d.get("comm_rows"),
                   WriteMode(d["write_mode"]) if d.get("write_mode") else None)


@dataclass(frozen=True)
class KnobSpace:
    """Unset fields take every value that applies to the problem."""

    transfer_modes: tuple[TransferMode, ...] = (TransferMode.PULL, TransferMode.PUSH)
    comm_tile_sizes: tuple[int, ...] | None = None
    swizzle_policies: tuple[SwizzleKind, ...] | None = None
    gemm_tile_shapes: tuple[TileShape, ...] | None = None
    write_modes: tuple[WriteMode, ...] = (WriteMode.WRITE_ALLTOALL, WriteMode.FUSED_REDUCE)

    def __post_init__(self):
        object.__setattr__(self, "transfer_modes", tuple(TransferMode(t) for t in self.transfer_modes))
        object.__setattr__(self, "write_modes", tuple(WriteMode(w) for w in self.write_modes))
        if self.swizzle_policies is not None:
            object.__setattr__(self, "swizzle_policies", tuple(SwizzleKind(s) for s in self.swizzle_policies))
        if self.gemm_tile_shapes is not None:
            object.__setattr__(self, "gemm_tile_shapes",
                               tuple(t if isinstance(t, TileShape) else TileShape(*t) for t in self.gemm_tile_shapes))
        if self.comm_tile_sizes is not None:
            object.__setattr__(self, "comm_tile_sizes", tuple(int(c) for c in self.comm_tile_sizes))

    def to_dict(self) -> dict:
        return {
            "transfer_modes": [t.value for t in self.transfer_modes],
            "comm_tile_sizes": list(self.comm_tile_sizes) if self.comm_tile_sizes is not None else None,
            "swizzle_policies": [s.value for s in self.swizzle_policies] if self.swizzle_policies is not None else None,
            "gemm_tile_shapes": [[t.tm, t.tn] for t in self.gemm_tile_shapes] if self.gemm_tile_shapes is not None else None,
            "write_modes": [w.value for w in self.write_modes],
        }


def enumerate_knobs(problem: ProblemSpec, tile: TileShape | None = None,
                    space: KnobSpace | None = None) -> list[TuneConfig]:
    """Full Cartesian grid of the knobs that apply to ``problem``'s pattern."""
    space = space or KnobSpace()
    if space.gemm_tile_shapes is not None:
        tiles = list(space.gemm_tile_shapes)
    elif tile is not None:
        tiles = [tile]
    else:
        tiles = default_tile_shapes(problem)
    allowed = _swizzle_choices(problem.pattern)
    swizzles = allowed if space.swizzle_policies is None else space.swizzle_policies
    for s in swizzles:
        if s not in allowed:
            raise ConfigError(f"swizzle {s.value!r} does not apply to {problem.pattern.value}")
    configs = []
    for t in tiles:
        validate_tile(problem, t)
        if problem.pattern is Pattern.ALLGATHER_GEMM:
            sizes = space.comm_tile_sizes or comm_tile_sizes(problem.shard_rows, t.tm)
            for c in sizes:
                if c <= 0 or problem.shard_rows % c:
                    raise ConfigError(f"comm tile size {c} does not divide the row block of {problem.shard_rows}")
            for mode, c, s in itertools.product(space.transfer_modes, sizes, swizzles):
                configs.append(TuneConfig(t, s, transfer=mode, comm_rows=c))
        else:
            for w, s in itertools.product(space.write_modes, swizzles):
                configs.append(TuneConfig(t, s, write_mode=w))
    if not configs:
        raise ConfigError("the knob space is empty")
    return configs


@dataclass(frozen=True)
class TuneRow:
    config: TuneConfig
    objective_us: float
    repetitions: int
    dispersion: float
    max_rel_error: float | None = None

    @property
    def flagged(self) -> bool:
        return self.dispersion > DISPERSION_FLAG


@dataclass
class TuneResult:
    best_config: TuneConfig
    objective_us: float
    table: list[TuneRow]
    objective: Objective
    provenance: str = "computed"
    cache_key: str | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "best_config": self.best_config.to_dict(),
            "best_encoding": self.best_config.encoding(),
            "objective_us": self.objective_us,
            "objective": self.objective.value,
            "cache_key": self.cache_key,
            "meta": self.meta,
            "table": [{"config": r.config.to_dict(), "encoding": r.config.encoding(), "objective_us": r.objective_us,
                       "repetitions": r.repetitions, "dispersion": r.dispersion, "flagged": r.flagged,
                       "max_rel_error": r.max_rel_error} for r in self.table],
        }

    @classmethod
    def from_dict(cls, d: dict, provenance: str = "computed") -> "TuneResult":
        table = [TuneRow(TuneConfig.from_dict(r["config"]), r["objective_us"], r["repetitions"], r["dispersion"],
                         r.get("max_rel_error")) for r in d["table"]]
        return cls(TuneConfig.from_dict(d["best_config"]), d["objective_us"], table, Objective(d["objective"]),
                   provenance, d.get("cache_key"), d.get("meta", {}))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict() | {"provenance": self.provenance}, fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["config", "objective_us", "repetitions", "dispersion", "flagged", "max_rel_error", "best"])
            best = self.best_config.encoding()
            for r in self.table:
                writer.writerow([r.config.encoding(), repr(r.objective_us), r.repetitions, repr(r.dispersion),
                                 int(r.flagged), "" if r.max_rel_error is None else repr(r.max_rel_error),
                                 int(r.config.encoding() == best)])


def _run_engine(problem, workspace, cfg: TuneConfig, options: EngineOptions):
    if problem.pattern is Pattern.ALLGATHER_GEMM:
        return run_fused_allgather_gemm(problem, workspace, cfg.tile, cfg.comm_rows, cfg.transfer,
                                        cfg.swizzle_on, options)
    return run_fused_gemm_reducescatter(problem, workspace, cfg.tile, cfg.write_mode, cfg.swizzle_on, options)


def _check(problem, workspace, cfg, options, expected) -> float:
    result = _run_engine(problem, workspace, cfg, options)
    err = max(max_relative_error(a, e) for a, e in zip(result.outputs, expected))
    tol = DETERMINISTIC_RTOL if options.deterministic else NONDETERMINISTIC_RTOL
    if not err <= tol:
        raise TuneError(f"config {cfg.encoding()} failed the oracle check: max relative error {err:.3e} > {tol:g}",
                        config=cfg.encoding())
    return err


def cache_key(problem: ProblemSpec, machine: MachineModel | None, configs: list[TuneConfig],
              objective: Objective, repetitions: int) -> str:
    payload = {
        "problem": [problem.m, problem.n, problem.k, problem.tp, problem.pattern.value],
        "machine": machine_to_dict(machine) if machine is not None else None,
        "knobs": [c.encoding() for c in configs],
        "objective": objective.value,
        "repetitions": repetitions,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def tune(
    problem: ProblemSpec,
    workspace: ShardedWorkspace | None,
    knobs: KnobSpace | list[TuneConfig] | None = None,
    objective: Objective | str = Objective.SIMULATED_TIME,
    repetitions: int = 3,
    machine: MachineModel | None = None,
    cache_path: str | Path | None = None,
    options: EngineOptions | None = None,
    tile: TileShape | None = None,
) -> TuneResult:
    """Evaluate every configuration and keep the fastest.

    Every configuration is checked against the dense oracle on ``workspace``
    before its time counts. ``workspace`` may be ``None`` only for the
    simulated objective, which then skips the engine check.
    """
    objective = Objective(objective)
    options = options or EngineOptions()
    configs = knobs if isinstance(knobs, list) else enumerate_knobs(problem, tile, knobs)
    if not configs:
        raise ConfigError("the knob space is empty")
    if objective is Objective.ENGINE_WALL_CLOCK:
        if repetitions < 3:
            raise ConfigError(f"wall-clock tuning needs at least 3 repetitions, got {repetitions}")
        if workspace is None:
            raise ConfigError("wall-clock tuning needs a workspace")
        machine_for_key = None
    else:
        machine = machine or default_machine()
        machine_for_key = machine
    reps = repetitions if objective is Objective.ENGINE_WALL_CLOCK else 1
    key = cache_key(problem, machine_for_key, configs, objective, reps)

    cache = {}
    if cache_path is not None and Path(cache_path).exists():
        cache = json.loads(Path(cache_path).read_text())
        if key in cache:
            return TuneResult.from_dict(cache[key], provenance=f"cache:{cache_path}")

    expected = dense_oracle(problem, workspace) if workspace is not None else None
    rows = []
    for cfg in configs:
        err = _check(problem, workspace, cfg, options, expected) if workspace is not None else None
        if objective is Objective.SIMULATED_TIME:
            tl = simulate("fine", problem, cfg.tile, machine, swizzle=cfg.swizzle_on, comm=cfg.comm_rows,
                          transfer=cfg.transfer or TransferMode.PULL,
                          write_mode=cfg.write_mode or WriteMode.WRITE_ALLTOALL)
            rows.append(TuneRow(cfg, tl.overall_us, 1, 0.0, err))
            continue
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            _run_engine(problem, workspace, cfg, options)
            samples.append((time.perf_counter() - t0) * 1e6)
        med = statistics.median(samples)
        rows.append(TuneRow(cfg, med, reps, (max(samples) - min(samples)) / med if med > 0 else 0.0, err))

    best = min(rows, key=lambda r: (r.objective_us, r.config.encoding()))
    result = TuneResult(best.config, best.objective_us, rows, objective, cache_key=key,
                        meta={"m": problem.m, "n": problem.n, "k": problem.k, "tp": problem.tp,
                              "pattern": problem.pattern.value})
    if cache_path is not None:
        cache[key] = result.to_dict()
        Path(cache_path).write_text(json.dumps(cache, indent=2))
    return result
