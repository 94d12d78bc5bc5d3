"""Multi-rank execution of the overlap strategies on a shared address space.

Each simulated rank runs a pool of worker threads that pull GEMM tiles in
swizzled order, mimicking thread blocks being dispatched onto SMs. AllGather
runs additionally start one host transfer agent per rank. Ranks share their
buffers through :class:`~tpoverlap.core.ShardedWorkspace`'s directory.
"""

from __future__ import annotations

import json
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .core import (
    Pattern,
    ProblemSpec,
    ShardedWorkspace,
    TileCoord,
    TileShape,
    TransferMode,
    WriteMode,
    grid_dims,
    tile_grid,
    validate_tile,
)
from .errors import BoundsError, ConfigError, DeadlockError, OverlapError, SignalError
from .swizzle import (
    SwizzleKind,
    SwizzlePolicy,
    Topology,
    TransferDescriptor,
    comm_order,
    tile_order,
)

DEFAULT_MAX_POLLS = 10**7
DEFAULT_MAX_WAIT_S = 10.0
_POLL_INTERVAL_S = 5e-5


@dataclass
class EngineOptions:
    """Knobs that change how a run executes but never what it computes."""

    workers: int | None = None
    deterministic: bool = True
    jitter_s: float = 0.0
    seed: int = 0
    max_polls: int = DEFAULT_MAX_POLLS
    max_wait_s: float = DEFAULT_MAX_WAIT_S

    def workers_per_rank(self, tp: int) -> int:
        if self.workers is not None:
            if self.workers <= 0:
                raise ConfigError(f"workers must be positive, got {self.workers}")
            return self.workers
        return max(1, (os.cpu_count() or 1) // tp)


class _Aborted(Exception):
    """Another thread failed; unwind quietly."""


class CausalityLog:
    """Thread-safe event record with a global logical clock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._clock = 0
        self.events: list[dict] = []

    def record(self, event: str, rank: int, tile_row: int = -1, tile_col: int = -1, **extra) -> int:
        with self._lock:
            self._clock += 1
            ts = self._clock
            entry = {
                "event": event,
                "rank": int(rank),
                "tile_row": int(tile_row),
                "tile_col": int(tile_col),
                "logical_ts": ts,
                "wall_ns": time.perf_counter_ns(),
            }
            entry.update(extra)
            self.events.append(entry)
        return ts

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e) + "\n")

    def __len__(self):
        return len(self.events)


class SignalBoard:
    """Per-rank readiness flags, one per communication tile.

    A flag goes from unset to set at most once per run. The set is recorded in
    the log *before* it becomes visible, so any reader that observes it has a
    strictly larger logical timestamp.
    """

    def __init__(self, tp: int, flags_per_rank: int, log: CausalityLog | None = None):
        self.tp = tp
        self.flags_per_rank = flags_per_rank
        self.log = log if log is not None else CausalityLog()
        self._flags = [[threading.Event() for _ in range(flags_per_rank)] for _ in range(tp)]
        self._lock = threading.Lock()
        self.set_counts = np.zeros((tp, flags_per_rank), dtype=np.int64)

    def _check(self, rank: int, index: int) -> None:
        if not (0 <= rank < self.tp and 0 <= index < self.flags_per_rank):
            raise BoundsError(f"flag ({rank}, {index}) outside a {self.tp}x{self.flags_per_rank} board")

    def preset(self, rank: int, index: int) -> None:
        self._check(rank, index)
        self.set(rank, index, setter=rank, event="signal_preset")

    def set(self, rank: int, index: int, setter: int, event: str = "signal_set") -> int:
        self._check(rank, index)
        with self._lock:
            if self._flags[rank][index].is_set():
                raise SignalError(f"flag {index} on rank {rank} set twice (second setter {setter})")
            self.set_counts[rank, index] += 1
            ts = self.log.record(event, rank, index, -1, setter=int(setter))
            self._flags[rank][index].set()
        return ts

    def is_set(self, rank: int, index: int) -> bool:
        return self._flags[rank][index].is_set()

    def count_set(self, rank: int) -> int:
        return sum(f.is_set() for f in self._flags[rank])

    def wait(self, rank: int, index: int, options: EngineOptions, abort: threading.Event | None = None,
             waiter: str = "") -> int:
        """Spin until the flag is set; returns the number of polls spent."""
        self._check(rank, index)
        flag = self._flags[rank][index]
        polls = 0
        deadline = time.monotonic() + options.max_wait_s
        while not flag.is_set():
            if abort is not None and abort.is_set():
                raise _Aborted()
            polls += 1
            if polls >= options.max_polls or time.monotonic() > deadline:
                raise DeadlockError(
                    f"{waiter or 'waiter'} gave up on flag {index} of rank {rank} after "
                    f"{polls} polls ({options.max_wait_s}s budget)"
                )
            flag.wait(_POLL_INTERVAL_S)
        return polls

    def reset(self) -> None:
        for row in self._flags:
            for f in row:
                f.clear()
        self.set_counts[:] = 0


@dataclass(frozen=True)
class CommTileSpec:
    """Communication tiling of the AllGather, decoupled from GEMM tiling.

    ``orders`` optionally pins each rank's descriptor list; otherwise it is
    derived from ``topology`` via :func:`~tpoverlap.swizzle.comm_order`.
    """

    rows_per_comm_tile: int
    topology: Topology = field(default_factory=Topology)
    orders: tuple[tuple[TransferDescriptor, ...], ...] | None = None

    def order(self, rank: int, problem: ProblemSpec, mode: TransferMode) -> list[TransferDescriptor]:
        if self.orders is not None:
            return list(self.orders[rank])
        return comm_order(self.topology, rank, problem.tp, self.rows_per_comm_tile, problem.shard_rows, mode)

    def flags_per_rank(self, problem: ProblemSpec) -> int:
        return problem.m // self.rows_per_comm_tile

    def flag_index(self, problem: ProblemSpec, owner: int, row_start: int) -> int:
        return (owner * problem.shard_rows + row_start) // self.rows_per_comm_tile

    def validate(self, problem: ProblemSpec, mode: TransferMode) -> None:
        cr = self.rows_per_comm_tile
        if cr <= 0 or problem.shard_rows % cr:
            raise ConfigError(f"rows_per_comm_tile={cr} must divide m/tp={problem.shard_rows}")
        mode = TransferMode(mode)
        # what each destination receives, keyed by (owner, comm tile)
        received: dict[int, list[tuple[int, int]]] = {r: [] for r in range(problem.tp)}
        for rank in range(problem.tp):
            for d in self.order(rank, problem, mode):
                if d.rank != rank:
                    raise ConfigError(f"descriptor {d} listed under rank {rank}")
                if not (0 <= d.owner < problem.tp and 0 <= d.peer < problem.tp):
                    raise BoundsError(f"descriptor {d} names a rank outside tp={problem.tp}")
                if not (0 <= d.row_start < d.row_stop <= problem.shard_rows) or d.rows != cr or d.row_start % cr:
                    raise BoundsError(f"descriptor {d} is not one aligned comm tile inside the row block")
                received[d.destination(mode)].append((d.owner, d.row_start))
        expected_per_rank = lambda r: sorted(
            (o, s) for o in range(problem.tp) if o != r for s in range(0, problem.shard_rows, cr)
        )
        for r, got in received.items():
            if sorted(got) != expected_per_rank(r):
                raise ConfigError(
                    f"comm descriptors do not cover rank {r}'s non-local rows exactly once"
                )


@dataclass
class TransferRecord:
    descriptor: TransferDescriptor
    copy_ts: int
    set_ts: int
    copy_wall_ns: int
    set_wall_ns: int


@dataclass
class RunResult:
    strategy: str
    outputs: list[np.ndarray]
    log: CausalityLog = field(default_factory=CausalityLog)
    transfers: dict[int, list[TransferRecord]] = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    board: SignalBoard | None = None

    def write_traces(self, path) -> None:
        """CausalityLog plus transfer trace, one JSON object per line."""
        with open(path, "w") as fh:
            for e in self.log.events:
                fh.write(json.dumps(e) + "\n")
            for rank, records in sorted(self.transfers.items()):
                for rec in records:
                    d = rec.descriptor
                    fh.write(json.dumps({
                        "event": "transfer", "rank": rank, "tile_row": d.row_start, "tile_col": -1,
                        "logical_ts": rec.set_ts, "wall_ns": rec.set_wall_ns,
                        "owner": d.owner, "peer": d.peer, "rows": d.rows,
                        "copy_ts": rec.copy_ts, "copy_wall_ns": rec.copy_wall_ns,
                    }) + "\n")


def _check_pattern(problem: ProblemSpec, workspace: ShardedWorkspace, pattern: Pattern) -> None:
    if problem.pattern is not pattern:
        raise ConfigError(f"this strategy needs pattern {pattern.value}, got {problem.pattern.value}")
    if workspace.problem != problem:
        raise ConfigError("workspace was built for a different problem")
    workspace.check_shapes()
    workspace.require_complete()


def _run_threads(targets: Iterable[Callable[[threading.Event], None]]) -> None:
    """Run every target on its own thread; re-raise the first failure."""
    abort = threading.Event()
    errors: list[BaseException] = []
    lock = threading.Lock()

    def wrap(fn):
        try:
            fn(abort)
        except _Aborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            with lock:
                errors.append(exc)
            abort.set()

    threads = [threading.Thread(target=wrap, args=(t,), daemon=True) for t in targets]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def _rank_pool(rank: int, work: list, body: Callable, options: EngineOptions, tp: int) -> list[Callable]:
    """Worker loops that drain ``work`` in order, like blocks onto SMs."""
    cursor = iter(range(len(work)))
    lock = threading.Lock()

    def worker(worker_id: int):
        rng = random.Random(f"{options.seed}:{rank}:{worker_id}")

        def loop(abort: threading.Event):
            while True:
                if abort.is_set():
                    raise _Aborted()
                with lock:
                    idx = next(cursor, None)
                if idx is None:
                    return
                if options.jitter_s > 0:
                    time.sleep(rng.random() * options.jitter_s)
                body(rank, work[idx], abort)

        return loop

    return [worker(w) for w in range(options.workers_per_rank(tp))]


def _tile_gemm(a: np.ndarray, b: np.ndarray, row0: int, row1: int, col0: int, col1: int) -> np.ndarray:
    return kernels.tile_mainloop(a, b, row0, row1, col0, col1)


def _tiled_matmul(a: np.ndarray, b: np.ndarray, tm: int, tn: int) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[1]))
    for r0 in range(0, a.shape[0], tm):
        for c0 in range(0, b.shape[1], tn):
            out[r0:r0 + tm, c0:c0 + tn] = _tile_gemm(a, b, r0, r0 + tm, c0, c0 + tn)
    return out


def rs_policy(rank: int, tp: int, swizzle_on: bool) -> SwizzlePolicy:
    kind = SwizzleKind.RANK_SHIFTED if swizzle_on else SwizzleKind.NAIVE
    return SwizzlePolicy(kind, rank, tp)


def ag_policy(rank: int, tp: int, swizzle_on: bool, topology: Topology, mode: TransferMode) -> SwizzlePolicy:
    if not swizzle_on:
        return SwizzlePolicy(SwizzleKind.NAIVE, rank, tp)
    return SwizzlePolicy.arrival_aligned(rank, tp, topology, mode)


# ---------------------------------------------------------------- ReduceScatter


def run_fused_gemm_reducescatter(
    problem: ProblemSpec,
    workspace: ShardedWorkspace,
    tile: TileShape,
    write_mode: WriteMode = WriteMode.WRITE_ALLTOALL,
    swizzle_on: bool = True,
    options: EngineOptions | None = None,
) -> RunResult:
    """GEMM whose epilogue scatters each tile straight into its owner's buffer."""
    options = options or EngineOptions()
    write_mode = WriteMode(write_mode)
    _check_pattern(problem, workspace, Pattern.GEMM_REDUCESCATTER)
    rows, cols = grid_dims(problem, tile)
    tp = problem.tp
    block_tiles = problem.shard_rows // tile.tm
    workspace.reset_outputs()
    log = CausalityLog()

    # WriteAlltoAll gate: tiles each source has delivered into each destination
    delivered = np.zeros((tp, tp), dtype=np.int64)
    delivered_lock = threading.Lock()
    expected_per_source = block_tiles * cols
    # FusedReduce: per destination tile, which rank may accumulate next
    next_rank = np.zeros((tp, block_tiles, cols), dtype=np.int64)
    conds = [threading.Condition() for _ in range(tp)]
    tile_locks = [[threading.Lock() for _ in range(block_tiles * cols)] for _ in range(tp)]
    accum_count = np.zeros((tp, block_tiles, cols), dtype=np.int64)

    def body(rank: int, coord: TileCoord, abort: threading.Event):
        buf = workspace.peer(rank)
        r0, c0 = coord.row * tile.tm, coord.col * tile.tn
        log.record("compute_start", rank, coord.row, coord.col)
        acc = _tile_gemm(buf.a_shard, buf.b_shard, r0, r0 + tile.tm, c0, c0 + tile.tn)
        dest = coord.row // block_tiles
        local_row = coord.row - dest * block_tiles
        target = workspace.peer(dest)
        rs = slice(local_row * tile.tm, (local_row + 1) * tile.tm)
        cs = slice(c0, c0 + tile.tn)
        if write_mode is WriteMode.WRITE_ALLTOALL:
            target.staging[rank, rs, cs] = acc
            log.record("tile_write", rank, coord.row, coord.col, target=dest)
            with delivered_lock:
                delivered[dest, rank] += 1
            return
        if options.deterministic:
            cond = conds[dest]
            deadline = time.monotonic() + options.max_wait_s
            with cond:
                while next_rank[dest, local_row, coord.col] != rank:
                    if abort.is_set():
                        raise _Aborted()
                    if time.monotonic() > deadline:
                        raise DeadlockError(
                            f"rank {rank} waited too long to accumulate tile {tuple(coord)} on rank {dest}"
                        )
                    cond.wait(_POLL_INTERVAL_S * 20)
                target.c_out[rs, cs] += acc
                accum_count[dest, local_row, coord.col] += 1
                next_rank[dest, local_row, coord.col] += 1
                log.record("tile_reduce", rank, coord.row, coord.col, target=dest)
                cond.notify_all()
        else:
            with tile_locks[dest][local_row * cols + coord.col]:
                target.c_out[rs, cs] += acc
                accum_count[dest, local_row, coord.col] += 1
                log.record("tile_reduce", rank, coord.row, coord.col, target=dest)

    def reducer(dest: int):
        def run(abort: threading.Event):
            deadline = time.monotonic() + options.max_wait_s
            polls = 0
            while True:
                with delivered_lock:
                    done = bool(np.all(delivered[dest] == expected_per_source))
                if done:
                    break
                if abort.is_set():
                    raise _Aborted()
                polls += 1
                if polls >= options.max_polls or time.monotonic() > deadline:
                    raise DeadlockError(
                        f"reduction on rank {dest} never saw all sources complete: {delivered[dest].tolist()}"
                    )
                time.sleep(_POLL_INTERVAL_S)
            target = workspace.peer(dest)
            out = np.zeros_like(target.c_out)
            for src in range(tp):
                out += target.staging[src]
            target.c_out[...] = out
            log.record("reduce_pass", dest)
        return run

    targets = []
    for rank in range(tp):
        order = tile_order(rs_policy(rank, tp, swizzle_on), (rows, cols))
        targets += _rank_pool(rank, order, body, options, tp)
        if write_mode is WriteMode.WRITE_ALLTOALL:
            targets.append(reducer(rank))
    _run_threads(targets)
    result = RunResult("fine", workspace.outputs(), log)
    result.steps = [{"accumulations": accum_count.copy(), "delivered": delivered.copy()}]
    return result


# ---------------------------------------------------------------- AllGather


def host_transfer_loop(
    rank: int,
    workspace: ShardedWorkspace,
    comm: CommTileSpec,
    transfer: TransferMode,
    board: SignalBoard,
    options: EngineOptions | None = None,
    abort: threading.Event | None = None,
) -> list[TransferRecord]:
    """Copy every communication tile of ``rank``'s order, then raise its flag."""
    options = options or EngineOptions()
    transfer = TransferMode(transfer)
    problem = workspace.problem
    log = board.log
    rng = random.Random(f"{options.seed}:host:{rank}")
    own = workspace.peer(rank)
    records = []
    for d in comm.order(rank, problem, transfer):
        if abort is not None and abort.is_set():
            raise _Aborted()
        if not (0 <= d.row_start < d.row_stop <= problem.shard_rows) or not 0 <= d.owner < problem.tp:
            raise BoundsError(f"descriptor {d} falls outside the row block of {problem.shard_rows} rows")
        if options.jitter_s > 0:
            time.sleep(rng.random() * options.jitter_s)
        g0 = d.owner * problem.shard_rows + d.row_start
        rows = slice(g0, g0 + d.rows)
        flag = comm.flag_index(problem, d.owner, d.row_start)
        if transfer is TransferMode.PULL:
            src = workspace.peer(d.peer)
            if d.relayed(transfer):
                board.wait(d.peer, flag, options, abort, waiter=f"relay pull on rank {rank}")
                data = src.a_agg[rows]
            else:
                data = src.a_shard[d.row_start:d.row_stop]
            own.a_agg[rows] = data
            board_rank = rank
        else:
            dst = workspace.peer(d.peer)
            if d.relayed(transfer):
                board.wait(rank, flag, options, abort, waiter=f"relay push on rank {rank}")
                data = own.a_agg[rows]
            else:
                data = own.a_shard[d.row_start:d.row_stop]
            dst.a_agg[rows] = data
            board_rank = d.peer
        copy_ts = log.record("copy_complete", rank, flag, -1, peer=d.peer, owner=d.owner, board=board_rank)
        copy_wall = time.perf_counter_ns()
        set_ts = board.set(board_rank, flag, setter=rank)
        records.append(TransferRecord(d, copy_ts, set_ts, copy_wall, time.perf_counter_ns()))
    return records


def tile_flags(coord: TileCoord, tile: TileShape, rows_per_comm_tile: int) -> range:
    """Flags guarding the aggregate rows a tile reads."""
    first = coord.row * tile.tm
    last = first + tile.tm - 1
    return range(first // rows_per_comm_tile, last // rows_per_comm_tile + 1)


def run_fused_allgather_gemm(
    problem: ProblemSpec,
    workspace: ShardedWorkspace,
    tile: TileShape,
    comm: CommTileSpec | int | None = None,
    transfer: TransferMode = TransferMode.PULL,
    swizzle_on: bool = True,
    options: EngineOptions | None = None,
) -> RunResult:
    """GEMM whose prologue waits on the signal guarding each tile's rows."""
    options = options or EngineOptions()
    transfer = TransferMode(transfer)
    _check_pattern(problem, workspace, Pattern.ALLGATHER_GEMM)
    rows, cols = grid_dims(problem, tile)
    if comm is None:
        comm = CommTileSpec(problem.shard_rows)
    elif isinstance(comm, int):
        comm = CommTileSpec(comm)
    comm.validate(problem, transfer)
    cr = comm.rows_per_comm_tile
    tp = problem.tp

    workspace.reset_outputs()
    log = CausalityLog()
    board = SignalBoard(tp, comm.flags_per_rank(problem), log)
    for rank in range(tp):
        buf = workspace.peer(rank)
        g0 = rank * problem.shard_rows
        buf.a_agg[g0:g0 + problem.shard_rows] = buf.a_shard
        for start in range(0, problem.shard_rows, cr):
            board.preset(rank, comm.flag_index(problem, rank, start))

    transfers: dict[int, list[TransferRecord]] = {}

    def agent(rank: int):
        def run(abort: threading.Event):
            transfers[rank] = host_transfer_loop(rank, workspace, comm, transfer, board, options, abort)
        return run

    def body(rank: int, coord: TileCoord, abort: threading.Event):
        buf = workspace.peer(rank)
        flags = tile_flags(coord, tile, cr)
        polls = 0
        for f in flags:
            polls += board.wait(rank, f, options, abort, waiter=f"tile {tuple(coord)} on rank {rank}")
        if polls:
            log.record("wait", rank, coord.row, coord.col, polls=polls)
        log.record("compute_start", rank, coord.row, coord.col, flags=list(flags))
        r0, c0 = coord.row * tile.tm, coord.col * tile.tn
        buf.c_out[r0:r0 + tile.tm, c0:c0 + tile.tn] = _tile_gemm(
            buf.a_agg, buf.b_shard, r0, r0 + tile.tm, c0, c0 + tile.tn
        )
        log.record("compute_end", rank, coord.row, coord.col)

    targets = []
    for rank in range(tp):
        policy = ag_policy(rank, tp, swizzle_on, comm.topology, transfer)
        targets.append(agent(rank))
        targets += _rank_pool(rank, tile_order(policy, (rows, cols)), body, options, tp)
    _run_threads(targets)
    return RunResult("fine", workspace.outputs(), log, transfers, board=board)


def causality_violations(result: RunResult) -> list[dict]:
    """Compute starts that are not preceded by the set of every flag they read."""
    set_ts = {}
    for e in result.log.events:
        if e["event"] in ("signal_set", "signal_preset"):
            set_ts[(e["rank"], e["tile_row"])] = e["logical_ts"]
    bad = []
    for e in result.log.of("compute_start"):
        for f in e.get("flags", []):
            ts = set_ts.get((e["rank"], f))
            if ts is None or ts >= e["logical_ts"]:
                bad.append({"compute": e, "flag": f, "set_ts": ts})
    return bad


# ---------------------------------------------------------------- baselines


def run_nonoverlap(problem: ProblemSpec, workspace: ShardedWorkspace, tile: TileShape) -> RunResult:
    """Collective and GEMM back to back, in a fixed serial order."""
    validate_tile(problem, tile)
    workspace.check_shapes()
    workspace.require_complete()
    workspace.reset_outputs()
    tp = problem.tp
    steps = []
    if problem.pattern is Pattern.ALLGATHER_GEMM:
        for rank in range(tp):
            buf = workspace.peer(rank)
            for src in range(tp):
                g0 = src * problem.shard_rows
                buf.a_agg[g0:g0 + problem.shard_rows] = workspace.peer(src).a_shard
                steps.append({"rank": rank, "kind": "transfer", "peer": src})
        for rank in range(tp):
            buf = workspace.peer(rank)
            buf.c_out[...] = _tiled_matmul(buf.a_agg, buf.b_shard, tile.tm, tile.tn)
            steps.append({"rank": rank, "kind": "gemm"})
    else:
        partials = []
        for rank in range(tp):
            buf = workspace.peer(rank)
            partials.append(_tiled_matmul(buf.a_shard, buf.b_shard, tile.tm, tile.tn))
            steps.append({"rank": rank, "kind": "gemm"})
        for rank in range(tp):
            rows = slice(rank * problem.shard_rows, (rank + 1) * problem.shard_rows)
            out = np.zeros(problem.output_shape())
            for src in range(tp):
                out += partials[src][rows]
                steps.append({"rank": rank, "kind": "add", "peer": src})
            workspace.peer(rank).c_out[...] = out
    return RunResult("coarse", workspace.outputs(), steps=steps)


@dataclass(frozen=True)
class MediumStep:
    """One chunk of the medium-grained schedule on one rank.

    For ReduceScatter, ``owner`` is the rank the chunk's rows belong to,
    ``recv_from`` the ring neighbour whose running sum is added, and
    ``send_to`` the neighbour that receives the new running sum (``None`` once
    the chunk reaches its owner). For AllGather, ``recv_from`` is the rank the
    chunk is copied from (``None`` for local chunks).
    """

    rank: int
    step: int
    owner: int
    row_start: int
    row_stop: int
    recv_from: int | None
    send_to: int | None

    @property
    def chunk(self) -> tuple[int, int]:
        return (self.row_start, self.row_stop)


def medium_schedule(problem: ProblemSpec, partitions: int) -> list[list[MediumStep]]:
    """Chunk plan shared by the engine and the simulator."""
    tp = problem.tp
    if partitions not in (tp, 2 * tp):
        raise ConfigError(f"partitions must be tp or 2*tp ({tp} or {2 * tp}), got {partitions}")
    per_block = partitions // tp
    if problem.shard_rows % per_block:
        raise ConfigError(f"cannot split a {problem.shard_rows}-row block into {per_block} chunks")
    chunk_rows = problem.shard_rows // per_block
    plan = []
    for rank in range(tp):
        steps = []
        if problem.pattern is Pattern.GEMM_REDUCESCATTER:
            for j in range(tp):
                owner = (rank - j - 1) % tp
                for h in range(per_block):
                    g0 = owner * problem.shard_rows + h * chunk_rows
                    steps.append(MediumStep(
                        rank, len(steps), owner, g0, g0 + chunk_rows,
                        recv_from=(rank - 1) % tp if j > 0 else None,
                        send_to=(rank + 1) % tp if j < tp - 1 else None,
                    ))
        else:
            for j in range(tp):
                owner = (rank + j) % tp
                for h in range(per_block):
                    g0 = owner * problem.shard_rows + h * chunk_rows
                    steps.append(MediumStep(
                        rank, len(steps), owner, g0, g0 + chunk_rows,
                        recv_from=owner if owner != rank else None, send_to=None,
                    ))
        plan.append(steps)
    return plan


def chunk_tile_rows(tile: TileShape, chunk_rows: int) -> int:
    """Row extent of the tiles a chunk GEMM uses (its own kernel, own tiling)."""
    return math.gcd(tile.tm, chunk_rows)


def run_medium_grained(problem: ProblemSpec, workspace: ShardedWorkspace, tile: TileShape,
                       partitions: int | None = None) -> RunResult:
    """Chunked schedule of the prior overlap methods, executed in lockstep."""
    validate_tile(problem, tile)
    workspace.check_shapes()
    workspace.require_complete()
    partitions = problem.tp if partitions is None else partitions
    plan = medium_schedule(problem, partitions)
    workspace.reset_outputs()
    tp = problem.tp
    trace = []

    def emit(step: MediumStep, kind: str, peer=None):
        trace.append({"seq": len(trace), "step": step.step, "rank": step.rank, "kind": kind,
                      "owner": step.owner, "rows": list(step.chunk), "peer": peer})

    if problem.pattern is Pattern.GEMM_REDUCESCATTER:
        # running sums in flight, keyed by (destination rank, chunk)
        mailbox: dict[tuple[int, tuple[int, int]], np.ndarray] = {}
        for s in range(partitions):
            outgoing = {}
            for rank in range(tp):
                step = plan[rank][s]
                buf = workspace.peer(rank)
                g0, g1 = step.chunk
                tm = chunk_tile_rows(tile, g1 - g0)
                partial = _tiled_matmul(buf.a_shard[g0:g1], buf.b_shard, tm, tile.tn)
                emit(step, "gemm")
                if step.recv_from is None:
                    # initialized (zero) running sum delivered before the first step
                    received = np.zeros_like(partial)
                else:
                    received = mailbox.pop((rank, step.chunk))
                acc = received + partial
                emit(step, "add", step.recv_from)
                if step.send_to is not None:
                    outgoing[(step.send_to, step.chunk)] = acc
                    emit(step, "send", step.send_to)
                else:
                    local = g0 - rank * problem.shard_rows
                    buf.c_out[local:local + (g1 - g0)] = acc
            mailbox.update(outgoing)
        if mailbox:
            raise OverlapError(f"undelivered running sums: {sorted(mailbox)}")
    else:
        for rank in range(tp):
            buf = workspace.peer(rank)
            # every non-local chunk transfer is issued up front
            for step in plan[rank]:
                g0, g1 = step.chunk
                if step.recv_from is None:
                    buf.a_agg[g0:g1] = buf.a_shard[g0 - rank * problem.shard_rows:g1 - rank * problem.shard_rows]
                else:
                    src = workspace.peer(step.recv_from)
                    o0 = g0 - step.owner * problem.shard_rows
                    buf.a_agg[g0:g1] = src.a_shard[o0:o0 + (g1 - g0)]
                    emit(step, "transfer", step.recv_from)
            for step in plan[rank]:
                g0, g1 = step.chunk
                tm = chunk_tile_rows(tile, g1 - g0)
                buf.c_out[g0:g1] = _tiled_matmul(buf.a_agg[g0:g1], buf.b_shard, tm, tile.tn)
                emit(step, "gemm")
    return RunResult("medium", workspace.outputs(), steps=trace)


def run_strategy(name: str, problem: ProblemSpec, workspace: ShardedWorkspace, tile: TileShape, **kw) -> RunResult:
    """Dispatch by strategy name: ``coarse``, ``medium`` or ``fine``."""
    if name == "coarse":
        return run_nonoverlap(problem, workspace, tile)
    if name == "medium":
        return run_medium_grained(problem, workspace, tile, kw.get("partitions"))
    if name == "fine":
        options = kw.get("options")
        if problem.pattern is Pattern.ALLGATHER_GEMM:
            return run_fused_allgather_gemm(problem, workspace, tile, kw.get("comm"),
                                            kw.get("transfer", TransferMode.PULL),
                                            kw.get("swizzle_on", True), options)
        return run_fused_gemm_reducescatter(problem, workspace, tile,
                                            kw.get("write_mode", WriteMode.WRITE_ALLTOALL),
                                            kw.get("swizzle_on", True), options)
    raise ConfigError(f"unknown strategy {name!r}; expected coarse, medium or fine")
