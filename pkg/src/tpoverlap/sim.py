"""Deterministic discrete-event cost model for the overlap strategies.

Compute is modelled at tile granularity on ``sm_count`` slots per rank; data
movement as fluid flows over per-rank ports with equal bandwidth sharing,
recomputed whenever a flow starts or finishes.

Kernel launches are issued by the host one after another, each costing
``launch_overhead_us``; a kernel's work can start only once it has been
issued. Collectives run as kernels, while copy-engine transfers (the fused
host loop and chunked exchanges) need no launch.
"""

from __future__ import annotations

import csv
import enum
import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import kernels
from .core import Pattern, ProblemSpec, TileShape, TransferMode, WriteMode, grid_dims
from .engine import ag_policy, chunk_tile_rows, medium_schedule, rs_policy, tile_flags
from .errors import ConfigError
from .swizzle import Topology, TopologyKind, comm_order, tile_order


class Strategy(str, enum.Enum):
    COARSE = "coarse"
    MEDIUM = "medium"
    FINE = "fine"


class EventKind(str, enum.Enum):
    TILE_COMPUTE = "TileCompute"
    TRANSFER = "Transfer"
    KERNEL_LAUNCH = "KernelLaunch"
    WAIT = "Wait"
    REDUCE = "Reduce"


@dataclass(frozen=True)
class MachineModel:
    sm_count: int = 16
    flops_per_us: float = 1.0e6
    launch_overhead_us: float = 5.0
    link_bw_bytes_per_us: float = 2.0e4
    link_latency_us: float = 2.0
    bytes_per_element: int = 2
    topology: Topology = field(default_factory=Topology)
    # chunk GEMM rate = max(split_floor, chunk_fraction ** split_exponent)
    split_exponent: float = 0.15
    split_floor: float = 0.5
    mem_bw_bytes_per_us: float = 1.0e6
    inter_node_bw_bytes_per_us: float | None = None
    inter_numa_bw_bytes_per_us: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "topology", self.topology if isinstance(self.topology, Topology)
                           else Topology(**self.topology))
        if self.sm_count <= 0 or self.bytes_per_element <= 0:
            raise ConfigError("sm_count and bytes_per_element must be positive")
        for name in ("flops_per_us", "link_bw_bytes_per_us", "mem_bw_bytes_per_us"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"MachineModel.{name} must be positive")
        for name in ("launch_overhead_us", "link_latency_us"):
            if getattr(self, name) < 0:
                raise ConfigError(f"MachineModel.{name} must be non-negative")
        for name in ("inter_node_bw_bytes_per_us", "inter_numa_bw_bytes_per_us"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"MachineModel.{name} must be positive")
        if not 0 < self.split_floor <= 1 or self.split_exponent < 0:
            raise ConfigError("split_floor must be in (0, 1] and split_exponent non-negative")

    def gemm_split_efficiency(self, chunk_fraction: float) -> float:
        if not 0 < chunk_fraction <= 1:
            raise ConfigError(f"chunk fraction must be in (0, 1], got {chunk_fraction}")
        return max(self.split_floor, chunk_fraction ** self.split_exponent)

    def tile_flops(self, tm: int, tn: int, k: int) -> float:
        return 2.0 * tm * tn * k

    def tile_time_us(self, tm: int, tn: int, k: int) -> float:
        return self.tile_flops(tm, tn, k) / self.flops_per_us

    def reduce_time_us(self, elements: int, operands: int = 2) -> float:
        """Elementwise sum of ``operands`` arrays into one: read all, write one."""
        return (operands + 1) * elements * self.bytes_per_element / self.mem_bw_bytes_per_us

    def with_bandwidth(self, bw: float) -> "MachineModel":
        from dataclasses import replace
        return replace(self, link_bw_bytes_per_us=bw)


@dataclass(frozen=True)
class SimEvent:
    kind: EventKind
    rank: int
    start_us: float
    end_us: float
    payload: dict = field(default_factory=dict)


@dataclass
class Timeline:
    events: list[SimEvent] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, kind: EventKind, rank: int, start: float, end: float, **payload) -> None:
        if end < start:
            raise ValueError(f"negative-duration {kind.value} event on rank {rank}: {start} > {end}")
        self.events.append(SimEvent(kind, int(rank), float(start), float(end), payload))

    @property
    def overall_us(self) -> float:
        if not self.events:
            return 0.0
        return max(e.end_us for e in self.events) - min(e.start_us for e in self.events)

    def rank_end(self, rank: int) -> float:
        return max(e.end_us for e in self.events if e.rank == rank)

    def of(self, kind: EventKind, rank: int | None = None) -> list[SimEvent]:
        return [e for e in self.events if e.kind is kind and (rank is None or e.rank == rank)]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"meta": self.meta}) + "\n")
            for e in self.events:
                fh.write(json.dumps({"kind": e.kind.value, "rank": e.rank, "start_us": e.start_us,
                                     "end_us": e.end_us, "payload": e.payload}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Timeline":
        tl = cls()
        with open(path) as fh:
            for line in fh:
                obj = json.loads(line)
                if "meta" in obj:
                    tl.meta = obj["meta"]
                    continue
                tl.events.append(SimEvent(EventKind(obj["kind"]), obj["rank"], obj["start_us"],
                                          obj["end_us"], obj.get("payload", {})))
        return tl

    def chrome_trace(self) -> dict:
        lanes = {EventKind.KERNEL_LAUNCH: 0, EventKind.TILE_COMPUTE: 1, EventKind.WAIT: 2,
                 EventKind.TRANSFER: 3, EventKind.REDUCE: 4}
        out = []
        for rank in sorted({e.rank for e in self.events}):
            out.append({"name": "process_name", "ph": "M", "pid": rank, "args": {"name": f"rank {rank}"}})
            for kind, tid in lanes.items():
                out.append({"name": "thread_name", "ph": "M", "pid": rank, "tid": tid,
                            "args": {"name": kind.value}})
        for e in self.events:
            out.append({"name": e.kind.value, "cat": e.kind.value, "ph": "X", "pid": e.rank,
                        "tid": lanes[e.kind], "ts": e.start_us, "dur": e.end_us - e.start_us,
                        "args": e.payload})
        return {"traceEvents": out, "displayTimeUnit": "ns", "otherData": self.meta}

    def to_chrome_trace(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.chrome_trace(), fh)


# ---------------------------------------------------------------- network


class Network:
    """Port-level link map of a topology."""

    def __init__(self, machine: MachineModel, tp: int):
        self.machine = machine
        self.tp = tp
        self.topology = machine.topology
        self.topology.validate(tp)
        bw = machine.link_bw_bytes_per_us
        self.inter_node_bw = machine.inter_node_bw_bytes_per_us or bw / 4.0
        self.inter_numa_bw = machine.inter_numa_bw_bytes_per_us or bw

    def path(self, src: int, dst: int) -> tuple:
        topo, tp = self.topology, self.tp
        if topo.node_of(src, tp) != topo.node_of(dst, tp):
            if topo.kind is TopologyKind.PCIE_NUMA:
                return (("out", src), ("nic_out", topo.numa_of(src, tp)), ("nic_in", topo.numa_of(dst, tp)),
                        ("in", dst))
            return (("nic_out", src), ("nic_in", dst))
        if topo.kind is TopologyKind.PCIE_NUMA and topo.numa_of(src, tp) != topo.numa_of(dst, tp):
            return (("out", src), ("bridge", topo.node_of(src, tp)), ("in", dst))
        return (("out", src), ("in", dst))

    def capacity(self, link) -> float:
        kind = link[0]
        if kind in ("nic_out", "nic_in"):
            return self.inter_node_bw
        if kind == "bridge":
            return self.inter_numa_bw
        return self.machine.link_bw_bytes_per_us

    def bottleneck(self, src: int, dst: int) -> float:
        return min(self.capacity(l) for l in self.path(src, dst))


@dataclass
class Flow:
    key: object
    src: int
    dst: int
    nbytes: float
    release: float = 0.0
    deps: tuple = ()
    # filled in by simulate_flows
    ready: float = math.nan
    start: float = math.nan
    end: float = math.nan


def simulate_flows(flows: Iterable[Flow], network: Network, latency: float) -> dict:
    """Fluid simulation with equal sharing of every link among its flows.

    A flow becomes ready once its release time has passed and every flow in
    ``deps`` has finished; its data starts moving ``latency`` later. Each
    active flow proceeds at ``min(capacity / active_count)`` over its path.
    """
    flows = list(flows)
    by_key = {f.key: f for f in flows}
    if len(by_key) != len(flows):
        raise ValueError("duplicate flow keys")
    dependents: dict = {f.key: [] for f in flows}
    missing = {}
    for f in flows:
        for d in f.deps:
            if d not in by_key:
                raise ValueError(f"flow {f.key!r} depends on unknown flow {d!r}")
            dependents[d].append(f.key)
        missing[f.key] = len(f.deps)
    paths = {f.key: network.path(f.src, f.dst) if f.src != f.dst else () for f in flows}

    order = {f.key: i for i, f in enumerate(flows)}
    pending: list = []  # (start_time, order, key)

    def make_ready(f: Flow, at: float):
        f.ready = max(f.release, at)
        f.start = f.ready + latency
        heapq.heappush(pending, (f.start, order[f.key], f.key))

    for f in flows:
        if missing[f.key] == 0:
            make_ready(f, 0.0)

    active: dict = {}
    now = 0.0
    done = 0
    while done < len(flows):
        if not active and not pending:
            raise ValueError("flow dependencies contain a cycle")
        if not active:
            now = max(now, pending[0][0])
        while pending and pending[0][0] <= now:
            _, _, key = heapq.heappop(pending)
            active[key] = float(by_key[key].nbytes)
        counts: dict = {}
        for key in active:
            for link in paths[key]:
                counts[link] = counts.get(link, 0) + 1
        rates = {}
        for key in active:
            rate = math.inf
            for link in paths[key]:
                rate = min(rate, network.capacity(link) / counts[link])
            rates[key] = rate
        horizon = pending[0][0] if pending else math.inf
        finish_at = {key: now + (rem / rates[key] if rem > 0 else 0.0) for key, rem in active.items()}
        t_next = min(min(finish_at.values(), default=math.inf), horizon)
        finished = [key for key in active if finish_at[key] <= t_next]
        for key in list(active):
            if key in finished:
                continue
            if rates[key] != math.inf:
                active[key] = max(0.0, active[key] - rates[key] * (t_next - now))
        now = t_next
        for key in sorted(finished, key=order.get):
            del active[key]
            f = by_key[key]
            f.end = now
            done += 1
            for dep_key in dependents[key]:
                missing[dep_key] -= 1
                if missing[dep_key] == 0:
                    d = by_key[dep_key]
                    make_ready(d, max([by_key[x].end for x in d.deps]))
    return by_key


# ---------------------------------------------------------------- helpers


def _schedule(timeline: Timeline, rank: int, release, duration, slots: int, t0: float, payloads=None):
    release = np.asarray(release, dtype=np.float64)
    duration = np.asarray(duration, dtype=np.float64)
    dispatch, start, end = kernels.schedule_tiles(release, duration, slots, t0)
    for i in range(len(release)):
        extra = payloads[i] if payloads is not None else {}
        if start[i] > dispatch[i]:
            timeline.add(EventKind.WAIT, rank, dispatch[i], start[i], **extra)
        timeline.add(EventKind.TILE_COMPUTE, rank, start[i], end[i], **extra)
    return dispatch, start, end


def gemm_nonsplit_time(problem: ProblemSpec, tile: TileShape, machine: MachineModel) -> float:
    """Launch plus the makespan of the unsplit per-rank tile stream."""
    rows, cols = grid_dims(problem, tile)
    count = rows * cols
    tt = machine.tile_time_us(tile.tm, tile.tn, problem.k)
    L = machine.launch_overhead_us
    # same arithmetic as a fused kernel whose tiles never wait
    _, _, end = kernels.schedule_tiles(np.full(count, L), np.full(count, tt), machine.sm_count, L)
    return float(end.max())


def _meta(strategy, problem, tile, machine, **extra):
    meta = {"strategy": strategy.value, "pattern": problem.pattern.value, "m": problem.m, "n": problem.n,
            "k": problem.k, "tp": problem.tp, "tm": tile.tm, "tn": tile.tn,
            "topology": machine.topology.kind.value}
    meta.update(extra)
    return meta


def _ring_collective(timeline: Timeline, net: Network, machine: MachineModel, ready: list[float],
                     nbytes: float, reduce_us: float, label: str) -> list[float]:
    """Ring of ``tp-1`` neighbour exchanges; optional reduction after each receive.

    Returns, per rank, the time its last step completes.
    """
    tp = net.tp
    send_ready = list(ready)
    finish = list(ready)
    for step in range(tp - 1):
        flows = [Flow((step, r), r, (r + 1) % tp, nbytes, release=send_ready[r]) for r in range(tp)]
        simulate_flows(flows, net, machine.link_latency_us)
        nxt = list(send_ready)
        for f in flows:
            timeline.add(EventKind.TRANSFER, f.src, f.ready, f.end, dst=f.dst, bytes=nbytes, step=step,
                         label=label)
            dst = f.dst
            done = max(f.end, send_ready[dst])
            if reduce_us > 0:
                timeline.add(EventKind.REDUCE, dst, done, done + reduce_us, step=step, label=label)
                done += reduce_us
            nxt[dst] = done
            finish[dst] = done
        send_ready = nxt
    return finish


# ---------------------------------------------------------------- strategies


def _coarse(problem, tile, machine, net, tl):
    tp, L = problem.tp, machine.launch_overhead_us
    rows, cols = grid_dims(problem, tile)
    tt = machine.tile_time_us(tile.tm, tile.tn, problem.k)
    count = rows * cols
    bpe = machine.bytes_per_element
    if problem.pattern is Pattern.ALLGATHER_GEMM:
        if tp > 1:
            for r in range(tp):
                tl.add(EventKind.KERNEL_LAUNCH, r, 0.0, L, label="allgather")
            # ring allgather: the block received at step j is forwarded at step j+1
            flows = []
            for j in range(tp - 1):
                for r in range(tp):
                    deps = [(j - 1, (r - 1) % tp), (j - 1, r)] if j else []
                    flows.append(Flow((j, r), (r - 1) % tp, r, problem.shard_rows * problem.k * bpe,
                                      release=L, deps=tuple(deps)))
            simulate_flows(flows, net, machine.link_latency_us)
            arrived = [L] * tp
            for f in flows:
                tl.add(EventKind.TRANSFER, f.src, f.ready, f.end, dst=f.dst, bytes=f.nbytes, step=f.key[0],
                       label="allgather")
                arrived[f.dst] = max(arrived[f.dst], f.end)
        else:
            arrived = [0.0]
        issued = 2 * L if tp > 1 else L
        for r in range(tp):
            tl.add(EventKind.KERNEL_LAUNCH, r, issued - L, issued, label="gemm")
            t0 = max(issued, arrived[r])
            _schedule(tl, r, np.full(count, t0), np.full(count, tt), machine.sm_count, t0)
        return
    gemm_end = []
    for r in range(tp):
        tl.add(EventKind.KERNEL_LAUNCH, r, 0.0, L, label="gemm")
        _, _, end = _schedule(tl, r, np.full(count, L), np.full(count, tt), machine.sm_count, L)
        gemm_end.append(float(end.max()))
    if tp == 1:
        return
    for r in range(tp):
        tl.add(EventKind.KERNEL_LAUNCH, r, L, 2 * L, label="reducescatter")
    block = problem.shard_rows * problem.n
    _ring_collective(tl, net, machine, [max(g, 2 * L) for g in gemm_end], block * bpe,
                     machine.reduce_time_us(block), "reducescatter")


def _medium(problem, tile, machine, net, tl, partitions):
    tp, L = problem.tp, machine.launch_overhead_us
    partitions = tp if partitions is None else partitions
    plan = medium_schedule(problem, partitions)
    chunk_rows = problem.m // partitions
    ctm = chunk_tile_rows(tile, chunk_rows)
    cols = problem.n // tile.tn
    chunk_tiles = (chunk_rows // ctm) * cols
    eff = machine.gemm_split_efficiency(1.0 / partitions)
    ctt = machine.tile_time_us(ctm, tile.tn, problem.k) / eff
    bpe = machine.bytes_per_element
    if problem.pattern is Pattern.ALLGATHER_GEMM:
        flows = []
        for r in range(tp):
            prev = None
            for step in plan[r]:
                if step.recv_from is None:
                    continue
                key = (r, step.step)
                flows.append(Flow(key, step.recv_from, r, chunk_rows * problem.k * bpe,
                                  deps=(prev,) if prev else ()))
                prev = key
        simulate_flows(flows, net, machine.link_latency_us)
        arrival = {f.key: f.end for f in flows}
        for f in flows:
            tl.add(EventKind.TRANSFER, f.dst, f.ready, f.end, src=f.src, bytes=f.nbytes, step=f.key[1])
        for r in range(tp):
            release, payloads = [], []
            for i, step in enumerate(plan[r]):
                launched = (i + 1) * L
                tl.add(EventKind.KERNEL_LAUNCH, r, i * L, launched, step=step.step)
                ready = max(launched, arrival.get((r, step.step), 0.0))
                release += [ready] * chunk_tiles
                payloads += [{"step": step.step}] * chunk_tiles
            _schedule(tl, r, release, np.full(len(release), ctt), machine.sm_count, 0.0, payloads)
        return

    add_us = machine.reduce_time_us(chunk_rows * problem.n) if tp > 1 else 0.0
    msg = chunk_rows * problem.n * bpe
    per_block = partitions // tp
    stream_free = [0.0] * tp  # compute stream of each rank
    link_free = [0.0] * tp  # send stream of each rank
    inbox: dict = {}  # (dst, step it is consumed at) -> arrival time
    if tp > 1:
        # initialized running sums are exchanged up front
        init = [Flow(("init", s, r), (r - 1) % tp, r, msg) for s in range(per_block) for r in range(tp)]
        simulate_flows(init, net, machine.link_latency_us)
        for f in init:
            tl.add(EventKind.TRANSFER, f.src, f.ready, f.end, dst=f.dst, bytes=msg, step=-1)
            inbox[(f.dst, f.key[1])] = f.end
            link_free[f.src] = max(link_free[f.src], f.end)
    for s in range(partitions):
        sends = []
        for r in range(tp):
            step = plan[r][s]
            tl.add(EventKind.KERNEL_LAUNCH, r, s * L, (s + 1) * L, step=s)
            t = max(stream_free[r], (s + 1) * L)
            _, _, end = _schedule(tl, r, np.full(chunk_tiles, t), np.full(chunk_tiles, ctt),
                                  machine.sm_count, t, [{"step": s}] * chunk_tiles)
            gemm_end = float(end.max())
            done = gemm_end
            if tp > 1:
                add_start = max(gemm_end, inbox.pop((r, s)))
                tl.add(EventKind.REDUCE, r, add_start, add_start + add_us, step=s)
                done = add_start + add_us
            stream_free[r] = done
            if step.send_to is not None:
                sends.append(Flow((s, r), r, step.send_to, msg, release=max(done, link_free[r])))
        if sends:
            simulate_flows(sends, net, machine.link_latency_us)
            for f in sends:
                tl.add(EventKind.TRANSFER, f.src, f.ready, f.end, dst=f.dst, bytes=msg, step=s)
                inbox[(f.dst, s + per_block)] = f.end
                link_free[f.src] = f.end


def _fine(problem, tile, machine, net, tl, swizzle, comm_rows, transfer, write_mode):
    tp, L = problem.tp, machine.launch_overhead_us
    rows, cols = grid_dims(problem, tile)
    tt = machine.tile_time_us(tile.tm, tile.tn, problem.k)
    bpe = machine.bytes_per_element
    topo = machine.topology
    for r in range(tp):
        tl.add(EventKind.KERNEL_LAUNCH, r, 0.0, L)

    if problem.pattern is Pattern.ALLGATHER_GEMM:
        cr = problem.shard_rows if comm_rows is None else comm_rows
        if problem.shard_rows % cr:
            raise ConfigError(f"rows_per_comm_tile={cr} must divide m/tp={problem.shard_rows}")
        flows = []
        delivered = {}  # (board rank, owner, row_start) -> flow key
        orders = {r: comm_order(topo, r, tp, cr, problem.shard_rows, transfer) for r in range(tp)}
        for r in range(tp):
            for i, d in enumerate(orders[r]):
                delivered[(d.destination(transfer), d.owner, d.row_start)] = (r, i)
        for r in range(tp):
            for i, d in enumerate(orders[r]):
                deps = [(r, i - 1)] if i else []
                if d.relayed(transfer):
                    board = d.peer if transfer is TransferMode.PULL else r
                    deps.append(delivered[(board, d.owner, d.row_start)])
                flows.append(Flow((r, i), d.source(transfer), d.destination(transfer), d.rows * problem.k * bpe,
                                  deps=tuple(deps)))
        simulate_flows(flows, net, machine.link_latency_us)
        arrival = np.zeros((tp, problem.m // cr))
        for f in flows:
            d = orders[f.key[0]][f.key[1]]
            flag = (d.owner * problem.shard_rows + d.row_start) // cr
            arrival[f.dst, flag] = f.end
            tl.add(EventKind.TRANSFER, f.key[0], f.ready, f.end, src=f.src, dst=f.dst, bytes=f.nbytes,
                   owner=d.owner, flag=flag)
        for r in range(tp):
            order = tile_order(ag_policy(r, tp, swizzle, topo, transfer), (rows, cols))
            release = [max(L, max(arrival[r, f] for f in tile_flags(c, tile, cr))) for c in order]
            payloads = [{"row": c.row, "col": c.col} for c in order]
            _schedule(tl, r, release, np.full(len(order), tt), machine.sm_count, L, payloads)
        return

    block_tiles = problem.shard_rows // tile.tm
    writes = {d: [] for d in range(tp)}  # dest -> (issue, src, seq, row, col)
    compute_end = [L] * tp
    for r in range(tp):
        order = tile_order(rs_policy(r, tp, swizzle), (rows, cols))
        payloads = [{"row": c.row, "col": c.col, "dest": c.row // block_tiles} for c in order]
        _, _, end = _schedule(tl, r, np.full(len(order), L), np.full(len(order), tt), machine.sm_count, L,
                              payloads)
        compute_end[r] = float(end.max())
        for i, c in enumerate(order):
            dest = c.row // block_tiles
            if dest != r:
                writes[dest].append((float(end[i]), r, i, c.row, c.col))
    tile_bytes = tile.tm * tile.tn * bpe
    ready = list(compute_end)
    for dest in range(tp):
        queue = sorted(writes[dest])
        if not queue:
            continue
        arrival = np.array([q[0] for q in queue])
        service = np.array([tile_bytes / net.bottleneck(q[1], dest) for q in queue])
        start, end = kernels.fifo_serve(arrival, service, machine.link_latency_us)
        for q, s, e in zip(queue, start, end):
            tl.add(EventKind.TRANSFER, q[1], q[0], e, dst=dest, bytes=tile_bytes, row=q[3], col=q[4],
                   queued_us=s - q[0])
        ready[dest] = max(ready[dest], float(end.max()))
    if WriteMode(write_mode) is WriteMode.WRITE_ALLTOALL and tp > 1:
        reduce_us = machine.reduce_time_us(problem.shard_rows * problem.n, operands=tp)
        for dest in range(tp):
            tl.add(EventKind.KERNEL_LAUNCH, dest, L, 2 * L, label="reduce")
            t = max(ready[dest], 2 * L)
            tl.add(EventKind.REDUCE, dest, t, t + reduce_us)


def simulate(
    strategy: Strategy | str,
    problem: ProblemSpec,
    tile: TileShape,
    machine: MachineModel,
    swizzle: bool = True,
    comm: int | None = None,
    transfer: TransferMode = TransferMode.PULL,
    write_mode: WriteMode = WriteMode.WRITE_ALLTOALL,
    partitions: int | None = None,
) -> Timeline:
    """Cost one strategy; ``comm`` is rows per communication tile (AllGather)."""
    strategy = Strategy(strategy)
    transfer = TransferMode(transfer)
    grid_dims(problem, tile)
    net = Network(machine, problem.tp)
    tl = Timeline(meta=_meta(strategy, problem, tile, machine, swizzle=swizzle, comm=comm,
                             transfer=transfer.value, write_mode=WriteMode(write_mode).value,
                             partitions=partitions))
    if strategy is Strategy.COARSE:
        _coarse(problem, tile, machine, net, tl)
    elif strategy is Strategy.MEDIUM:
        _medium(problem, tile, machine, net, tl, partitions)
    else:
        _fine(problem, tile, machine, net, tl, swizzle, comm, transfer, write_mode)
    return tl


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    overall_us: float
    gemm_nonsplit_us: float
    ect_us: float
    overlap_efficiency: float
    baseline_ect_us: float


def overlap_efficiency(ect: float, ect_baseline: float) -> float:
    if ect_baseline == 0.0:
        # nothing to hide: a zero ECT counts as no change, anything else as unboundedly worse
        return 0.0 if ect == 0.0 else -math.inf
    return 1.0 - ect / ect_baseline


def metrics(timeline: Timeline, baseline_timeline: Timeline, problem: ProblemSpec, tile: TileShape,
            machine: MachineModel) -> Metrics:
    gemm = gemm_nonsplit_time(problem, tile, machine)
    ect = timeline.overall_us - gemm
    base_ect = baseline_timeline.overall_us - gemm
    return Metrics(timeline.overall_us, gemm, ect, overlap_efficiency(ect, base_ect), base_ect)


METRICS_COLUMNS = ["strategy", "pattern", "m", "n", "k", "tp", "overall_us", "gemm_us", "ect_us", "efficiency"]


def metrics_row(strategy: str, problem: ProblemSpec, m: Metrics) -> dict:
    return {"strategy": strategy, "pattern": problem.pattern.value, "m": problem.m, "n": problem.n,
            "k": problem.k, "tp": problem.tp, "overall_us": m.overall_us, "gemm_us": m.gemm_nonsplit_us,
            "ect_us": m.ect_us, "efficiency": m.overlap_efficiency}


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRICS_COLUMNS})


def fit_machine_from_log(events: list[dict], tile: TileShape, k: int, base: MachineModel) -> MachineModel:
    """Calibrate ``flops_per_us`` from engine compute_start/compute_end wall clocks."""
    from dataclasses import replace
    starts = {}
    durations = []
    for e in events:
        key = (e["rank"], e["tile_row"], e["tile_col"])
        if e["event"] == "compute_start":
            starts[key] = e["wall_ns"]
        elif e["event"] == "compute_end" and key in starts:
            durations.append((e["wall_ns"] - starts.pop(key)) / 1e3)
    if not durations:
        raise ConfigError("trace has no compute_start/compute_end pairs to calibrate from")
    per_tile_us = float(np.median(durations))
    return replace(base, flops_per_us=base.tile_flops(tile.tm, tile.tn, k) / max(per_tile_us, 1e-9))


def machine_to_dict(machine: MachineModel) -> dict:
    d = asdict(machine)
    d["topology"] = {"kind": machine.topology.kind.value, "ranks_per_numa": machine.topology.ranks_per_numa,
                     "ranks_per_node": machine.topology.ranks_per_node}
    return d


_INT_FIELDS = ("sm_count", "bytes_per_element")
_FLOAT_FIELDS = ("flops_per_us", "launch_overhead_us", "link_bw_bytes_per_us", "link_latency_us",
                 "split_exponent", "split_floor", "mem_bw_bytes_per_us", "inter_node_bw_bytes_per_us",
                 "inter_numa_bw_bytes_per_us")


def machine_from_dict(d: dict) -> MachineModel:
    """Inverse of :func:`machine_to_dict`; numeric strings such as ``"2e6"`` are accepted."""
    d = dict(d)
    unknown = set(d) - set(_INT_FIELDS) - set(_FLOAT_FIELDS) - {"topology"}
    if unknown:
        raise ConfigError(f"unknown machine keys: {sorted(unknown)}")
    for name in _FLOAT_FIELDS:
        if d.get(name) is not None:
            try:
                d[name] = float(d[name])
            except (TypeError, ValueError):
                raise ConfigError(f"machine.{name}: expected a number, got {d[name]!r}") from None
    for name in _INT_FIELDS:
        if name in d and (isinstance(d[name], bool) or not isinstance(d[name], int)):
            raise ConfigError(f"machine.{name}: expected an integer, got {d[name]!r}")
    if "topology" in d and isinstance(d["topology"], dict):
        d["topology"] = Topology(**d["topology"])
    return MachineModel(**d)


def default_machine() -> MachineModel:
    """The synthetic desk machine shipped in ``configs/default_machine.yaml``."""
    import yaml
    from importlib import resources

    text = resources.files("tpoverlap").joinpath("configs/default_machine.yaml").read_text()
    return machine_from_dict(yaml.safe_load(text))
