import json
import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpoverlap.core import Pattern, ProblemSpec, TileShape, TransferMode, WriteMode
from tpoverlap.errors import ConfigError
from tpoverlap.sim import (
    EventKind,
    Flow,
    MachineModel,
    Network,
    Timeline,
    default_machine,
    fit_machine_from_log,
    gemm_nonsplit_time,
    machine_from_dict,
    machine_to_dict,
    metrics,
    overlap_efficiency,
    simulate,
    simulate_flows,
)
from tpoverlap.engine import run_fused_allgather_gemm
from tpoverlap.core import make_workspace
from tpoverlap.swizzle import Topology, TopologyKind

M = default_machine()
STRATS = ("coarse", "medium", "fine")
TOPOLOGIES = [Topology(), Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=2),
              Topology(TopologyKind.MULTI_NODE, ranks_per_node=2)]


def test_gemm_nonsplit_single_tile():
    m = MachineModel(sm_count=1, flops_per_us=1.0, launch_overhead_us=0.0)
    # one 2x2 tile with k=4 is 2*2*2*4 = 32 flop; tm=tn=2, k=2 is 16 flop
    p = ProblemSpec(2, 2, 2, 1, Pattern.ALLGATHER_GEMM)
    assert m.tile_flops(2, 2, 2) == 16
    assert gemm_nonsplit_time(p, TileShape(2, 2), m) == 16.0


@pytest.mark.parametrize("tiles,waves", [(8, 2), (7, 2), (4, 1), (9, 3)])
def test_gemm_nonsplit_waves(tiles, waves):
    m = MachineModel(sm_count=4, flops_per_us=1.0, launch_overhead_us=0.0)
    p = ProblemSpec(tiles, 1, 1, 1, Pattern.ALLGATHER_GEMM)
    assert gemm_nonsplit_time(p, TileShape(1, 1), m) == waves * 2.0


def test_split_efficiency_shape():
    assert M.gemm_split_efficiency(1.0) == 1.0
    vals = [M.gemm_split_efficiency(1 / p) for p in (1, 2, 4, 8, 16, 1024)]
    assert vals == sorted(vals, reverse=True) and min(vals) == M.split_floor
    with pytest.raises(ConfigError):
        M.gemm_split_efficiency(0.0)


@pytest.mark.parametrize("field,value", [("sm_count", 0), ("flops_per_us", 0.0), ("link_bw_bytes_per_us", -1.0),
                                         ("launch_overhead_us", -1.0), ("split_floor", 0.0)])
def test_machine_validation(field, value):
    with pytest.raises(ConfigError):
        replace(M, **{field: value})


def test_machine_dict_round_trip():
    m = replace(M, topology=Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=2), inter_numa_bw_bytes_per_us=7.0)
    assert machine_from_dict(machine_to_dict(m)) == m
    assert machine_from_dict({"flops_per_us": "2e6"}).flops_per_us == 2e6
    with pytest.raises(ConfigError):
        machine_from_dict({"bogus": 1})


@pytest.mark.parametrize("pattern", list(Pattern))
def test_tp1_all_strategies_equal_plain_gemm(pattern):
    p = ProblemSpec(64, 32, 32, 1, pattern)
    t = TileShape(8, 8)
    g = gemm_nonsplit_time(p, t, M)
    for s in STRATS:
        assert simulate(s, p, t, M).overall_us == pytest.approx(g, rel=1e-12)


@pytest.mark.parametrize("pattern", list(Pattern))
def test_infinite_bandwidth_exposes_at_most_a_launch(pattern):
    inf = replace(M, link_bw_bytes_per_us=math.inf, link_latency_us=0.0)
    p = ProblemSpec(256, 64, 64, 4, pattern)
    t = TileShape(16, 16)
    g = gemm_nonsplit_time(p, t, inf)
    for wm in WriteMode:
        tl = simulate("fine", p, t, inf, write_mode=wm)
        reduce_us = inf.reduce_time_us(p.shard_rows * p.n, operands=p.tp)
        assert g <= tl.overall_us <= g + inf.launch_overhead_us + reduce_us


def _cases():
    for topo in TOPOLOGIES:
        for pattern in Pattern:
            for s in STRATS:
                yield topo, pattern, s, {}
            yield topo, pattern, "fine", {"swizzle": False}
            yield topo, pattern, "medium", {"partitions": 8}
        yield topo, Pattern.ALLGATHER_GEMM, "fine", {"transfer": TransferMode.PUSH, "comm": 8}
        yield topo, Pattern.GEMM_REDUCESCATTER, "fine", {"write_mode": WriteMode.FUSED_REDUCE}


@pytest.mark.parametrize("topo,pattern,strategy,kw", list(_cases()))
def test_monotone_in_bandwidth(topo, pattern, strategy, kw):
    p = ProblemSpec(256, 128, 64, 4, pattern)
    t = TileShape(16, 32)
    prev = math.inf
    for bw in [1e3, 3e3, 1e4, 3e4, 1e5, 1e6, math.inf]:
        o = simulate(strategy, p, t, replace(M, link_bw_bytes_per_us=bw, topology=topo), **kw).overall_us
        assert o <= prev + 1e-9
        prev = o


@pytest.mark.parametrize("topo,pattern,strategy,kw", list(_cases()))
def test_lower_bounds(topo, pattern, strategy, kw):
    p = ProblemSpec(256, 128, 64, 4, pattern)
    t = TileShape(16, 32)
    m = replace(M, topology=topo, link_bw_bytes_per_us=2e3)
    tl = simulate(strategy, p, t, m, **kw)
    g = gemm_nonsplit_time(p, t, m)
    moved = sum(e.payload["bytes"] for e in tl.of(EventKind.TRANSFER))
    assert tl.overall_us >= max(g, moved / (p.tp * m.link_bw_bytes_per_us))
    for rank in range(p.tp):
        assert tl.overall_us >= tl.rank_end(rank) - min(e.start_us for e in tl.events)
    assert all(e.end_us >= e.start_us for e in tl.events)
    if strategy == "fine":
        assert tl.overall_us >= g


def test_medium_rs_chunks_serialized():
    p = ProblemSpec(512, 128, 64, 4, Pattern.GEMM_REDUCESCATTER)
    tl = simulate("medium", p, TileShape(16, 32), M, partitions=8)
    for rank in range(4):
        compute = tl.of(EventKind.TILE_COMPUTE, rank)
        adds = {e.payload["step"]: e for e in tl.of(EventKind.REDUCE, rank)}
        for step in range(1, 8):
            first = min(e.start_us for e in compute if e.payload["step"] == step)
            assert first >= adds[step - 1].end_us


@pytest.mark.parametrize("strategy", STRATS)
def test_deterministic(strategy):
    p = ProblemSpec(256, 64, 64, 8, Pattern.ALLGATHER_GEMM)
    a = simulate(strategy, p, TileShape(16, 16), M)
    b = simulate(strategy, p, TileShape(16, 16), M)
    assert a.events == b.events


def test_fine_ag_tiles_wait_for_their_rows():
    p = ProblemSpec(64, 32, 32, 4, Pattern.ALLGATHER_GEMM)
    m = replace(M, link_bw_bytes_per_us=10.0)
    tl = simulate("fine", p, TileShape(4, 8), m, swizzle=False)
    assert tl.of(EventKind.WAIT)
    arrivals = {(e.payload["dst"], e.payload["flag"]): e.end_us for e in tl.of(EventKind.TRANSFER)}
    for e in tl.of(EventKind.TILE_COMPUTE):
        block = e.payload["row"] * 4 // p.shard_rows
        if block != e.rank:
            assert e.start_us >= arrivals[(e.rank, block)]


def test_rank_shifted_beats_naive_rs():
    p = ProblemSpec(512, 256, 64, 8, Pattern.GEMM_REDUCESCATTER)
    m = replace(M, link_bw_bytes_per_us=5e3)
    t = TileShape(16, 32)
    shifted = simulate("fine", p, t, m, swizzle=True).overall_us
    naive = simulate("fine", p, t, m, swizzle=False).overall_us
    assert shifted < naive


# ---------------------------------------------------------------- flows


def _net(bw=10.0, tp=4, **kw):
    return Network(MachineModel(link_bw_bytes_per_us=bw, **kw), tp)


def test_single_flow_time():
    f = simulate_flows([Flow("a", 0, 1, 100.0)], _net(), latency=2.0)["a"]
    assert (f.ready, f.start, f.end) == (0.0, 2.0, 12.0)


def test_two_flows_share_a_port_fairly():
    # both leave rank 0: each gets 5 B/us until the short one ends at t=10,
    # then the long one runs alone at 10 B/us for its last 100 bytes
    out = simulate_flows([Flow("a", 0, 1, 50.0), Flow("b", 0, 2, 150.0)], _net(), latency=0.0)
    assert out["a"].end == 10.0 and out["b"].end == 20.0


def test_flow_dependencies_and_cycles():
    out = simulate_flows([Flow("a", 0, 1, 10.0), Flow("b", 1, 2, 10.0, release=0.5, deps=("a",))], _net(), 1.0)
    assert out["b"].ready == 2.0 and out["b"].end == 4.0
    with pytest.raises(ValueError, match="cycle"):
        simulate_flows([Flow("a", 0, 1, 1.0, deps=("b",)), Flow("b", 1, 0, 1.0, deps=("a",))], _net(), 0.0)
    with pytest.raises(ValueError, match="unknown"):
        simulate_flows([Flow("a", 0, 1, 1.0, deps=("z",))], _net(), 0.0)


def test_network_paths():
    net = _net(topology=Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=2, ranks_per_node=4),
               inter_node_bw_bytes_per_us=1.0, tp=8)
    assert net.path(0, 1) == (("out", 0), ("in", 1))
    assert ("bridge", 0) in net.path(0, 2)
    assert net.bottleneck(0, 5) == 1.0


# ---------------------------------------------------------------- metrics


def _timeline(overall):
    tl = Timeline()
    tl.add(EventKind.TILE_COMPUTE, 0, 0.0, overall)
    return tl


def test_metrics_arithmetic():
    p = ProblemSpec(1, 1, 1, 1, Pattern.ALLGATHER_GEMM)
    m = MachineModel(sm_count=1, flops_per_us=2.0 / 7.0, launch_overhead_us=0.0)
    t = TileShape(1, 1)
    assert gemm_nonsplit_time(p, t, m) == pytest.approx(7.0)
    res = metrics(_timeline(10.0), _timeline(13.0), p, t, m)
    assert res.ect_us == res.overall_us - res.gemm_nonsplit_us
    assert res.overlap_efficiency == 1 - res.ect_us / res.baseline_ect_us


def test_efficiency_limits():
    assert overlap_efficiency(0.0, 5.0) == 1.0
    assert overlap_efficiency(5.0, 5.0) == 0.0
    assert overlap_efficiency(7.5, 5.0) == -0.5
    assert overlap_efficiency(0.0, 0.0) == 0.0
    assert overlap_efficiency(1.0, 0.0) == -math.inf


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1e-3, 1e6))
def test_metric_identities(gemm_extra, base_extra, flops):
    p = ProblemSpec(4, 4, 4, 1, Pattern.GEMM_REDUCESCATTER)
    m = MachineModel(sm_count=2, flops_per_us=flops, launch_overhead_us=1.0)
    t = TileShape(2, 2)
    g = gemm_nonsplit_time(p, t, m)
    res = metrics(_timeline(g + gemm_extra), _timeline(g + base_extra), p, t, m)
    assert res.ect_us == res.overall_us - res.gemm_nonsplit_us
    assert res.overlap_efficiency == overlap_efficiency(res.ect_us, res.baseline_ect_us)


# ---------------------------------------------------------------- export


def test_jsonl_and_chrome_trace(tmp_path):
    p = ProblemSpec(64, 32, 32, 4, Pattern.GEMM_REDUCESCATTER)
    tl = simulate("fine", p, TileShape(8, 8), M)
    tl.to_jsonl(tmp_path / "t.jsonl")
    back = Timeline.from_jsonl(tmp_path / "t.jsonl")
    assert back.events == tl.events and back.meta == tl.meta
    tl.to_chrome_trace(tmp_path / "t.json")
    trace = json.loads((tmp_path / "t.json").read_text())
    spans = [e for e in trace["traceEvents"] if e["ph"] == "X"]
    assert len(spans) == len(tl.events)
    assert {"name", "ts", "dur", "pid", "tid"} <= set(spans[0])


def test_calibration_from_engine_log():
    p = ProblemSpec(16, 8, 8, 2, Pattern.ALLGATHER_GEMM)
    r = run_fused_allgather_gemm(p, make_workspace(p), TileShape(2, 2))
    fitted = fit_machine_from_log(r.log.events, TileShape(2, 2), p.k, M)
    assert fitted.flops_per_us > 0 and fitted.sm_count == M.sm_count
    with pytest.raises(ConfigError):
        fit_machine_from_log([], TileShape(2, 2), p.k, M)


def test_bad_configuration_raises():
    p = ProblemSpec(64, 32, 32, 4, Pattern.ALLGATHER_GEMM)
    with pytest.raises(ConfigError):
        simulate("fine", p, TileShape(3, 8), M)
    with pytest.raises(ConfigError):
        simulate("fine", p, TileShape(8, 8), M, comm=3)
    with pytest.raises(ConfigError):
        simulate("medium", p, TileShape(8, 8), M, partitions=3)
    with pytest.raises(ValueError):
        simulate("nope", p, TileShape(8, 8), M)
