import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpoverlap.core import TileCoord, TransferMode
from tpoverlap.errors import BoundsError, ConfigError
from tpoverlap.swizzle import (
    SwizzleKind,
    SwizzlePolicy,
    Topology,
    TopologyKind,
    arrival_block_order,
    comm_order,
    map_tile,
    peer_pairs,
    tile_order,
)

RING = Topology()
KINDS = list(SwizzleKind)


def test_naive_is_row_major():
    policy = SwizzlePolicy(SwizzleKind.NAIVE, 3, 4)
    assert tile_order(policy, (2, 2)) == [TileCoord(0, 0), TileCoord(0, 1), TileCoord(1, 0), TileCoord(1, 1)]


def test_rank_shifted_block_order():
    assert SwizzlePolicy(SwizzleKind.RANK_SHIFTED, 1, 4).blocks() == (2, 3, 0, 1)


def test_rank_shifted_visits_local_block_last():
    for tp in (2, 4, 8):
        for r in range(tp):
            assert SwizzlePolicy(SwizzleKind.RANK_SHIFTED, r, tp).blocks()[-1] == r


def test_arrival_aligned_ring_rank5_of_8():
    policy = SwizzlePolicy.arrival_aligned(5, 8, RING)
    assert policy.blocks() == (5, 6, 7, 0, 1, 2, 3, 4)


def test_ring_peer_order_rank5_of_8():
    assert [d.peer for d in comm_order(RING, 5, 8, 4)] == [6, 7, 0, 1, 2, 3, 4]


def test_ring_tp2_single_peer():
    assert [d.peer for d in comm_order(RING, 0, 2, 4)] == [1]


def test_pcie_numa_inter_numa_first():
    topo = Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=4)
    peers = [d.peer for d in comm_order(topo, 0, 8, 4)]
    assert sorted(peers[:4]) == [4, 5, 6, 7]
    assert sorted(peers[4:]) == [1, 2, 3]


def test_pcie_numa_inter_node_joins_intra_numa():
    topo = Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=2, ranks_per_node=4)
    peers = [d.peer for d in comm_order(topo, 0, 8, 1)]
    assert peers[:2] == [2, 3]
    assert set(peers[2:]) == {1, 4, 5, 6, 7}


def test_multi_node_relays_after_counterpart():
    topo = Topology(TopologyKind.MULTI_NODE, ranks_per_node=4)
    pulls = peer_pairs(topo, 1, 8, TransferMode.PULL)
    direct = [(o, p) for o, p in pulls if o == p]
    relayed = [(o, p) for o, p in pulls if o != p]
    # inter-node counterpart first, interleaved with the local peers
    assert direct[0] == (5, 5) and set(p for _, p in direct) == {5, 2, 3, 0}
    # remote owners reach us through their counterpart on our node
    assert relayed == [(6, 2), (7, 3), (4, 0)]
    assert pulls.index((5, 5)) == 0


@pytest.mark.parametrize("mode", list(TransferMode))
@pytest.mark.parametrize("topo,tp", [
    (RING, 8), (Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=2), 8),
    (Topology(TopologyKind.MULTI_NODE, ranks_per_node=2), 8), (Topology(TopologyKind.MULTI_NODE, ranks_per_node=4), 8),
])
def test_every_block_delivered_exactly_once(topo, tp, mode):
    received = {r: [] for r in range(tp)}
    for r in range(tp):
        for d in comm_order(topo, r, tp, 2, shard_rows=4, mode=mode):
            received[d.destination(mode)].append((d.owner, d.row_start))
    for r in range(tp):
        expect = sorted((o, s) for o in range(tp) if o != r for s in (0, 2))
        assert sorted(received[r]) == expect


def test_comm_order_errors():
    with pytest.raises(ConfigError):
        comm_order(RING, 8, 8, 4)
    with pytest.raises(ConfigError):
        comm_order(RING, 0, 8, 3, shard_rows=4)
    with pytest.raises(ConfigError):
        comm_order(Topology(TopologyKind.MULTI_NODE, ranks_per_node=3), 0, 8, 1)
    with pytest.raises(ConfigError):
        Topology(TopologyKind.PCIE_NUMA)


def test_map_tile_out_of_range():
    policy = SwizzlePolicy(SwizzleKind.RANK_SHIFTED, 0, 2)
    with pytest.raises(BoundsError):
        map_tile(policy, 8, (2, 4))
    with pytest.raises(BoundsError):
        map_tile(policy, -1, (2, 4))


def test_policy_validation():
    with pytest.raises(ConfigError):
        SwizzlePolicy(SwizzleKind.NAIVE, 4, 4)
    with pytest.raises(ConfigError):
        SwizzlePolicy(SwizzleKind.ARRIVAL_ALIGNED, 0, 4, block_order=(0, 1, 1, 2))


@given(st.sampled_from([1, 2, 4, 8]), st.data())
def test_mapping_is_bijection(tp, data):
    kind = data.draw(st.sampled_from(KINDS))
    rank = data.draw(st.integers(0, tp - 1))
    rows = tp * data.draw(st.integers(1, 64 // tp))
    cols = data.draw(st.integers(1, 64))
    intra = data.draw(st.sampled_from(["col_major", "row_major"]))
    policy = SwizzlePolicy(kind, rank, tp, intra_block=intra)
    order = tile_order(policy, (rows, cols))
    assert sorted(order) == [TileCoord(r, c) for r in range(rows) for c in range(cols)]


def test_bijection_exhaustive_64x64():
    for tp, kind in itertools.product((1, 2, 4, 8), KINDS):
        for rank in range(tp):
            order = tile_order(SwizzlePolicy(kind, rank, tp), (64, 64))
            assert len(set(order)) == 64 * 64


@pytest.mark.parametrize("tp", [2, 4, 8])
@pytest.mark.parametrize("block_rows,cols", [(1, 1), (2, 3), (4, 2)])
def test_rank_shifted_contention_free(tp, block_rows, cols):
    rows = tp * block_rows
    orders = [tile_order(SwizzlePolicy(SwizzleKind.RANK_SHIFTED, r, tp), (rows, cols)) for r in range(tp)]
    for step in range(rows * cols):
        dests = [orders[r][step].row // block_rows for r in range(tp)]
        assert len(set(dests)) == tp


def test_naive_is_not_contention_free():
    orders = [tile_order(SwizzlePolicy(SwizzleKind.NAIVE, r, 4), (4, 1)) for r in range(4)]
    assert len({o[0].row for o in orders}) == 1


@pytest.mark.parametrize("mode", list(TransferMode))
@pytest.mark.parametrize("topo", [RING, Topology(TopologyKind.PCIE_NUMA, ranks_per_numa=2),
                                  Topology(TopologyKind.MULTI_NODE, ranks_per_node=2)])
def test_arrival_order_matches_visit_order(topo, mode):
    tp = 8
    for rank in range(tp):
        policy = SwizzlePolicy.arrival_aligned(rank, tp, topo, mode)
        visited = []
        for c in tile_order(policy, (tp * 2, 3)):
            block = c.row // 2
            if not visited or visited[-1] != block:
                visited.append(block)
        assert tuple(visited) == arrival_block_order(topo, rank, tp, mode)
        if mode is TransferMode.PULL:
            owners = []
            for d in comm_order(topo, rank, tp, 1, mode=mode):
                if d.owner not in owners:
                    owners.append(d.owner)
            assert tuple(visited) == (rank, *owners)


def test_push_ring_arrival_order():
    assert arrival_block_order(RING, 5, 8, TransferMode.PUSH) == (5, 4, 3, 2, 1, 0, 7, 6)
