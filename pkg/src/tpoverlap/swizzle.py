"""Tile-coordinate mappings and topology-aware transfer orders."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .core import TileCoord, TransferMode
from .errors import BoundsError, ConfigError


class SwizzleKind(str, enum.Enum):
    NAIVE = "naive"
    RANK_SHIFTED = "rank_shifted"
    ARRIVAL_ALIGNED = "arrival_aligned"


class TopologyKind(str, enum.Enum):
    NVLINK_RING = "nvlink_ring"
    PCIE_NUMA = "pcie_numa"
    MULTI_NODE = "multi_node"


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind = TopologyKind.NVLINK_RING
    ranks_per_numa: int | None = None
    ranks_per_node: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TopologyKind(self.kind))
        if self.kind is TopologyKind.PCIE_NUMA and not self.ranks_per_numa:
            raise ConfigError("pcie_numa topology needs ranks_per_numa")
        if self.kind is TopologyKind.MULTI_NODE and not self.ranks_per_node:
            raise ConfigError("multi_node topology needs ranks_per_node")
        for name in ("ranks_per_numa", "ranks_per_node"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"Topology.{name} must be positive, got {value}")

    def node_size(self, tp: int) -> int:
        return self.ranks_per_node or tp

    def validate(self, tp: int) -> None:
        node = self.node_size(tp)
        if tp % node:
            raise ConfigError(f"ranks_per_node={node} does not divide tp={tp}")
        if self.kind is TopologyKind.PCIE_NUMA and node % self.ranks_per_numa:
            raise ConfigError(
                f"ranks_per_numa={self.ranks_per_numa} does not divide the node size {node}"
            )

    def node_of(self, rank: int, tp: int) -> int:
        return rank // self.node_size(tp)

    def numa_of(self, rank: int, tp: int) -> int:
        """Global NUMA-domain id; every rank of a node shares one unless PCIe."""
        if self.kind is TopologyKind.PCIE_NUMA:
            return rank // self.ranks_per_numa
        return self.node_of(rank, tp)


@dataclass(frozen=True)
class TransferDescriptor:
    """One host-side copy of a communication tile.

    ``rank`` issues the copy. ``owner`` is the rank whose A shard the rows
    belong to; ``row_start``/``row_stop`` are relative to that shard. ``peer``
    is the source (pull) or destination (push). A descriptor is *relayed* when
    the data is forwarded from an aggregate buffer rather than read from the
    owner's shard; it must wait for that aggregate's flag first.
    """

    rank: int
    owner: int
    peer: int
    row_start: int
    row_stop: int

    @property
    def rows(self) -> int:
        return self.row_stop - self.row_start

    def relayed(self, mode: TransferMode) -> bool:
        if TransferMode(mode) is TransferMode.PULL:
            return self.peer != self.owner
        return self.owner != self.rank

    def source(self, mode: TransferMode) -> int:
        return self.peer if TransferMode(mode) is TransferMode.PULL else self.rank

    def destination(self, mode: TransferMode) -> int:
        return self.rank if TransferMode(mode) is TransferMode.PULL else self.peer


def _ring(rank: int, members: Sequence[int], size: int) -> list[int]:
    """Members other than ``rank`` ordered by forward ring distance from it."""
    return sorted((p for p in members if p != rank), key=lambda p: (p - rank) % size)


def _interleave(first: list, second: list) -> list:
    out = []
    for i in range(max(len(first), len(second))):
        if i < len(first):
            out.append(first[i])
        if i < len(second):
            out.append(second[i])
    return out


def peer_pairs(topology: Topology, rank: int, tp: int, mode: TransferMode = TransferMode.PULL) -> list[tuple[int, int]]:
    """Ordered ``(owner, peer)`` pairs, one per row block a rank transfers."""
    mode = TransferMode(mode)
    if not 0 <= rank < tp:
        raise ConfigError(f"rank {rank} is out of range for tp={tp}")
    topology.validate(tp)
    pull = mode is TransferMode.PULL

    def direct(p):
        return (p, p) if pull else (rank, p)

    if topology.kind is TopologyKind.NVLINK_RING:
        return [direct(p) for p in _ring(rank, range(tp), tp)]

    if topology.kind is TopologyKind.PCIE_NUMA:
        node = topology.node_of(rank, tp)
        numa = topology.numa_of(rank, tp)
        ordered = _ring(rank, range(tp), tp)
        inter_numa = [p for p in ordered if topology.node_of(p, tp) == node and topology.numa_of(p, tp) != numa]
        rest = [p for p in ordered if p not in inter_numa]
        return [direct(p) for p in inter_numa + rest]

    size = topology.node_size(tp)
    nodes = tp // size
    node, local = divmod(rank, size)
    local_peers = [node * size + j for j in _ring(local, range(size), size)]
    remote_nodes = _ring(node, range(nodes), nodes)
    counterparts = [nd * size + local for nd in remote_nodes]
    pairs = _interleave([direct(c) for c in counterparts], [direct(p) for p in local_peers])
    for nd in remote_nodes:
        for j in _ring(local, range(size), size):
            if pull:
                # owner's block arrives through its counterpart on this node
                pairs.append((nd * size + j, node * size + j))
            else:
                # forward the block received from our counterpart on node nd
                pairs.append((nd * size + local, node * size + j))
    return pairs


def comm_order(
    topology: Topology,
    rank: int,
    tp: int,
    rows_per_comm_tile: int,
    shard_rows: int | None = None,
    mode: TransferMode = TransferMode.PULL,
) -> list[TransferDescriptor]:
    """Host transfer descriptors for ``rank``, in issue order."""
    shard_rows = rows_per_comm_tile if shard_rows is None else shard_rows
    if rows_per_comm_tile <= 0 or shard_rows % rows_per_comm_tile:
        raise ConfigError(
            f"rows_per_comm_tile={rows_per_comm_tile} must divide the row block of {shard_rows} rows"
        )
    out = []
    for owner, peer in peer_pairs(topology, rank, tp, mode):
        for start in range(0, shard_rows, rows_per_comm_tile):
            out.append(TransferDescriptor(rank, owner, peer, start, start + rows_per_comm_tile))
    return out


def arrival_block_order(
    topology: Topology, rank: int, tp: int, mode: TransferMode = TransferMode.PULL
) -> tuple[int, ...]:
    """Row blocks of ``rank``'s aggregate in the order their signals arrive."""
    mode = TransferMode(mode)
    if mode is TransferMode.PULL:
        owners = [owner for owner, _ in peer_pairs(topology, rank, tp, mode)]
    else:
        # a push lands at the position it holds in the sender's host loop
        arrivals = []
        for sender in range(tp):
            for pos, (owner, peer) in enumerate(peer_pairs(topology, sender, tp, mode)):
                if peer == rank:
                    arrivals.append((pos, sender, owner))
        owners = [owner for _, _, owner in sorted(arrivals)]
    order = [rank]
    for owner in owners:
        if owner not in order:
            order.append(owner)
    return tuple(order)


@dataclass(frozen=True)
class SwizzlePolicy:
    kind: SwizzleKind
    rank: int
    tp: int
    shift: int = 1
    block_order: tuple[int, ...] | None = None
    intra_block: str = "col_major"

    def __post_init__(self):
        object.__setattr__(self, "kind", SwizzleKind(self.kind))
        if not 0 <= self.rank < self.tp:
            raise ConfigError(f"rank {self.rank} is out of range for tp={self.tp}")
        if self.intra_block not in ("col_major", "row_major"):
            raise ConfigError(f"intra_block must be col_major or row_major, got {self.intra_block!r}")
        if self.block_order is not None and sorted(self.block_order) != list(range(self.tp)):
            raise ConfigError(f"block_order {self.block_order} is not a permutation of range({self.tp})")

    @classmethod
    def arrival_aligned(cls, rank, tp, topology=Topology(), mode=TransferMode.PULL):
        return cls(SwizzleKind.ARRIVAL_ALIGNED, rank, tp,
                   block_order=arrival_block_order(topology, rank, tp, mode))

    def blocks(self) -> tuple[int, ...]:
        """Row-block visit order."""
        if self.kind is SwizzleKind.NAIVE:
            return tuple(range(self.tp))
        if self.kind is SwizzleKind.RANK_SHIFTED:
            return tuple((self.rank + self.shift + i) % self.tp for i in range(self.tp))
        if self.block_order is not None:
            return self.block_order
        return tuple((self.rank + i) % self.tp for i in range(self.tp))


def map_tile(policy: SwizzlePolicy, flat_index: int, grid_dims: tuple[int, int]) -> TileCoord:
    rows, cols = grid_dims
    if not 0 <= flat_index < rows * cols:
        raise BoundsError(f"flat tile index {flat_index} outside a {rows}x{cols} grid")
    if policy.kind is SwizzleKind.NAIVE:
        return TileCoord(*divmod(flat_index, cols))
    if rows % policy.tp:
        raise ConfigError(f"{rows} tile rows cannot be split into {policy.tp} row blocks")
    block_rows = rows // policy.tp
    block_pos, within = divmod(flat_index, block_rows * cols)
    block = policy.blocks()[block_pos]
    if policy.intra_block == "col_major":
        col, r = divmod(within, block_rows)
    else:
        r, col = divmod(within, cols)
    return TileCoord(block * block_rows + r, col)


def tile_order(policy: SwizzlePolicy, grid_dims: tuple[int, int]) -> list[TileCoord]:
    rows, cols = grid_dims
    return [map_tile(policy, i, grid_dims) for i in range(rows * cols)]
