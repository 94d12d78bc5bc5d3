"""Problem description, sharding layout, tile grids and the dense oracle.

Conventions used throughout the package:

* ``m`` is the global row count. It is scattered (ReduceScatter) or gathered
  (AllGather) in ``tp`` contiguous row blocks; rank ``r`` owns global rows
  ``[r*m/tp, (r+1)*m/tp)``.
* ``n`` and ``k`` are the extents of the GEMM each rank actually runs, i.e. the
  per-rank column and reduction dimensions after the weight has been sharded.

AllGather-GEMM: rank ``r`` holds ``A_r`` of shape ``[m/tp, k]`` and ``B_r`` of
shape ``[k, n]``; every rank computes ``gather(A) @ B_r`` of shape ``[m, n]``.

GEMM-ReduceScatter: rank ``r`` holds ``A_r`` ``[m, k]`` and ``B_r`` ``[k, n]``,
produces the full-height partial ``A_r @ B_r`` and ends with row block ``r`` of
the sum of all partials, shape ``[m/tp, n]``.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DirectoryError, ShapeError

# relative tolerances used when comparing against the oracle
DETERMINISTIC_RTOL = 1e-10
NONDETERMINISTIC_RTOL = 1e-8


class Pattern(str, enum.Enum):
    ALLGATHER_GEMM = "allgather_gemm"
    GEMM_REDUCESCATTER = "gemm_reducescatter"


class TransferMode(str, enum.Enum):
    """Pull copies a peer's shard into the local aggregate and sets a local flag;
    push copies the local shard into a peer's aggregate and sets the peer's flag."""

    PULL = "pull"
    PUSH = "push"


class WriteMode(str, enum.Enum):
    WRITE_ALLTOALL = "write_alltoall"
    FUSED_REDUCE = "fused_reduce"


@dataclass(frozen=True)
class ProblemSpec:
    m: int
    n: int
    k: int
    tp: int
    pattern: Pattern

    def __post_init__(self):
        for name in ("m", "n", "k", "tp"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"ProblemSpec.{name} must be a positive integer, got {value!r}")
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if self.m % self.tp:
            raise ConfigError(f"m={self.m} is not divisible by tp={self.tp}")

    @property
    def shard_rows(self) -> int:
        """Rows in one rank's row block (``m / tp``)."""
        return self.m // self.tp

    def owner_of_row(self, row: int) -> int:
        return row // self.shard_rows

    def a_shard_shape(self) -> tuple[int, int]:
        if self.pattern is Pattern.ALLGATHER_GEMM:
            return (self.shard_rows, self.k)
        return (self.m, self.k)

    def b_shard_shape(self) -> tuple[int, int]:
        return (self.k, self.n)

    def output_shape(self) -> tuple[int, int]:
        if self.pattern is Pattern.ALLGATHER_GEMM:
            return (self.m, self.n)
        return (self.shard_rows, self.n)


@dataclass(frozen=True)
class TileShape:
    tm: int
    tn: int

    def __post_init__(self):
        for name in ("tm", "tn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"TileShape.{name} must be a positive integer, got {value!r}")


class TileCoord(NamedTuple):
    row: int
    col: int


def validate_tile(problem: ProblemSpec, tile: TileShape) -> None:
    """Raise :class:`ConfigError` unless ``tile`` divides the problem exactly."""
    if tile.tm > problem.shard_rows or problem.shard_rows % tile.tm:
        raise ConfigError(
            f"tile rows tm={tile.tm} must divide the per-rank row block m/tp={problem.shard_rows}"
        )
    if problem.n % tile.tn:
        raise ConfigError(f"tile cols tn={tile.tn} must divide n={problem.n}")


def grid_dims(problem: ProblemSpec, tile: TileShape) -> tuple[int, int]:
    """Number of (row, col) tiles covering the per-rank ``[m, n]`` GEMM output."""
    validate_tile(problem, tile)
    return problem.m // tile.tm, problem.n // tile.tn


def tile_grid(problem: ProblemSpec, tile: TileShape) -> list[TileCoord]:
    """All tile coordinates in row-major order."""
    rows, cols = grid_dims(problem, tile)
    return [TileCoord(r, c) for r in range(rows) for c in range(cols)]


def tile_slices(coord: TileCoord, tile: TileShape) -> tuple[slice, slice]:
    return (
        slice(coord.row * tile.tm, (coord.row + 1) * tile.tm),
        slice(coord.col * tile.tn, (coord.col + 1) * tile.tn),
    )


@dataclass
class RankBuffers:
    """Everything one rank exposes to its peers."""

    rank: int
    a_shard: np.ndarray
    b_shard: np.ndarray
    c_out: np.ndarray
    a_agg: np.ndarray | None = None
    # WriteAlltoAll staging planes, indexed by source rank
    staging: np.ndarray | None = None


@dataclass
class ShardedWorkspace:
    problem: ProblemSpec
    buffers: list[RankBuffers]
    directory: dict[int, RankBuffers] = field(default_factory=dict)

    def __post_init__(self):
        if not self.directory:
            self.directory = {b.rank: b for b in self.buffers}

    @property
    def a_shards(self) -> list[np.ndarray]:
        return [b.a_shard for b in self.buffers]

    @property
    def b_shards(self) -> list[np.ndarray]:
        return [b.b_shard for b in self.buffers]

    @property
    def c_out(self) -> list[np.ndarray]:
        return [b.c_out for b in self.buffers]

    def peer(self, rank: int) -> RankBuffers:
        try:
            return self.directory[rank]
        except KeyError:
            raise DirectoryError(
                f"rank {rank} has no entry in the buffer directory "
                f"(known ranks: {sorted(self.directory)})"
            ) from None

    def require_complete(self) -> None:
        missing = [r for r in range(self.problem.tp) if r not in self.directory]
        if missing:
            raise DirectoryError(f"buffer directory is missing ranks {missing}")

    def reset_outputs(self) -> None:
        """Zero every output, aggregation and staging buffer before a run."""
        p = self.problem
        for b in self.buffers:
            b.c_out = np.zeros(p.output_shape())
            if p.pattern is Pattern.ALLGATHER_GEMM:
                b.a_agg = np.zeros((p.m, p.k))
                b.staging = None
            else:
                b.a_agg = None
                b.staging = np.zeros((p.tp, p.shard_rows, p.n))

    def outputs(self) -> list[np.ndarray]:
        return [b.c_out.copy() for b in self.buffers]

    def check_shapes(self) -> None:
        p = self.problem
        if len(self.buffers) != p.tp:
            raise ShapeError(f"workspace has {len(self.buffers)} ranks, problem has tp={p.tp}")
        for b in self.buffers:
            if b.a_shard.shape != p.a_shard_shape():
                raise ShapeError(
                    f"rank {b.rank}: A shard has shape {b.a_shard.shape}, expected {p.a_shard_shape()}"
                )
            if b.b_shard.shape != p.b_shard_shape():
                raise ShapeError(
                    f"rank {b.rank}: B shard has shape {b.b_shard.shape}, expected {p.b_shard_shape()}"
                )


def workspace_from_shards(problem: ProblemSpec, a_shards, b_shards) -> ShardedWorkspace:
    buffers = [
        RankBuffers(rank=r, a_shard=np.asarray(a, dtype=np.float64), b_shard=np.asarray(b, dtype=np.float64),
                    c_out=np.zeros(problem.output_shape()))
        for r, (a, b) in enumerate(zip(a_shards, b_shards))
    ]
    ws = ShardedWorkspace(problem, buffers)
    ws.check_shapes()
    ws.reset_outputs()
    return ws


def make_workspace(problem: ProblemSpec, seed: int = 42) -> ShardedWorkspace:
    """Uniform(-1, 1) shards: all A shards in rank order, then all B shards."""
    rng = np.random.default_rng(seed)
    a = [rng.uniform(-1.0, 1.0, problem.a_shard_shape()) for _ in range(problem.tp)]
    b = [rng.uniform(-1.0, 1.0, problem.b_shard_shape()) for _ in range(problem.tp)]
    return workspace_from_shards(problem, a, b)


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product whose every element is summed over k in ascending order.

    Unlike BLAS, the rounding is fully specified, so any other implementation
    that accumulates in the same order (tiled or scalar) agrees bit for bit.
    """
    out = np.zeros((a.shape[0], b.shape[1]))
    for kk in range(a.shape[1]):
        out += np.multiply.outer(a[:, kk], b[kk, :])
    return out


def dense_oracle(problem: ProblemSpec, workspace: ShardedWorkspace) -> list[np.ndarray]:
    """Per-rank outputs any correct strategy must reproduce."""
    workspace.check_shapes()
    p = problem
    if workspace.problem != p:
        raise ShapeError(f"workspace was built for {workspace.problem}, not {p}")
    if p.pattern is Pattern.ALLGATHER_GEMM:
        gathered = np.concatenate(workspace.a_shards, axis=0)
        return [ordered_matmul(gathered, b) for b in workspace.b_shards]
    partials = [ordered_matmul(a, b) for a, b in zip(workspace.a_shards, workspace.b_shards)]
    total = np.zeros((p.m, p.n))
    for part in partials:
        total += part
    return [total[r * p.shard_rows:(r + 1) * p.shard_rows].copy() for r in range(p.tp)]


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Largest absolute deviation, scaled by the largest expected magnitude."""
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    if actual.shape != expected.shape:
        raise ShapeError(f"shape {actual.shape} does not match expected {expected.shape}")
    if expected.size == 0:
        return 0.0
    scale = float(np.max(np.abs(expected)))
    diff = float(np.max(np.abs(actual - expected)))
    if scale == 0.0:
        return diff
    return diff / scale


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    """Row-major CSV with 17 significant digits (exact float64 round trip)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(matrix):
            writer.writerow([f"{x:.17g}" for x in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)


def golden_paths(directory: str | Path, name: str, tp: int) -> Iterator[Path]:
    directory = Path(directory)
    for r in range(tp):
        yield directory / f"{name}_rank{r}.csv"
