"""Tile-level overlap of GEMM with AllGather / ReduceScatter for tensor parallelism.

A threaded engine executes the coarse, chunked and fused strategies on
in-memory shards; a discrete-event simulator costs the same schedules on a
parameterized machine.
"""

from .core import (
    Pattern,
    ProblemSpec,
    ShardedWorkspace,
    TileCoord,
    TileShape,
    TransferMode,
    WriteMode,
    dense_oracle,
    make_workspace,
    max_relative_error,
)
from .engine import (
    EngineOptions,
    run_fused_allgather_gemm,
    run_fused_gemm_reducescatter,
    run_medium_grained,
    run_nonoverlap,
    run_strategy,
)
from .errors import (
    BoundsError,
    ConfigError,
    DeadlockError,
    DirectoryError,
    OverlapError,
    ShapeError,
    SignalError,
    TuneError,
)
from .sim import MachineModel, Metrics, Timeline, default_machine, gemm_nonsplit_time, metrics, simulate
from .swizzle import SwizzleKind, SwizzlePolicy, Topology, TopologyKind, comm_order, map_tile
from .tune import KnobSpace, Objective, TuneResult, enumerate_knobs, tune

__version__ = "0.1.0"
