"""Declarative run configuration (YAML) with schema validation.

Every section is optional; missing keys take the defaults below and unknown
keys are rejected with the offending file line and dotted field path.

.. code-block:: yaml

    seed: 42
    out: out
    problem: {m: 256, n: 128, k: 128, tp: 4, pattern: allgather_gemm}
    tile: {tm: 32, tn: 32}
    strategies: [coarse, medium, fine]
    topology: {kind: nvlink_ring}
    machine: {}            # overrides of the packaged desk machine
    fine: {swizzle: true, transfer: pull, comm_rows: null, write_mode: write_alltoall}
    medium: {partitions: null}
    knobs: {transfer_modes: [pull, push], comm_tile_sizes: null, ...}
    sweep: {m: [1024, 2048, 4096, 8192], patterns: [allgather_gemm, gemm_reducescatter]}
    bench: {warmup: 3, repetitions: 10}
    tune: {objective: simulated_time, repetitions: 3, cache: true}
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import Pattern, ProblemSpec, TileShape, TransferMode, WriteMode
from .errors import ConfigError
from .sim import _FLOAT_FIELDS, _INT_FIELDS, MachineModel, default_machine, machine_to_dict
from .swizzle import SwizzleKind, Topology, TopologyKind
from .tune import KnobSpace, Objective

STRATEGIES = ("coarse", "medium", "fine")


def _choices(*values):
    return {"choices": tuple(values)}


@dataclass
class ProblemSection:
    m: int = 256
    n: int = 128
    k: int = 128
    tp: int = 4
    pattern: str = field(default="allgather_gemm", metadata=_choices(*(p.value for p in Pattern)))


@dataclass
class TileSection:
    tm: int = 32
    tn: int = 32


@dataclass
class TopologySection:
    kind: str = field(default="nvlink_ring", metadata=_choices(*(t.value for t in TopologyKind)))
    ranks_per_numa: typing.Optional[int] = None
    ranks_per_node: typing.Optional[int] = None


@dataclass
class FineSection:
    swizzle: bool = True
    transfer: str = field(default="pull", metadata=_choices(*(t.value for t in TransferMode)))
    comm_rows: typing.Optional[int] = None
    write_mode: str = field(default="write_alltoall", metadata=_choices(*(w.value for w in WriteMode)))
    deterministic: bool = True
    workers: typing.Optional[int] = None


@dataclass
class MediumSection:
    partitions: typing.Optional[int] = None


@dataclass
class KnobSection:
    transfer_modes: typing.List[str] = field(default_factory=lambda: ["pull", "push"],
                                             metadata=_choices(*(t.value for t in TransferMode)))
    comm_tile_sizes: typing.Optional[typing.List[int]] = None
    swizzle_policies: typing.Optional[typing.List[str]] = field(
        default=None, metadata=_choices(*(s.value for s in SwizzleKind)))
    gemm_tile_shapes: typing.Optional[typing.List[typing.List[int]]] = None
    write_modes: typing.List[str] = field(default_factory=lambda: ["write_alltoall", "fused_reduce"],
                                          metadata=_choices(*(w.value for w in WriteMode)))


@dataclass
class SweepSection:
    m: typing.List[int] = field(default_factory=lambda: [1024, 2048, 4096, 8192])
    patterns: typing.List[str] = field(default_factory=lambda: [p.value for p in Pattern],
                                       metadata=_choices(*(p.value for p in Pattern)))


@dataclass
class BenchSection:
    warmup: int = 3
    repetitions: int = 10


@dataclass
class TuneSection:
    objective: str = field(default="simulated_time", metadata=_choices(*(o.value for o in Objective)))
    repetitions: int = 3
    cache: bool = True


@dataclass
class RunConfig:
    seed: int = 42
    out: str = "out"
    problem: ProblemSection = field(default_factory=ProblemSection)
    tile: TileSection = field(default_factory=TileSection)
    strategies: typing.List[str] = field(default_factory=lambda: list(STRATEGIES),
                                         metadata=_choices(*STRATEGIES))
    topology: TopologySection = field(default_factory=TopologySection)
    # overrides applied on top of the packaged default machine
    machine: typing.Dict[str, typing.Any] = field(default_factory=dict)
    fine: FineSection = field(default_factory=FineSection)
    medium: MediumSection = field(default_factory=MediumSection)
    knobs: KnobSection = field(default_factory=KnobSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    bench: BenchSection = field(default_factory=BenchSection)
    tune: TuneSection = field(default_factory=TuneSection)

    # ------------------------------------------------------------ derived objects

    def problem_spec(self, m: int | None = None, pattern: str | None = None) -> ProblemSpec:
        p = self.problem
        return ProblemSpec(p.m if m is None else m, p.n, p.k, p.tp, pattern or p.pattern)

    def tile_shape(self) -> TileShape:
        return TileShape(self.tile.tm, self.tile.tn)

    def topology_obj(self) -> Topology:
        t = self.topology
        return Topology(TopologyKind(t.kind), t.ranks_per_numa, t.ranks_per_node)

    def machine_model(self) -> MachineModel:
        merged = machine_to_dict(default_machine())
        merged.update(self.machine)
        merged["topology"] = self.topology_obj()
        from .sim import machine_from_dict
        return machine_from_dict(merged)

    def knob_space(self) -> KnobSpace:
        k = self.knobs
        return KnobSpace(
            transfer_modes=tuple(k.transfer_modes),
            comm_tile_sizes=tuple(k.comm_tile_sizes) if k.comm_tile_sizes is not None else None,
            swizzle_policies=tuple(k.swizzle_policies) if k.swizzle_policies is not None else None,
            gemm_tile_shapes=tuple(TileShape(*t) for t in k.gemm_tile_shapes)
            if k.gemm_tile_shapes is not None else None,
            write_modes=tuple(k.write_modes),
        )

    def validate(self) -> None:
        """Semantic checks beyond the schema; raises :class:`ConfigError`."""
        if not self.strategies:
            raise ConfigError("strategies: at least one strategy is required")
        self.problem_spec()
        self.tile_shape()
        self.topology_obj().validate(self.problem.tp)
        self.machine_model()
        if self.bench.repetitions < 1 or self.bench.warmup < 0:
            raise ConfigError("bench: repetitions must be >= 1 and warmup >= 0")
        if not self.sweep.m:
            raise ConfigError("sweep.m: at least one m value is required")
        for shape in self.knobs.gemm_tile_shapes or []:
            if len(shape) != 2:
                raise ConfigError(f"knobs.gemm_tile_shapes: expected [tm, tn] pairs, got {shape!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# ---------------------------------------------------------------- parsing


class _Located:
    """Source lines of every mapping key and sequence item in a YAML document."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[tuple, int] = {}
        try:
            root = yaml.compose(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: invalid YAML: {exc}") from None
        if root is not None:
            self._walk(root, ())

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                sub = path + (str(key.value),)
                self._walk(value, sub)
                self.lines[sub] = key.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                self._walk(item, path + (i,))

    def error(self, path: tuple, message: str) -> ConfigError:
        probe = path
        while probe and probe not in self.lines:
            probe = probe[:-1]
        line = self.lines.get(probe)
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(str(p) for p in path) or "<root>"
        return ConfigError(f"{where}: {dotted}: {message}")


def _check(value, hint, path, loc: _Located, choices=None):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _check(value, inner, path, loc, choices)
    if hint is typing.Any:
        return value
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise loc.error(path, f"expected a list, got {value!r}")
        return [_check(v, args[0], path + (i,), loc, choices) for i, v in enumerate(value)]
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            raise loc.error(path, f"expected a mapping, got {value!r}")
        return dict(value)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path, loc)
    if hint is bool:
        if not isinstance(value, bool):
            raise loc.error(path, f"expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise loc.error(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise loc.error(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise loc.error(path, f"expected a string, got {value!r}")
        if choices is not None and value not in choices:
            raise loc.error(path, f"{value!r} is not one of {', '.join(choices)}")
        return value
    raise TypeError(f"unsupported config field type {hint!r}")


def _build(cls, data, path, loc: _Located):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise loc.error(path, f"expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise loc.error(path + (str(key),), f"unknown key (allowed: {', '.join(names)})")
    kwargs = {}
    for name, f in names.items():
        if name in data:
            kwargs[name] = _check(data[name], hints[name], path + (name,), loc, f.metadata.get("choices"))
    return cls(**kwargs)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    loc = _Located(text, source)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    cfg = _build(RunConfig, data, (), loc)
    allowed = set(_INT_FIELDS) | set(_FLOAT_FIELDS)
    for key in cfg.machine:
        if key not in allowed:
            hint = " (set it in the top-level topology section)" if key == "topology" else ""
            raise loc.error(("machine", key), f"unknown key{hint}")
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
