"""Deterministic synthetic digital-twin workloads and observation sampling.

A workload spec names each entity field's dynamics: fixed draws from a
small value pool, random walks, sporadic changes at a given rate, or a
periodic countdown. ``generate`` produces the full ground-truth state for
every step; ``sample`` picks which steps become recorded observations.

Randomness comes from numpy's PCG64 bit generator seeded with the 64-bit
workload seed. Per-replay seeds are derived with SplitMix64.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SpecInvalid
from .replay import Observation, ReplaySequence, make_sequence
from .schema import (
    DEFAULT_STEP_SECONDS,
    SCALAR_TYPES,
    FieldDescriptor,
    PlaneChannel,
    Schema,
    validate_schema,
)

MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seeds(seed: int, count: int) -> list[int]:
    state, out = seed & MASK64, []
    for _ in range(count):
        state, value = splitmix64(state)
        out.append(value)
    return out


@dataclass(frozen=True)
class FieldDynamics:
    """How one entity field evolves. ``kind`` is id, pool, walk, change or countdown."""

    kind: str
    pool: int = 0
    probability: float = 0.0
    bound: float = 0.0
    quantum: float = 0.0
    period: int = 0
    levels: int = 0


@dataclass(frozen=True)
class ChannelSource:
    """Derivation rule for a scalar channel: sum_changes, count_false, count or walk."""

    kind: str
    field: str = ""
    bound: float = 1.0


@dataclass(frozen=True)
class WorkloadSpec:
    schema: Schema
    entity_count: int
    step_count: int
    dynamics: dict[str, FieldDynamics]
    scalar_sources: dict[str, ChannelSource] = field(default_factory=dict)
    action_rate: float = 0.0
    uid_churn_probability: float = 0.0
    world_size: float = 64.0
    zone_margin: float = 1.0
    scenario_tag: str = "warehouse"

    def validate(self) -> None:
        problems = list(validate_schema(self.schema).violations)
        if self.entity_count <= 0:
            problems.append("entity_count must be positive")
        if self.step_count <= 0:
            problems.append("step_count must be positive")
        if self.action_rate < 0:
            problems.append("action_rate must be non-negative")
        if not 0.0 <= self.uid_churn_probability <= 1.0:
            problems.append("uid_churn_probability must lie in [0, 1]")
        if self.world_size <= 0:
            problems.append("world_size must be positive")
        for f in self.schema.entity_fields:
            dyn = self.dynamics.get(f.name)
            if dyn is None:
                problems.append(f"no dynamics for field {f.name}")
                continue
            if (f.role == "instance_id") != (dyn.kind == "id"):
                problems.append(f"field {f.name}: dynamics 'id' is reserved for the instance_id field")
            if dyn.kind == "pool" and dyn.pool < 1:
                problems.append(f"field {f.name}: pool size must be >= 1")
            if dyn.kind == "change" and not 0.0 <= dyn.probability <= 1.0:
                problems.append(f"field {f.name}: change probability outside [0, 1]")
            if dyn.kind == "walk" and dyn.bound <= 0:
                problems.append(f"field {f.name}: walk bound must be positive")
            if dyn.kind == "walk" and dyn.quantum > dyn.bound:
                problems.append(f"field {f.name}: walk quantum exceeds bound")
            if dyn.kind == "countdown" and (dyn.period < 1 or dyn.levels < 1):
                problems.append(f"field {f.name}: countdown needs period and levels >= 1")
            if dyn.kind not in {"id", "pool", "walk", "change", "countdown"}:
                problems.append(f"field {f.name}: unknown dynamics {dyn.kind!r}")
        names = set(self.schema.field_names)
        for f in self.schema.scalar_channels:
            src = self.scalar_sources.get(f.name, ChannelSource("walk"))
            if src.kind in {"sum_changes", "count_false"} and src.field not in names:
                problems.append(f"scalar {f.name}: source field {src.field!r} not in schema")
            if src.kind not in {"sum_changes", "count_false", "count", "walk"}:
                problems.append(f"scalar {f.name}: unknown source {src.kind!r}")
        if problems:
            raise SpecInvalid("; ".join(problems))

    def with_overrides(self, **kwargs) -> WorkloadSpec:
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(kwargs)
        return WorkloadSpec(**values)


# -- spec files --------------------------------------------------------------

_OPTION_RE = re.compile(r"^([a-z_]+):(.+)$")


def _default_dynamics(f: FieldDescriptor) -> FieldDynamics:
    if f.role == "instance_id":
        return FieldDynamics("id")
    if f.dynamics == "fast":
        return FieldDynamics("walk", bound=0.5)
    if f.dynamics == "slow":
        return FieldDynamics("change", probability=0.02)
    return FieldDynamics("pool", pool=16)


def _parse_field(name: str, tokens: list[str]) -> tuple[FieldDescriptor, FieldDynamics]:
    if len(tokens) < 3:
        raise SpecInvalid(f"field {name}: expected 'type dynamics role [options]'")
    stype, dynamics, role = tokens[:3]
    opts = {}
    for tok in tokens[3:]:
        m = _OPTION_RE.match(tok)
        if not m:
            raise SpecInvalid(f"field {name}: bad option {tok!r}")
        opts[m.group(1)] = m.group(2)
    default = opts.pop("default", "0")
    desc = FieldDescriptor(name, stype, dynamics, role, float(default) if "." in default else int(default))
    try:
        if "id" in opts or role == "instance_id":
            opts.pop("id", None)
            dyn = FieldDynamics("id")
        elif "pool" in opts:
            dyn = FieldDynamics("pool", pool=int(opts.pop("pool")))
        elif "walk" in opts:
            dyn = FieldDynamics("walk", bound=float(opts.pop("walk")), quantum=float(opts.pop("quantum", 0)))
        elif "change" in opts:
            dyn = FieldDynamics("change", probability=float(opts.pop("change")))
        elif "countdown" in opts:
            dyn = FieldDynamics(
                "countdown", period=int(opts.pop("countdown")), levels=int(opts.pop("levels", 256))
            )
        else:
            dyn = _default_dynamics(desc)
    except ValueError as exc:
        raise SpecInvalid(f"field {name}: {exc}") from None
    if opts:
        raise SpecInvalid(f"field {name}: unused options {sorted(opts)}")
    return desc, dyn


def _parse_source(name: str, tokens: list[str]) -> ChannelSource:
    if not tokens:
        return ChannelSource("walk")
    m = _OPTION_RE.match(tokens[0])
    if m and m.group(1) == "walk":
        return ChannelSource("walk", bound=float(m.group(2)))
    if m:
        return ChannelSource(m.group(1), field=m.group(2))
    return ChannelSource(tokens[0])


def parse_spec(text: str) -> WorkloadSpec:
    """Parse a key = value workload description (see ``data/w1.spec``)."""
    scalars_kv: dict[str, str] = {}
    entity, scalar, planes = [], [], []
    dynamics, sources = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecInvalid(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        tokens = value.split()
        if key.startswith("entity."):
            desc, dyn = _parse_field(key[7:], tokens)
            entity.append(desc)
            dynamics[desc.name] = dyn
        elif key.startswith("scalar."):
            name = key[7:]
            if not tokens:
                raise SpecInvalid(f"line {lineno}: scalar {name} needs a type")
            dyn_tag = tokens[1] if len(tokens) > 1 and tokens[1] in {"static", "slow", "fast"} else "slow"
            rest = tokens[2:] if len(tokens) > 1 and tokens[1] == dyn_tag else tokens[1:]
            scalar.append(FieldDescriptor(name, tokens[0], dyn_tag, "generic"))
            sources[name] = _parse_source(name, rest)
        elif key.startswith("plane."):
            if len(tokens) != 3:
                raise SpecInvalid(f"line {lineno}: plane needs 'width height element'")
            planes.append(PlaneChannel(key[6:], int(tokens[0]), int(tokens[1]), tokens[2]))
        else:
            scalars_kv[key] = value
    for f in entity + scalar:
        if f.scalar_type not in SCALAR_TYPES:
            raise SpecInvalid(f"field {f.name}: unknown type {f.scalar_type!r}")
    try:
        schema = Schema(entity, scalar, planes, float(scalars_kv.pop("step_seconds", DEFAULT_STEP_SECONDS)))
        spec = WorkloadSpec(
            schema=schema,
            entity_count=int(scalars_kv.pop("entity_count")),
            step_count=int(scalars_kv.pop("step_count")),
            dynamics=dynamics,
            scalar_sources=sources,
            action_rate=float(scalars_kv.pop("action_rate", 0)),
            uid_churn_probability=float(scalars_kv.pop("uid_churn_probability", 0)),
            world_size=float(scalars_kv.pop("world_size", 64)),
            zone_margin=float(scalars_kv.pop("zone_margin", 1)),
            scenario_tag=scalars_kv.pop("scenario", "warehouse"),
        )
    except KeyError as exc:
        raise SpecInvalid(f"missing required key {exc}") from None
    except ValueError as exc:
        raise SpecInvalid(str(exc)) from None
    if scalars_kv:
        raise SpecInvalid(f"unknown keys {sorted(scalars_kv)}")
    spec.validate()
    return spec


def load_spec(path) -> WorkloadSpec:
    """Load a spec file; ``@w1`` names the bundled reference workload."""
    if str(path).startswith("@"):
        text = resources.files("replaycask").joinpath(f"data/{str(path)[1:]}.spec").read_text()
    else:
        text = Path(path).read_text()
    return parse_spec(text)


def w1_spec() -> WorkloadSpec:
    return load_spec("@w1")


# -- generation ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Complete simulated state: ``fields[name]`` and ``uids`` are (steps, entities)."""

    spec: WorkloadSpec
    seed: int
    uids: np.ndarray
    logical_ids: np.ndarray
    fields: dict[str, np.ndarray]
    action_counts: np.ndarray
    scalars: dict[str, np.ndarray]
    planes: dict[str, np.ndarray]
    outcome_label: int

    @property
    def step_count(self) -> int:
        return self.uids.shape[0]

    @property
    def action_steps(self) -> np.ndarray:
        return np.flatnonzero(self.action_counts)


def _reflect(x, lo, hi):
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def _walk(rng, dyn: FieldDynamics, lo, hi, T, E) -> np.ndarray:
    """Reflected random walk that moves every step by at most ``dyn.bound``."""
    if dyn.quantum > 0:
        q = dyn.quantum
        units = rng.integers(1, int(dyn.bound // q) + 1, size=(T, E))
        mags = units * q
        span_units = np.floor((hi - lo) / q).astype(np.int64)
        start = lo + rng.integers(0, span_units + 1, size=E) * q
    else:
        mags = rng.uniform(dyn.bound / 10, dyn.bound, size=(T, E))
        start = rng.uniform(lo, hi, size=E)
    signs = np.where(rng.random((T, E)) < 0.5, -1.0, 1.0)
    steps = mags * signs
    out = np.empty((T, E))
    x = np.asarray(start, dtype=np.float64)
    out[0] = x
    for t in range(1, T):
        nxt = _reflect(x + steps[t], lo, hi)
        # a bounce can land back on the previous value; go the other way instead
        stuck = nxt == x
        if stuck.any():
            nxt = np.where(stuck, _reflect(x - steps[t], lo, hi), nxt)
        out[t] = x = nxt
    return out


def _type_range(stype: str) -> int:
    return {"u8": 1 << 8, "u16": 1 << 16, "u32": 1 << 32, "u64": 1 << 63, "i32": 1 << 31}.get(stype, 1 << 16)


def generate(spec: WorkloadSpec, seed: int) -> GroundTruth:
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed & MASK64))
    T, E = spec.step_count, spec.entity_count
    schema = spec.schema
    fields: dict[str, np.ndarray] = {}

    # positions walk inside per-entity zones so no two entities come closer
    # than twice the zone margin
    pos_names = schema.position_fields or ()
    zones = math.ceil(math.sqrt(E))
    zone = spec.world_size / zones
    zone_col = (np.arange(E) % zones) * zone
    zone_row = (np.arange(E) // zones) * zone
    margin = min(spec.zone_margin, zone / 4)

    uids = np.broadcast_to(np.arange(1, E + 1, dtype=np.uint64), (T, E)).copy()
    if spec.uid_churn_probability > 0:
        churn = rng.random((T, E)) < spec.uid_churn_probability
        churn[0] = False
        t_idx, e_idx = np.nonzero(churn)
        fresh = np.arange(E + 1, E + 1 + len(t_idx), dtype=np.uint64)
        marks = np.zeros((T, E), dtype=np.uint64)
        marks[t_idx, e_idx] = fresh
        marks[0] = uids[0]
        # forward-fill the latest assigned uid down each entity's column
        last = np.maximum.accumulate(np.where(marks > 0, np.arange(T)[:, None], 0), axis=0)
        uids = np.take_along_axis(marks, last, axis=0)

    for f in schema.entity_fields:
        dyn = spec.dynamics[f.name]
        dtype = f.dtype
        if dyn.kind == "id":
            continue
        if dyn.kind == "pool":
            values = np.broadcast_to(rng.integers(0, dyn.pool, size=E), (T, E))
        elif dyn.kind == "walk":
            if f.name in pos_names:
                base = zone_col if f.name == pos_names[0] else zone_row
                local = _walk(rng, dyn, margin, zone - margin, T, E)
                values = local + base
            else:
                values = _walk(rng, dyn, 0.0, spec.world_size, T, E)
        elif dyn.kind == "change":
            events = rng.random((T, E)) < dyn.probability
            events[0] = False
            if f.scalar_type == "bool":
                init = rng.random(E) < 0.5
                values = init ^ (np.cumsum(events, axis=0) % 2).astype(bool)
            elif f.scalar_type in ("f32", "f64"):
                draws = rng.uniform(0, spec.world_size, size=(T, E))
                last = np.maximum.accumulate(np.where(events, np.arange(T)[:, None], 0), axis=0)
                values = np.take_along_axis(draws, last, axis=0)
            else:
                span = _type_range(f.scalar_type)
                init = rng.integers(0, span, size=E, dtype=np.uint64)
                # nonzero offsets guarantee every event changes the value
                offsets = rng.integers(1, span, size=(T, E), dtype=np.uint64) * events
                values = (init + np.cumsum(offsets, axis=0, dtype=np.uint64)) % np.uint64(span)
        else:  # countdown
            start = rng.integers(0, dyn.levels, size=E)
            phase = rng.integers(0, dyn.period, size=E)
            ticks = (np.arange(T)[:, None] + phase) // dyn.period
            values = np.mod(start - ticks, dyn.levels)
        fields[f.name] = np.ascontiguousarray(values.astype(dtype))
    fields[schema.instance_id] = uids.astype(schema.entity_dtype[schema.instance_id])

    action_counts = rng.poisson(spec.action_rate, size=T) if spec.action_rate > 0 else np.zeros(T, np.int64)

    scalars = {}
    for f in schema.scalar_channels:
        src = spec.scalar_sources.get(f.name, ChannelSource("walk"))
        if src.kind == "sum_changes":
            col = fields[src.field]
            changes = np.zeros(T, dtype=np.int64)
            changes[1:] = (col[1:] != col[:-1]).sum(axis=1)
            series = np.cumsum(changes)
        elif src.kind == "count_false":
            series = (~fields[src.field].astype(bool)).sum(axis=1)
        elif src.kind == "count":
            series = np.full(T, E)
        else:
            series = np.cumsum(rng.uniform(-src.bound, src.bound, size=T))
        scalars[f.name] = series.astype(f.dtype)

    planes = {}
    for p in schema.plane_channels:
        cells = None
        if pos_names:
            xs = fields[pos_names[0]].astype(np.float64)
            ys = fields[pos_names[1]].astype(np.float64)
            cols = np.clip((xs / spec.world_size * p.width).astype(np.int64), 0, p.width - 1)
            rows = np.clip((ys / spec.world_size * p.height).astype(np.int64), 0, p.height - 1)
            cells = (rows * p.width + cols).ravel()
        t_of = np.repeat(np.arange(T), E)
        if p.element == "bool":
            grid = np.zeros((T, p.height * p.width), dtype=bool)
            if cells is not None:
                grid[t_of, cells] = True
        else:
            counts = np.zeros((T, p.height * p.width), dtype=np.uint16)
            if cells is not None:
                np.add.at(counts, (t_of, cells), 1)
            grid = np.minimum(counts, 255).astype(np.uint8)
        planes[p.name] = grid.reshape(T, p.height, p.width)

    outcome = int(rng.integers(0, 2))
    return GroundTruth(
        spec=spec,
        seed=seed,
        uids=fields[schema.instance_id],
        logical_ids=np.arange(1, E + 1),
        fields=fields,
        action_counts=action_counts,
        scalars=scalars,
        planes=planes,
        outcome_label=outcome,
    )


# -- sampling ----------------------------------------------------------------


@dataclass(frozen=True)
class SamplingPolicy:
    """Which steps are recorded: every_step, on_action, every_n or every_n_or_action."""

    kind: str
    n: int = 1

    def __post_init__(self):
        if self.kind not in {"every_step", "on_action", "every_n", "every_n_or_action"}:
            raise ValueError(f"unknown sampling policy {self.kind!r}")
        if self.n < 1:
            raise ValueError("sampling interval n must be >= 1")

    @classmethod
    def parse(cls, text: str) -> SamplingPolicy:
        kind, _, n = text.strip().lower().replace("-", "_").partition(":")
        return cls(kind, int(n) if n else 1)

    def __str__(self) -> str:
        return f"{self.kind}:{self.n}" if self.kind.startswith("every_n") else self.kind

    def select(self, step_count: int, action_counts: np.ndarray) -> np.ndarray:
        steps = np.arange(step_count)
        if self.kind == "every_step":
            return steps
        on_action = np.asarray(action_counts) > 0
        if self.kind == "on_action":
            return steps[on_action]
        periodic = steps % self.n == 0
        if self.kind == "every_n":
            return steps[periodic]
        return steps[periodic | on_action]


EVERY_STEP = SamplingPolicy("every_step")
ON_ACTION = SamplingPolicy("on_action")


def sample(stream: GroundTruth, policy: SamplingPolicy) -> ReplaySequence:
    spec, schema = stream.spec, stream.spec.schema
    T, E = stream.uids.shape
    records = np.empty((T, E), dtype=schema.entity_dtype)
    for name in schema.field_names:
        records[name] = stream.fields[name]
    srows = np.empty(T, dtype=schema.scalar_dtype)
    for f in schema.scalar_channels:
        srows[f.name] = stream.scalars[f.name]
    keep = policy.select(T, stream.action_counts)
    scalar_tuples = srows[keep].tolist() if schema.scalar_channels else [()] * len(keep)
    observations = [
        Observation(
            int(t),
            records[t],
            tuple(scalar_tuples[i]),
            {p.name: stream.planes[p.name][t] for p in schema.plane_channels},
        )
        for i, t in enumerate(keep)
    ]
    return make_sequence(
        schema,
        observations,
        T,
        replay_id=f"{spec.scenario_tag}-{stream.seed & MASK64:016x}",
        scenario_tag=spec.scenario_tag,
        action_count=int(stream.action_counts.sum()),
        outcome_label=stream.outcome_label,
    )
