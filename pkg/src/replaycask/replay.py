"""Observations, replay sequences and their metadata header."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .schema import Schema

_META_TAIL = struct.Struct("<QQQBiQ")


@dataclass(frozen=True)
class ReplayMetadata:
    replay_id: str
    scenario_tag: str
    duration_steps: int
    entity_count_peak: int
    action_count: int
    outcome_label: int | None
    schema_hash: int

    def to_bytes(self) -> bytes:
        rid = self.replay_id.encode("utf-8")
        tag = self.scenario_tag.encode("utf-8")
        has_outcome = self.outcome_label is not None
        return b"".join(
            [
                struct.pack("<H", len(rid)),
                rid,
                struct.pack("<H", len(tag)),
                tag,
                _META_TAIL.pack(
                    self.duration_steps,
                    self.entity_count_peak,
                    self.action_count,
                    int(has_outcome),
                    self.outcome_label if has_outcome else 0,
                    self.schema_hash,
                ),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> ReplayMetadata:
        pos = 0

        def take_str():
            nonlocal pos
            (n,) = struct.unpack_from("<H", data, pos)
            s = bytes(data[pos + 2 : pos + 2 + n]).decode("utf-8")
            pos += 2 + n
            return s

        rid = take_str()
        tag = take_str()
        duration, peak, actions, has_outcome, outcome, shash = _META_TAIL.unpack_from(data, pos)
        if pos + _META_TAIL.size != len(data):
            raise ValueError("trailing bytes after metadata record")
        return cls(rid, tag, duration, peak, actions, outcome if has_outcome else None, shash)


@dataclass(frozen=True, eq=False)
class Observation:
    """State recorded at one simulation step.

    ``entities`` is a record array of ``schema.entity_dtype``; ``scalars`` a
    tuple in ``schema.scalar_channels`` order; ``planes`` maps channel name to
    a (height, width) array. Partial reads leave unread parts as ``None``.
    """

    step: int
    entities: np.ndarray | None = None
    scalars: tuple | None = None
    planes: dict[str, np.ndarray] | None = None


@dataclass(frozen=True, eq=False)
class ReplaySequence:
    """Time-major recording of one episode.

    ``declared_step_count`` is the episode length in steps; observations may
    cover only a subset of steps (sampling), and trailing steps with no
    entities survive serialization because the count is stored explicitly.
    ``observations`` is ``None`` for metadata-only reads.
    """

    schema: Schema
    metadata: ReplayMetadata
    observations: tuple[Observation, ...] | None
    declared_step_count: int

    def __post_init__(self):
        if self.observations is not None:
            object.__setattr__(self, "observations", tuple(self.observations))
        self.check()

    def check(self) -> None:
        if self.declared_step_count < 0:
            raise ValueError("declared_step_count must be non-negative")
        if self.metadata.duration_steps != self.declared_step_count:
            raise ValueError(
                f"metadata duration_steps {self.metadata.duration_steps} != "
                f"declared_step_count {self.declared_step_count}"
            )
        if self.observations is None:
            return
        dtype = self.schema.entity_dtype
        prev = -1
        for obs in self.observations:
            if obs.step <= prev:
                raise ValueError(f"observation steps not strictly increasing at step {obs.step}")
            prev = obs.step
            if obs.entities is not None and obs.entities.dtype != dtype:
                raise ValueError(f"entity dtype mismatch at step {obs.step}")
            if obs.planes is not None:
                for p in self.schema.plane_channels:
                    arr = obs.planes.get(p.name)
                    if arr is None or arr.shape != (p.height, p.width):
                        raise ValueError(f"plane {p.name} missing or mis-shaped at step {obs.step}")
        if prev >= self.declared_step_count:
            raise ValueError(
                f"observation step {prev} outside declared_step_count {self.declared_step_count}"
            )

    @property
    def steps(self) -> list[int]:
        return [o.step for o in self.observations or ()]

    def entity_count(self) -> int:
        return sum(len(o.entities) for o in self.observations or () if o.entities is not None)


def make_sequence(
    schema: Schema,
    observations,
    declared_step_count: int | None = None,
    *,
    replay_id: str = "replay",
    scenario_tag: str = "",
    action_count: int = 0,
    outcome_label: int | None = None,
) -> ReplaySequence:
    """Assemble a sequence, deriving the metadata fields that follow from the data."""
    observations = tuple(observations)
    if declared_step_count is None:
        declared_step_count = observations[-1].step + 1 if observations else 0
    peak = max((len(o.entities) for o in observations if o.entities is not None), default=0)
    meta = ReplayMetadata(
        replay_id=replay_id,
        scenario_tag=scenario_tag,
        duration_steps=declared_step_count,
        entity_count_peak=peak,
        action_count=action_count,
        outcome_label=outcome_label,
        schema_hash=schema.hash,
    )
    return ReplaySequence(schema, meta, observations, declared_step_count)


def canonicalize(seq: ReplaySequence) -> ReplaySequence:
    """Sort each observation's entities by instance id (stable)."""
    if seq.observations is None:
        return seq
    key = seq.schema.instance_id
    obs = []
    for o in seq.observations:
        ents = o.entities
        if ents is not None and len(ents) > 1:
            ents = ents[np.argsort(ents[key], kind="stable")]
        obs.append(Observation(o.step, ents, o.scalars, o.planes))
    return ReplaySequence(seq.schema, seq.metadata, obs, seq.declared_step_count)


def _scalars_bytes(schema: Schema, scalars) -> bytes | None:
    if scalars is None:
        return None
    return np.array([tuple(scalars)], dtype=schema.scalar_dtype).tobytes()


def observations_equal(schema: Schema, a: Observation, b: Observation) -> bool:
    """Bitwise equality (NaN-safe) of two observations under ``schema``."""
    if a.step != b.step:
        return False
    if (a.entities is None) != (b.entities is None):
        return False
    if a.entities is not None and (
        len(a.entities) != len(b.entities) or a.entities.tobytes() != b.entities.tobytes()
    ):
        return False
    if _scalars_bytes(schema, a.scalars) != _scalars_bytes(schema, b.scalars):
        return False
    if (a.planes is None) != (b.planes is None):
        return False
    if a.planes is not None:
        for p in schema.plane_channels:
            pa = np.asarray(a.planes[p.name], dtype=p.dtype)
            pb = np.asarray(b.planes[p.name], dtype=p.dtype)
            if not np.array_equal(pa, pb):
                return False
    return True


def sequences_equal(a: ReplaySequence, b: ReplaySequence) -> bool:
    if a.schema.hash != b.schema.hash or a.metadata != b.metadata:
        return False
    if a.declared_step_count != b.declared_step_count:
        return False
    if (a.observations is None) != (b.observations is None):
        return False
    if a.observations is None:
        return True
    if len(a.observations) != len(b.observations):
        return False
    return all(observations_equal(a.schema, x, y) for x, y in zip(a.observations, b.observations))
