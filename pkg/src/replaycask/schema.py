"""Runtime schema describing entity fields, scalar channels and planes.

A :class:`Schema` fixes the field order used by every serializer. Its
canonical text form is embedded in containers and hashed (64-bit FNV-1a)
to detect mismatched writers and readers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import SchemaInvalid

SCALAR_TYPES = {
    "u8": "<u1",
    "u16": "<u2",
    "u32": "<u4",
    "u64": "<u8",
    "i32": "<i4",
    "f32": "<f4",
    "f64": "<f8",
    "bool": "?",
}
UNSIGNED_TYPES = frozenset({"u8", "u16", "u32", "u64"})
DYNAMICS = frozenset({"static", "slow", "fast"})
ROLES = frozenset({"instance_id", "position", "quantity", "generic"})
PLANE_ELEMENTS = {"bool": "?", "u8": "<u1"}

DEFAULT_STEP_SECONDS = 1.0 / 22.4
CANONICAL_HEADER = "replaycask-schema 1"

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class FieldDescriptor:
    name: str
    scalar_type: str
    dynamics: str = "static"
    role: str = "generic"
    # Reported for quantity-role fields before the entity is first observed.
    default: int | float = 0

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(SCALAR_TYPES[self.scalar_type])


@dataclass(frozen=True)
class PlaneChannel:
    name: str
    width: int
    height: int
    element: str = "bool"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(PLANE_ELEMENTS[self.element])

    @property
    def pixels(self) -> int:
        return self.width * self.height

    @property
    def encoded_size(self) -> int:
        """Serialized bytes per observation (bit-packed for bool planes)."""
        if self.element == "bool":
            return (self.pixels + 7) // 8
        return self.pixels


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class Schema:
    entity_fields: tuple[FieldDescriptor, ...]
    scalar_channels: tuple[FieldDescriptor, ...] = ()
    plane_channels: tuple[PlaneChannel, ...] = ()
    step_seconds: float = DEFAULT_STEP_SECONDS

    def __post_init__(self):
        object.__setattr__(self, "entity_fields", tuple(self.entity_fields))
        object.__setattr__(self, "scalar_channels", tuple(self.scalar_channels))
        object.__setattr__(self, "plane_channels", tuple(self.plane_channels))

    # -- derived layout ---------------------------------------------------

    @cached_property
    def entity_dtype(self) -> np.dtype:
        """Packed little-endian record dtype, one member per entity field."""
        return np.dtype([(f.name, SCALAR_TYPES[f.scalar_type]) for f in self.entity_fields])

    @cached_property
    def scalar_dtype(self) -> np.dtype:
        return np.dtype([(f.name, SCALAR_TYPES[f.scalar_type]) for f in self.scalar_channels])

    @property
    def field_names(self) -> list[str]:
        return [f.name for f in self.entity_fields]

    @cached_property
    def instance_id(self) -> str:
        for f in self.entity_fields:
            if f.role == "instance_id":
                return f.name
        raise SchemaInvalid("no instance_id field")

    @property
    def position_fields(self) -> tuple[str, str] | None:
        names = [f.name for f in self.entity_fields if f.role == "position"]
        return (names[0], names[1]) if len(names) == 2 else None

    @property
    def quantity_fields(self) -> list[FieldDescriptor]:
        return [f for f in self.entity_fields if f.role == "quantity"]

    def records(self, rows=()) -> np.ndarray:
        """Build an entity record array from an iterable of tuples in field order."""
        return np.array([tuple(r) for r in rows], dtype=self.entity_dtype)

    # -- canonical text / hashing ----------------------------------------

    def canonical_text(self) -> str:
        lines = [CANONICAL_HEADER]
        for f in self.entity_fields:
            line = f"entity {f.name} {f.scalar_type} {f.dynamics} {f.role}"
            if f.role == "quantity":
                line += f" {f.default!r}"
            lines.append(line)
        for f in self.scalar_channels:
            lines.append(f"scalar {f.name} {f.scalar_type} {f.dynamics} {f.role}")
        for p in self.plane_channels:
            lines.append(f"plane {p.name} {p.width} {p.height} {p.element}")
        lines.append(f"step_seconds {self.step_seconds!r}")
        return "\n".join(lines) + "\n"

    @cached_property
    def hash(self) -> int:
        return fnv1a64(self.canonical_text().encode("utf-8"))

    @classmethod
    def from_canonical_text(cls, text: str) -> Schema:
        lines = text.splitlines()
        if not lines or lines[0] != CANONICAL_HEADER:
            raise SchemaInvalid("missing canonical schema header")
        entity, scalars, planes = [], [], []
        step_seconds = DEFAULT_STEP_SECONDS
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if not parts:
                continue
            kind = parts[0]
            try:
                if kind == "entity":
                    default = _parse_number(parts[5]) if len(parts) > 5 else 0
                    entity.append(FieldDescriptor(parts[1], parts[2], parts[3], parts[4], default))
                elif kind == "scalar":
                    scalars.append(FieldDescriptor(parts[1], parts[2], parts[3], parts[4]))
                elif kind == "plane":
                    planes.append(PlaneChannel(parts[1], int(parts[2]), int(parts[3]), parts[4]))
                elif kind == "step_seconds":
                    step_seconds = float(parts[1])
                else:
                    raise SchemaInvalid(f"line {lineno}: unknown entry kind {kind!r}")
            except IndexError:
                raise SchemaInvalid(f"line {lineno}: too few tokens") from None
        return cls(entity, scalars, planes, step_seconds)


def _parse_number(token: str) -> int | float:
    try:
        return int(token)
    except ValueError:
        return float(token)


def _check_fields(fields, where, violations):
    seen = set()
    for f in fields:
        if not _NAME_RE.match(f.name or ""):
            violations.append(f"invalid name {f.name!r} in {where}")
        if f.name in seen:
            violations.append(f"duplicate name {f.name}")
        seen.add(f.name)
        if f.scalar_type not in SCALAR_TYPES:
            violations.append(f"unknown scalar type {f.scalar_type!r} for {f.name}")
        if f.dynamics not in DYNAMICS:
            violations.append(f"unknown dynamics {f.dynamics!r} for {f.name}")
        if f.role not in ROLES:
            violations.append(f"unknown role {f.role!r} for {f.name}")


def validate_schema(schema: Schema) -> ValidationReport:
    """Check every schema invariant, collecting all violations."""
    violations: list[str] = []
    _check_fields(schema.entity_fields, "entity fields", violations)
    _check_fields(schema.scalar_channels, "scalar channels", violations)

    ids = [f for f in schema.entity_fields if f.role == "instance_id"]
    if not ids:
        violations.append("no instance_id field")
    elif len(ids) > 1:
        violations.append("multiple instance_id fields: " + ", ".join(f.name for f in ids))
    for f in ids:
        if f.scalar_type not in UNSIGNED_TYPES:
            violations.append(f"instance_id field {f.name} must be unsigned, got {f.scalar_type}")
    for f in schema.scalar_channels:
        if f.role != "generic":
            violations.append(f"scalar channel {f.name} must have role generic")

    positions = [f for f in schema.entity_fields if f.role == "position"]
    if len(positions) not in (0, 2):
        names = ", ".join(f.name for f in positions)
        violations.append(f"position role needs exactly one field pair, got {len(positions)}: {names}")

    seen = set()
    for p in schema.plane_channels:
        if not _NAME_RE.match(p.name or ""):
            violations.append(f"invalid name {p.name!r} in plane channels")
        if p.name in seen:
            violations.append(f"duplicate name {p.name}")
        seen.add(p.name)
        if p.width * p.height <= 0 or p.width < 0 or p.height < 0:
            violations.append(f"plane {p.name} has non-positive size {p.width}x{p.height}")
        if p.element not in PLANE_ELEMENTS:
            violations.append(f"plane {p.name} has unknown element {p.element!r}")

    if not schema.step_seconds > 0:
        violations.append(f"step_seconds must be positive, got {schema.step_seconds}")
    return ValidationReport(tuple(violations))


def warehouse_schema(step_seconds: float = DEFAULT_STEP_SECONDS) -> Schema:
    """The warehouse-robot schema used by the reference workload."""
    return Schema(
        entity_fields=[
            FieldDescriptor("robot_id", "u32", "static", "instance_id"),
            FieldDescriptor("robot_type", "u8", "static"),
            FieldDescriptor("x_pos", "f32", "fast", "position"),
            FieldDescriptor("y_pos", "f32", "fast", "position"),
            FieldDescriptor("payload_id", "u16", "slow"),
            FieldDescriptor("battery_charge", "u8", "slow"),
            FieldDescriptor("need_assistance", "bool", "slow"),
        ],
        scalar_channels=[
            FieldDescriptor("total_throughput", "f32", "fast"),
            FieldDescriptor("active_robots", "u16", "slow"),
        ],
        plane_channels=[PlaneChannel("occupancy", 64, 64, "bool")],
        step_seconds=step_seconds,
    )
