"""Entity data layouts: instance-major flattening, its inverse, and bit packing.

The instance-major transform flattens (step, entity) pairs in recording
order, stable-sorts them by instance id so each entity's history becomes
contiguous, and splits the records into one column per field. Static and
slowly varying fields then form long runs that DEFLATE compresses well.
The step index of every record is kept for reconstruction.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptIndex, NonZeroPadding
from .replay import ReplaySequence
from .schema import Schema

INDEX_DTYPE = np.dtype("<u4")
_COUNT = struct.Struct("<Q")


class LayoutOrder(enum.Enum):
    """Dimension nesting orders for serializing entity data (outermost first)."""

    TNU = "timestep-unit-field"  # array of structs per step
    TUN = "timestep-field-unit"  # struct of arrays per step
    UTN = "field-timestep-unit"  # time-major columns
    UNT = "field-unit-timestep"  # instance-major columns


@dataclass(frozen=True, eq=False)
class FlattenedSoA:
    schema: Schema
    columns: dict[str, np.ndarray]
    indices: np.ndarray
    declared_step_count: int

    def __len__(self) -> int:
        return len(self.indices)

    def rows(self) -> np.ndarray:
        """Re-interleave the columns into a record array."""
        out = np.empty(len(self.indices), dtype=self.schema.entity_dtype)
        for name in self.schema.field_names:
            out[name] = self.columns[name]
        return out


def _time_major(seq: ReplaySequence) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate all observations' records and emit each record's step."""
    dtype = seq.schema.entity_dtype
    obs = [o for o in seq.observations if o.entities is not None and len(o.entities)]
    if not obs:
        return np.empty(0, dtype=dtype), np.empty(0, dtype=INDEX_DTYPE)
    flat = np.concatenate([o.entities for o in obs])
    steps = np.repeat(
        np.array([o.step for o in obs], dtype=INDEX_DTYPE),
        [len(o.entities) for o in obs],
    )
    return flat, steps


def flatten_sort(seq: ReplaySequence) -> FlattenedSoA:
    flat, steps = _time_major(seq)
    # stable: records of one instance keep their time order
    order = np.argsort(flat[seq.schema.instance_id], kind="stable")
    flat = flat[order]
    columns = {name: np.ascontiguousarray(flat[name]) for name in seq.schema.field_names}
    return FlattenedSoA(seq.schema, columns, steps[order], seq.declared_step_count)


def reconstruct(flat: FlattenedSoA) -> list[np.ndarray]:
    """Regroup flattened records by step; returns one record array per step.

    Record ``k`` lands in step ``indices[k]`` in flat-array order, so steps
    of a flatten_sort output come back sorted by instance id.
    """
    n = flat.declared_step_count
    indices = np.asarray(flat.indices)
    if len(indices) and int(indices.max()) >= n:
        bad = int(np.argmax(indices >= n))
        raise CorruptIndex(f"index[{bad}] = {int(indices[bad])} >= declared_step_count {n}")
    rows = flat.rows()
    if n == 0:
        return []
    order = np.argsort(indices, kind="stable")
    counts = np.bincount(indices, minlength=n) if len(indices) else np.zeros(n, dtype=np.int64)
    return np.split(rows[order], np.cumsum(counts)[:-1])


def encode_entities(flat: FlattenedSoA) -> bytes:
    """Entities section body: columns in schema order, indices, step count."""
    parts = [flat.columns[name].astype(flat.schema.entity_dtype[name], copy=False).tobytes()
             for name in flat.schema.field_names]
    parts.append(np.asarray(flat.indices, dtype=INDEX_DTYPE).tobytes())
    parts.append(_COUNT.pack(flat.declared_step_count))
    return b"".join(parts)


def decode_entities(schema: Schema, data: bytes) -> FlattenedSoA:
    dtype = schema.entity_dtype
    body = len(data) - _COUNT.size
    stride = dtype.itemsize + INDEX_DTYPE.itemsize
    if body < 0 or body % stride:
        raise CorruptIndex(f"entities section of {len(data)} bytes does not fit the schema layout")
    n = body // stride
    buf = memoryview(data)
    columns = {}
    pos = 0
    for name in schema.field_names:
        ft = dtype[name]
        columns[name] = np.frombuffer(buf, dtype=ft, count=n, offset=pos)
        pos += n * ft.itemsize
    indices = np.frombuffer(buf, dtype=INDEX_DTYPE, count=n, offset=pos)
    (declared,) = _COUNT.unpack_from(data, body)
    return FlattenedSoA(schema, columns, indices, declared)


def relayout(seq: ReplaySequence, order: LayoutOrder) -> bytes:
    """Serialize entity values in the given dimension order (pre-compression).

    Only UNT carries step indices (the Entities section body minus its
    trailing step count); the other orders are emitted ragged, without
    padding or counts, and exist for size comparisons.
    """
    order = LayoutOrder(order)
    names = seq.schema.field_names
    if order is LayoutOrder.UNT:
        return encode_entities(flatten_sort(seq))[: -_COUNT.size]
    obs = [o.entities for o in seq.observations if o.entities is not None and len(o.entities)]
    if order is LayoutOrder.TNU:
        return b"".join(e.tobytes() for e in obs)
    if order is LayoutOrder.TUN:
        return b"".join(e[name].tobytes() for e in obs for name in names)
    flat, _ = _time_major(seq)
    return b"".join(np.ascontiguousarray(flat[name]).tobytes() for name in names)


@dataclass(frozen=True)
class PackedPlane:
    width: int
    height: int
    data: bytes


def pack_bits(plane) -> PackedPlane:
    """Pack a 2-D boolean array row-major, least significant bit first."""
    arr = np.asarray(plane, dtype=bool)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {arr.shape}")
    height, width = arr.shape
    data = np.packbits(arr.ravel(), bitorder="little").tobytes()
    return PackedPlane(width, height, data)


def unpack_bits(packed: PackedPlane) -> np.ndarray:
    n = packed.width * packed.height
    if len(packed.data) != (n + 7) // 8:
        raise ValueError(f"{len(packed.data)} bytes cannot hold a {packed.width}x{packed.height} plane")
    tail = n % 8
    if tail and packed.data[-1] >> tail:
        raise NonZeroPadding(f"pad bits set in final byte 0x{packed.data[-1]:02x}")
    bits = np.unpackbits(np.frombuffer(packed.data, dtype=np.uint8), count=n, bitorder="little")
    return bits.astype(bool).reshape(packed.height, packed.width)
