"""Instance-major columnar serialization for time series of dynamic entity sets."""

from .container import (
    ContainerReader,
    ContainerWriter,
    ReadLevel,
    Section,
    db_append,
    db_create,
    db_finalize,
    db_open,
    db_read,
    db_verify,
)
from .layout import (
    FlattenedSoA,
    LayoutOrder,
    PackedPlane,
    flatten_sort,
    pack_bits,
    reconstruct,
    relayout,
    unpack_bits,
)
from .replay import (
    Observation,
    ReplayMetadata,
    ReplaySequence,
    canonicalize,
    make_sequence,
)
from .schema import FieldDescriptor, PlaneChannel, Schema, validate_schema
from .semantics import EventActivationTable, active_onehot, stabilize_identity

__version__ = "0.1.0"

__all__ = [
    "ContainerReader",
    "ContainerWriter",
    "EventActivationTable",
    "FieldDescriptor",
    "FlattenedSoA",
    "LayoutOrder",
    "Observation",
    "PackedPlane",
    "PlaneChannel",
    "ReadLevel",
    "ReplayMetadata",
    "ReplaySequence",
    "Schema",
    "Section",
    "active_onehot",
    "canonicalize",
    "db_append",
    "db_create",
    "db_finalize",
    "db_open",
    "db_read",
    "db_verify",
    "flatten_sort",
    "make_sequence",
    "pack_bits",
    "reconstruct",
    "relayout",
    "stabilize_identity",
    "unpack_bits",
    "validate_schema",
]
