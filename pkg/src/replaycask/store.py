"""Queryable sidecar of replay metadata.

Rows are extracted by reading only the Metadata section of each container
entry. The store persists as one file: a text header naming each column
and its numpy dtype, followed by the fixed-width binary columns.
"""

from __future__ import annotations

import csv
import io
import math
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import ContainerReader, ReadLevel
from .errors import ReplayCaskError, UnknownField

STORE_HEADER = "replaycask-store 1"
NULL_INT = np.iinfo(np.int64).min

# (name, kind) in row order; kind is str, int, uint or float
ROW_FIELDS = (
    ("container_path", "str"),
    ("entry_ordinal", "int"),
    ("replay_id", "str"),
    ("scenario_tag", "str"),
    ("duration_steps", "int"),
    ("entity_count_peak", "int"),
    ("action_count", "int"),
    ("outcome_label", "int"),
    ("schema_hash", "uint"),
    ("apm_analog", "float"),
)
FIELD_KINDS = dict(ROW_FIELDS)
_NUMPY_KIND = {"int": "<i8", "uint": "<u8", "float": "<f8"}

OPS = {
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
    "==": operator.eq,
    ">=": operator.ge,
    ">": operator.gt,
}
_PRED_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(<=|>=|==|=|<|>|≤|≥)\s*(.*?)\s*$")


def apm(action_count: int, duration_steps: int, step_seconds: float) -> float:
    """Actions per minute; zero for zero-length replays."""
    minutes = duration_steps * step_seconds / 60.0
    return action_count / minutes if minutes > 0 else 0.0


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: object

    def __post_init__(self):
        op = {"≤": "<=", "≥": ">=", "==": "="}.get(self.op, self.op)
        if op not in OPS:
            raise ValueError(f"unknown operator {self.op!r}")
        object.__setattr__(self, "op", op)

    @classmethod
    def parse(cls, text: str) -> Predicate:
        m = _PRED_RE.match(text)
        if not m:
            raise ValueError(f"cannot parse predicate {text!r}")
        name, op, raw = m.groups()
        kind = FIELD_KINDS.get(name)
        if kind is None:
            raise UnknownField(f"unknown field {name!r}")
        if kind == "str":
            return cls(name, op, raw.strip("'\""))
        try:
            value = int(raw)
        except ValueError:
            value = float(raw)
        return cls(name, op, value)


FilterSpec = list  # conjunction of Predicate


def check_filter(spec) -> None:
    for p in spec:
        kind = FIELD_KINDS.get(p.field)
        if kind is None:
            raise UnknownField(f"unknown field {p.field!r}")
        if kind == "str" and p.op != "=":
            raise ValueError(f"string field {p.field} only supports '='")


@dataclass
class MetadataStore:
    columns: dict[str, np.ndarray]
    failures: list[tuple[str, str]] = field(default_factory=list)
    decompressed_bytes: int = 0

    def __len__(self) -> int:
        return len(self.columns["entry_ordinal"])

    @classmethod
    def from_rows(cls, rows) -> MetadataStore:
        rows = list(rows)
        columns = {}
        for name, kind in ROW_FIELDS:
            values = [r[name] for r in rows]
            if kind == "str":
                encoded = [v.encode("utf-8") for v in values]
                width = max((len(v) for v in encoded), default=0) or 1
                columns[name] = np.array(encoded, dtype=f"S{width}")
            elif kind == "int":
                columns[name] = np.array([NULL_INT if v is None else v for v in values], dtype="<i8")
            else:
                columns[name] = np.array(values, dtype=_NUMPY_KIND[kind])
        return cls(columns)

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self)):
            row = {}
            for name, kind in ROW_FIELDS:
                v = self.columns[name][i]
                if kind == "str":
                    row[name] = v.decode("utf-8")
                elif kind == "float":
                    row[name] = float(v)
                else:
                    v = int(v)
                    row[name] = None if (kind == "int" and v == NULL_INT) else v
            out.append(row)
        return out

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        lines = [STORE_HEADER, f"rows {len(self)}"]
        for name, _ in ROW_FIELDS:
            lines.append(f"column {name} {self.columns[name].dtype.str}")
        lines.append("end")
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            for name, _ in ROW_FIELDS:
                fh.write(np.ascontiguousarray(self.columns[name]).tobytes())

    @classmethod
    def load(cls, path) -> MetadataStore:
        data = Path(path).read_bytes()
        end = data.find(b"\nend\n")
        if not data.startswith(STORE_HEADER.encode()) or end < 0:
            raise ReplayCaskError(f"{path} is not a metadata store")
        header = data[:end].decode("ascii").splitlines()
        n = int(header[1].split()[1])
        pos = end + len(b"\nend\n")
        columns = {}
        for line in header[2:]:
            _, name, dtype = line.split()
            dt = np.dtype(dtype)
            columns[name] = np.frombuffer(data, dtype=dt, count=n, offset=pos).copy()
            pos += n * dt.itemsize
        missing = [name for name, _ in ROW_FIELDS if name not in columns]
        if missing or pos != len(data):
            raise ReplayCaskError(f"{path}: malformed store (missing {missing})")
        return cls(columns)

    def to_csv(self, fh=None) -> str:
        buf = fh or io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([name for name, _ in ROW_FIELDS])
        for row in self.rows():
            writer.writerow(["" if row[n] is None else row[n] for n, _ in ROW_FIELDS])
        return buf.getvalue() if fh is None else ""


def index_build(container_paths) -> MetadataStore:
    """One row per entry across all containers, from Metadata sections only."""
    rows, failures, decompressed = [], [], 0
    for path in container_paths:
        path = str(path)
        try:
            with ContainerReader(path) as reader:
                step_seconds = reader.schema.step_seconds
                for k in range(reader.entry_count):
                    meta = reader.read(k, ReadLevel.METADATA_ONLY).metadata
                    rows.append(
                        {
                            "container_path": path,
                            "entry_ordinal": k,
                            "replay_id": meta.replay_id,
                            "scenario_tag": meta.scenario_tag,
                            "duration_steps": meta.duration_steps,
                            "entity_count_peak": meta.entity_count_peak,
                            "action_count": meta.action_count,
                            "outcome_label": meta.outcome_label,
                            "schema_hash": meta.schema_hash,
                            "apm_analog": apm(meta.action_count, meta.duration_steps, step_seconds),
                        }
                    )
                decompressed += reader.decompressed_bytes
        except (ReplayCaskError, OSError) as exc:
            failures.append((path, f"{type(exc).__name__}: {exc}"))
    store = MetadataStore.from_rows(rows)
    store.failures = failures
    store.decompressed_bytes = decompressed
    return store


def _predicate_mask(store: MetadataStore, p: Predicate) -> np.ndarray:
    col = store.columns[p.field]
    kind = FIELD_KINDS[p.field]
    if kind == "str":
        return col == str(p.value).encode("utf-8")
    mask = OPS[p.op](col, p.value)
    if kind == "int":
        mask &= col != NULL_INT
    return mask


def query(store: MetadataStore, spec) -> list[tuple[str, int]]:
    """(container_path, entry_ordinal) of rows satisfying every predicate."""
    check_filter(spec)
    mask = np.ones(len(store), dtype=bool)
    for p in spec:
        mask &= _predicate_mask(store, p)
    hits = np.flatnonzero(mask)
    paths = store.columns["container_path"][hits]
    ords = store.columns["entry_ordinal"][hits]
    order = np.lexsort((ords, paths))
    return [(paths[i].decode("utf-8"), int(ords[i])) for i in order]


MEASURES = ("count", "mean", "std", "histogram")


def stats(
    store: MetadataStore,
    group_by: str | None,
    measures=("count", "mean", "std"),
    field: str = "duration_steps",
    bins: int = 10,
) -> list[dict]:
    """Per-group aggregates of ``field``.

    ``std`` is the unbiased (n-1) estimate and NaN for single-row groups.
    Histogram edges span the whole store so groups share bins.
    """
    for name in (group_by, field):
        if name is not None and name not in FIELD_KINDS:
            raise UnknownField(f"unknown field {name!r}")
    if group_by is not None and FIELD_KINDS[group_by] == "float":
        raise ValueError(f"cannot group by continuous field {group_by}")
    if FIELD_KINDS[field] == "str":
        raise ValueError(f"cannot aggregate string field {field}")
    measures = [m.split("(")[0] for m in measures]
    for m in measures:
        if m not in MEASURES:
            raise ValueError(f"unknown measure {m!r}")

    rows = store.rows()
    values = np.array([np.nan if r[field] is None else r[field] for r in rows], dtype=float)
    edges = None
    if "histogram" in measures:
        finite = values[np.isfinite(values)]
        span = (finite.min(), finite.max()) if len(finite) else (0.0, 1.0)
        edges = np.histogram_bin_edges(finite, bins=bins, range=span)

    groups: dict = {}
    for r, v in zip(rows, values):
        groups.setdefault(r[group_by] if group_by else "all", []).append(v)

    def sort_key(k):
        return (k is None, str(type(k)), k if k is not None else 0)

    table = []
    for key in sorted(groups, key=sort_key):
        vals = np.array([v for v in groups[key] if not math.isnan(v)])
        out = {"group": key, "count": len(groups[key])}
        if "mean" in measures:
            out["mean"] = float(vals.mean()) if len(vals) else math.nan
        if "std" in measures:
            out["std"] = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
        if "histogram" in measures:
            counts, _ = np.histogram(vals, bins=edges)
            out["histogram"] = counts.tolist()
            out["bin_edges"] = edges.tolist()
        if "count" not in measures:
            out.pop("count")
        table.append(out)
    return table
