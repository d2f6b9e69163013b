"""Multi-replay container file.

Layout (all integers little-endian)::

    header   magic "TERC0001" | version u16 | schema_hash u64 | index_offset u64 | flags u32
    schema   length u32 | canonical schema text (utf-8)
    entries  per entry, four sections in order Metadata, Scalars, Planes, Entities:
             section_id u32 | uncompressed_len u64 | compressed_len u64 | crc32 u32 | payload
    index    entry_count u64 | per entry: id_len u32 | replay_id | byte_offset u64 | byte_length u64

Every payload is an independent zlib stream, so reading the leading
sections of an entry never touches the larger ones behind it. ``flags``
bit 0 marks a finalized file; bits 8-11 record the compression level.
"""

from __future__ import annotations

import enum
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    CorruptIndex,
    EntryOutOfRange,
    IoFailure,
    NonZeroPadding,
    SchemaInvalid,
    SchemaMismatch,
    UnfinalizedContainer,
    VersionUnsupported,
)
from .layout import decode_entities, encode_entities, flatten_sort, reconstruct
from .replay import Observation, ReplayMetadata, ReplaySequence
from .schema import Schema, validate_schema

MAGIC = b"TERC0001"
FORMAT_VERSION = 1
CODEC_LEVEL = 6

HEADER = struct.Struct("<8sHQQI")
SECTION = struct.Struct("<IQQI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_INDEX_TAIL = struct.Struct("<QQ")

FLAG_FINALIZED = 0x1
_LEVEL_SHIFT = 8
_STEP_DTYPE = np.dtype("<u4")


class Section(enum.IntEnum):
    METADATA = 0
    SCALARS = 1
    PLANES = 2
    ENTITIES = 3


class ReadLevel(enum.IntEnum):
    METADATA_ONLY = 0
    SCALARS = 1
    PLANES = 2
    FULL = 3

    @classmethod
    def parse(cls, text: str) -> ReadLevel:
        key = text.strip().lower().replace("-", "_")
        aliases = {"metadata": "metadata_only", "metadataonly": "metadata_only"}
        return cls[aliases.get(key, key).upper()]


# -- section bodies --------------------------------------------------------


def encode_scalars(seq: ReplaySequence) -> bytes:
    obs = seq.observations
    steps = np.array([o.step for o in obs], dtype=_STEP_DTYPE)
    parts = [_U64.pack(len(obs)), steps.tobytes()]
    if seq.schema.scalar_channels:
        rows = np.array([tuple(o.scalars) for o in obs], dtype=seq.schema.scalar_dtype)
        parts.extend(np.ascontiguousarray(rows[f.name]).tobytes() for f in seq.schema.scalar_channels)
    return b"".join(parts)


def decode_scalars(schema: Schema, data: bytes) -> tuple[list[int], list[tuple]]:
    (n,) = _U64.unpack_from(data, 0)
    buf = memoryview(data)
    pos = _U64.size
    expected = pos + n * (_STEP_DTYPE.itemsize + schema.scalar_dtype.itemsize)
    if expected != len(data):
        raise CorruptIndex(f"scalars section is {len(data)} bytes, layout needs {expected}")
    steps = np.frombuffer(buf, dtype=_STEP_DTYPE, count=n, offset=pos).tolist()
    pos += n * _STEP_DTYPE.itemsize
    if not schema.scalar_channels:
        return steps, [()] * n
    rows = np.empty(n, dtype=schema.scalar_dtype)
    for f in schema.scalar_channels:
        rows[f.name] = np.frombuffer(buf, dtype=f.dtype, count=n, offset=pos)
        pos += n * f.dtype.itemsize
    return steps, rows.tolist()


def encode_planes(seq: ReplaySequence) -> bytes:
    obs = seq.observations
    parts = [_U64.pack(len(obs))]
    for p in seq.schema.plane_channels:
        if not obs:
            continue
        stack = np.stack([np.asarray(o.planes[p.name]) for o in obs]).reshape(len(obs), -1)
        if p.element == "bool":
            # row-wise packbits pads each observation to a whole byte
            parts.append(np.packbits(stack.astype(bool), axis=1, bitorder="little").tobytes())
        else:
            parts.append(stack.astype(p.dtype).tobytes())
    return b"".join(parts)


def decode_planes(schema: Schema, data: bytes) -> list[dict[str, np.ndarray]]:
    (n,) = _U64.unpack_from(data, 0)
    expected = _U64.size + n * sum(p.encoded_size for p in schema.plane_channels)
    if expected != len(data):
        raise CorruptIndex(f"planes section is {len(data)} bytes, layout needs {expected}")
    out: list[dict[str, np.ndarray]] = [{} for _ in range(n)]
    buf = memoryview(data)
    pos = _U64.size
    for p in schema.plane_channels:
        size = p.encoded_size
        raw = np.frombuffer(buf, dtype=np.uint8, count=n * size, offset=pos).reshape(n, size)
        pos += n * size
        if p.element == "bool":
            tail = p.pixels % 8
            if tail and n and np.any(raw[:, -1] >> tail):
                raise NonZeroPadding(f"pad bits set in plane {p.name}")
            planes = np.unpackbits(raw, axis=1, count=p.pixels, bitorder="little").astype(bool)
        else:
            planes = raw.copy()
        planes = planes.reshape(n, p.height, p.width)
        for i in range(n):
            out[i][p.name] = planes[i]
    return out


# -- writer ----------------------------------------------------------------


@dataclass
class IndexEntry:
    replay_id: str
    byte_offset: int
    byte_length: int


@dataclass
class WriteSummary:
    entry_count: int
    total_bytes: int
    per_section_bytes: dict[str, int] = field(default_factory=dict)


def _pack_header(schema_hash: int, index_offset: int, flags: int) -> bytes:
    return HEADER.pack(MAGIC, FORMAT_VERSION, schema_hash, index_offset, flags)


def _pack_index(entries: list[IndexEntry]) -> bytes:
    parts = [_U64.pack(len(entries))]
    for e in entries:
        rid = e.replay_id.encode("utf-8")
        parts += [_U32.pack(len(rid)), rid, _INDEX_TAIL.pack(e.byte_offset, e.byte_length)]
    return b"".join(parts)


class ContainerWriter:
    """Streams replays into a container; holds only the entry index in memory."""

    def __init__(self, path, schema: Schema, level: int = CODEC_LEVEL):
        report = validate_schema(schema)
        if not report.ok:
            raise SchemaInvalid("; ".join(report.violations))
        self.path = os.fspath(path)
        self.schema = schema
        self.level = level
        self.entries: list[IndexEntry] = []
        self.section_bytes = {s.name.lower(): 0 for s in Section}
        self._summary: WriteSummary | None = None
        try:
            self._fh = open(self.path, "wb")
            text = schema.canonical_text().encode("utf-8")
            self._fh.write(_pack_header(schema.hash, 0, self._flags(False)))
            self._fh.write(_U32.pack(len(text)) + text)
            self._fh.flush()
        except OSError as exc:
            raise IoFailure(f"cannot create container {self.path}: {exc}") from exc
        self._pos = HEADER.size + _U32.size + len(text)

    def _flags(self, finalized: bool) -> int:
        return (FLAG_FINALIZED if finalized else 0) | (self.level & 0xF) << _LEVEL_SHIFT

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.finalize()

    def append(self, seq: ReplaySequence) -> int:
        if self._summary is not None:
            raise ValueError("container already finalized")
        if seq.schema.hash != self.schema.hash or seq.metadata.schema_hash != self.schema.hash:
            raise SchemaMismatch(
                f"sequence schema {seq.metadata.schema_hash:016x} != container {self.schema.hash:016x}"
            )
        bodies = [
            (Section.METADATA, seq.metadata.to_bytes()),
            (Section.SCALARS, encode_scalars(seq)),
            (Section.PLANES, encode_planes(seq)),
            (Section.ENTITIES, encode_entities(flatten_sort(seq))),
        ]
        start = self._pos
        try:
            for sid, body in bodies:
                payload = zlib.compress(body, self.level)
                self._fh.write(SECTION.pack(sid, len(body), len(payload), zlib.crc32(payload)))
                self._fh.write(payload)
                self._pos += SECTION.size + len(payload)
                self.section_bytes[sid.name.lower()] += len(payload)
        except OSError as exc:
            raise IoFailure(f"write to {self.path} failed: {exc}") from exc
        self.entries.append(IndexEntry(seq.metadata.replay_id, start, self._pos - start))
        return len(self.entries) - 1

    def finalize(self) -> WriteSummary:
        if self._summary is not None:
            return self._summary
        index = _pack_index(self.entries)
        try:
            index_offset = self._pos
            self._fh.write(index)
            self._fh.seek(0)
            self._fh.write(_pack_header(self.schema.hash, index_offset, self._flags(True)))
            self._fh.close()
        except OSError as exc:
            raise IoFailure(f"finalizing {self.path} failed: {exc}") from exc
        self._pos += len(index)
        self._summary = WriteSummary(len(self.entries), self._pos, dict(self.section_bytes))
        return self._summary


# -- reader ----------------------------------------------------------------


def _read_header(fd: int):
    raw = os.pread(fd, HEADER.size, 0)
    if len(raw) < HEADER.size or raw[:8] != MAGIC:
        raise BadMagic("not a replay container (bad magic)")
    magic, version, schema_hash, index_offset, flags = HEADER.unpack(raw)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version} not supported")
    (text_len,) = _U32.unpack(os.pread(fd, _U32.size, HEADER.size))
    text = os.pread(fd, text_len, HEADER.size + _U32.size)
    if len(text) != text_len:
        raise CorruptIndex("schema block truncated")
    return schema_hash, index_offset, flags, text.decode("utf-8"), HEADER.size + _U32.size + text_len


def _parse_index(data: bytes) -> list[IndexEntry]:
    (count,) = _U64.unpack_from(data, 0)
    pos = _U64.size
    entries = []
    for _ in range(count):
        (n,) = _U32.unpack_from(data, pos)
        rid = bytes(data[pos + 4 : pos + 4 + n]).decode("utf-8")
        pos += 4 + n
        offset, length = _INDEX_TAIL.unpack_from(data, pos)
        pos += _INDEX_TAIL.size
        entries.append(IndexEntry(rid, offset, length))
    if pos != len(data):
        raise CorruptIndex(f"{len(data) - pos} stray bytes after entry index")
    return entries


class ContainerReader:
    """Random-access reader over a finalized container.

    All reads are positional (``os.pread``), so one reader may serve
    concurrent ``read`` calls from several threads.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        try:
            self._fd = os.open(self.path, os.O_RDONLY)
        except OSError as exc:
            raise IoFailure(f"cannot open container {self.path}: {exc}") from exc
        try:
            self._load()
        except BaseException:
            os.close(self._fd)
            raise
        self._lock = threading.Lock()
        self.decompressed_bytes = 0

    def _load(self):
        schema_hash, index_offset, flags, text, data_start = _read_header(self._fd)
        if not flags & FLAG_FINALIZED:
            raise UnfinalizedContainer(f"{self.path} was never finalized")
        self.schema = Schema.from_canonical_text(text)
        if self.schema.hash != schema_hash:
            raise CorruptIndex("embedded schema does not match header hash")
        self.level = (flags >> _LEVEL_SHIFT) & 0xF
        size = os.fstat(self._fd).st_size
        if not data_start <= index_offset <= size:
            raise CorruptIndex(f"index offset {index_offset} outside file of {size} bytes")
        try:
            self.entries = _parse_index(os.pread(self._fd, size - index_offset, index_offset))
        except (struct.error, UnicodeDecodeError) as exc:
            raise CorruptIndex(f"entry index unreadable: {exc}") from exc
        self.data_start = data_start
        self.index_offset = index_offset

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def reset_counter(self):
        with self._lock:
            self.decompressed_bytes = 0

    def _section(self, entry: int, pos: int, expected: Section) -> tuple[bytes, int]:
        raw = os.pread(self._fd, SECTION.size, pos)
        if len(raw) != SECTION.size:
            raise CorruptIndex(f"entry {entry}: truncated section header")
        sid, ulen, clen, crc = SECTION.unpack(raw)
        if sid != expected:
            raise CorruptIndex(f"entry {entry}: expected section {expected.name}, found id {sid}")
        payload = os.pread(self._fd, clen, pos + SECTION.size)
        if len(payload) != clen or zlib.crc32(payload) != crc:
            raise ChecksumMismatch(f"entry {entry} section {expected.name}: CRC mismatch")
        body = zlib.decompress(payload)
        if len(body) != ulen:
            raise CorruptIndex(f"entry {entry} section {expected.name}: length mismatch")
        with self._lock:
            self.decompressed_bytes += ulen
        return body, pos + SECTION.size + clen

    def section_table(self, entry: int) -> list[tuple[Section, int, int]]:
        """(section, uncompressed_len, compressed_len) for an entry, without decompressing."""
        if not 0 <= entry < len(self.entries):
            raise EntryOutOfRange(f"entry {entry} not in [0, {len(self.entries)})")
        pos = self.entries[entry].byte_offset
        table = []
        for sid in Section:
            raw = os.pread(self._fd, SECTION.size, pos)
            if len(raw) != SECTION.size:
                raise CorruptIndex(f"entry {entry}: truncated section header")
            got, ulen, clen, _ = SECTION.unpack(raw)
            if got != sid:
                raise CorruptIndex(f"entry {entry}: expected section {sid.name}, found id {got}")
            table.append((sid, ulen, clen))
            pos += SECTION.size + clen
        return table

    def read_sections(self, entry: int, level: ReadLevel = ReadLevel.FULL) -> list[bytes]:
        """Decompressed bodies of the sections up to and including ``level``."""
        if not 0 <= entry < len(self.entries):
            raise EntryOutOfRange(f"entry {entry} not in [0, {len(self.entries)})")
        pos = self.entries[entry].byte_offset
        bodies = []
        for sid in Section:
            if sid > ReadLevel(level):
                break
            body, pos = self._section(entry, pos, sid)
            bodies.append(body)
        return bodies

    def read(self, entry: int, level: ReadLevel = ReadLevel.FULL) -> ReplaySequence:
        level = ReadLevel(level)
        bodies = self.read_sections(entry, level)
        schema = self.schema
        meta = ReplayMetadata.from_bytes(bodies[0])
        if level == ReadLevel.METADATA_ONLY:
            return ReplaySequence(schema, meta, None, meta.duration_steps)
        steps, scalars = decode_scalars(schema, bodies[1])
        planes = decode_planes(schema, bodies[2]) if level >= ReadLevel.PLANES else None
        if planes is not None and len(planes) != len(steps):
            raise CorruptIndex(f"entry {entry}: planes hold {len(planes)} observations, expected {len(steps)}")
        entities = None
        if level == ReadLevel.FULL:
            flat = decode_entities(schema, bodies[3])
            if flat.declared_step_count != meta.duration_steps:
                raise CorruptIndex(f"entry {entry}: entity step count disagrees with metadata")
            if steps and steps[-1] >= flat.declared_step_count:
                raise CorruptIndex(f"entry {entry}: observation step beyond declared step count")
            slots = reconstruct(flat)
            used = np.zeros(len(slots), dtype=bool)
            used[steps] = True
            if any(len(slots[i]) for i in np.flatnonzero(~used)):
                raise CorruptIndex(f"entry {entry}: entities recorded at unobserved steps")
            entities = [slots[s] for s in steps]
        obs = [
            Observation(
                s,
                entities[i] if entities is not None else None,
                tuple(scalars[i]),
                planes[i] if planes is not None else None,
            )
            for i, s in enumerate(steps)
        ]
        return ReplaySequence(schema, meta, obs, meta.duration_steps)


# -- verification ----------------------------------------------------------


@dataclass
class VerifyReport:
    entries_ok: int = 0
    checksum_failures: list[tuple[int, str]] = field(default_factory=list)
    index_consistent: bool = True
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.index_consistent and not self.checksum_failures and not self.problems


def _scan_entry(fd: int, pos: int, limit: int, entry: int, report: VerifyReport) -> int | None:
    """Check one entry's four sections; returns the end offset or None if unreadable."""
    clean = True
    for sid in Section:
        raw = os.pread(fd, SECTION.size, pos)
        if len(raw) != SECTION.size or pos + SECTION.size > limit:
            report.problems.append(f"entry {entry}: section {sid.name} header truncated")
            return None
        got, ulen, clen, crc = SECTION.unpack(raw)
        if got != sid:
            report.problems.append(f"entry {entry}: expected section {sid.name}, found id {got}")
            return None
        end = pos + SECTION.size + clen
        if end > limit:
            report.problems.append(f"entry {entry}: section {sid.name} runs past {limit}")
            return None
        payload = os.pread(fd, clen, pos + SECTION.size)
        if zlib.crc32(payload) != crc:
            report.checksum_failures.append((entry, sid.name))
            clean = False
        pos = end
    if clean:
        report.entries_ok += 1
    return pos


def verify(path) -> VerifyReport:
    """Revalidate every section CRC and cross-check the index against the data."""
    report = VerifyReport()
    fd = os.open(os.fspath(path), os.O_RDONLY)
    try:
        size = os.fstat(fd).st_size
        try:
            _, index_offset, flags, _, data_start = _read_header(fd)
        except (BadMagic, VersionUnsupported, CorruptIndex, struct.error) as exc:
            report.index_consistent = False
            report.problems.append(str(exc))
            return report
        entries = None
        if not flags & FLAG_FINALIZED:
            report.problems.append("container not finalized")
        elif not data_start <= index_offset <= size:
            report.problems.append(f"index offset {index_offset} outside file of {size} bytes")
        else:
            try:
                entries = _parse_index(os.pread(fd, size - index_offset, index_offset))
            except (struct.error, UnicodeDecodeError, CorruptIndex) as exc:
                report.problems.append(f"entry index unreadable: {exc}")
        if entries is None:
            report.index_consistent = False
            # fall back to walking entries sequentially up to the end of file
            pos, k = data_start, 0
            limit = index_offset if data_start <= index_offset <= size and flags & FLAG_FINALIZED else size
            while pos < limit:
                nxt = _scan_entry(fd, pos, limit, k, report)
                if nxt is None:
                    break
                pos, k = nxt, k + 1
            return report
        expected = data_start
        for k, e in enumerate(entries):
            if e.byte_offset != expected:
                report.index_consistent = False
                report.problems.append(f"entry {k}: offset {e.byte_offset}, expected {expected}")
            end = _scan_entry(fd, e.byte_offset, index_offset, k, report)
            if end is None:
                report.index_consistent = False
                expected = e.byte_offset + e.byte_length
                continue
            if end - e.byte_offset != e.byte_length:
                report.index_consistent = False
                report.problems.append(f"entry {k}: length {e.byte_length}, sections span {end - e.byte_offset}")
            expected = end
        if expected != index_offset:
            report.index_consistent = False
            report.problems.append(f"entries end at {expected}, index starts at {index_offset}")
        return report
    finally:
        os.close(fd)


# -- functional surface ------------------------------------------------------


def db_create(path, schema: Schema) -> ContainerWriter:
    return ContainerWriter(path, schema)


def db_append(writer: ContainerWriter, seq: ReplaySequence) -> int:
    return writer.append(seq)


def db_finalize(writer: ContainerWriter) -> WriteSummary:
    return writer.finalize()


def db_open(path) -> ContainerReader:
    return ContainerReader(path)


def db_read(reader: ContainerReader, entry: int, level: ReadLevel = ReadLevel.FULL) -> ReplaySequence:
    return reader.read(entry, level)


def db_verify(path) -> VerifyReport:
    return verify(path)
