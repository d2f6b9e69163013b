"""Benchmarks: layout sizes, section breakdown, read latency, parallel conversion."""

from __future__ import annotations

import csv
import io
import multiprocessing as mp
import os
import resource
import statistics
import struct
import tempfile
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import psutil

from .container import (
    CODEC_LEVEL,
    SECTION,
    ContainerReader,
    ContainerWriter,
    ReadLevel,
    Section,
)
from .layout import LayoutOrder, relayout
from .replay import ReplaySequence

REPORT_COLUMNS = ("kind", "label", "size_bytes", "mean_ms", "std_ms", "trials", "peak_rss_bytes", "cores")
POLL_HZ = 20


def core_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class BenchReport:
    kind: str
    rows: list[dict] = field(default_factory=list)
    cores: int = field(default_factory=core_count)

    def add(self, label, **values):
        trials = values.get("trials")
        if trials is not None and trials < 2:
            values.pop("std_ms", None)
        self.rows.append({"label": label, **values})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            full = {"kind": self.kind, "cores": self.cores, **row}
            writer.writerow([_fmt(full.get(c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def parse_report(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


# -- naive baseline --------------------------------------------------------------

_OBS_HEAD = struct.Struct("<II")


def naive_observation_bytes(seq: ReplaySequence, obs) -> bytes:
    """One observation as gathered: step, entity count, scalars, planes, records."""
    schema = seq.schema
    parts = [_OBS_HEAD.pack(obs.step, len(obs.entities))]
    if schema.scalar_channels:
        parts.append(np.array([tuple(obs.scalars)], dtype=schema.scalar_dtype).tobytes())
    for p in schema.plane_channels:
        plane = np.asarray(obs.planes[p.name])
        if p.element == "bool":
            parts.append(np.packbits(plane.astype(bool).ravel(), bitorder="little").tobytes())
        else:
            parts.append(plane.astype(p.dtype).tobytes())
    parts.append(obs.entities.tobytes())
    return b"".join(parts)


def naive_entry_size(seq: ReplaySequence, level: int = CODEC_LEVEL) -> int:
    """Bytes for an entry written as one compressed section per observation."""
    size = SECTION.size + len(zlib.compress(seq.metadata.to_bytes(), level))
    for obs in seq.observations:
        size += SECTION.size + len(zlib.compress(naive_observation_bytes(seq, obs), level))
    return size


def naive_stream_size(seq: ReplaySequence, level: int = CODEC_LEVEL) -> int:
    """Bytes for the same time-major records compressed as one stream per entry."""
    body = b"".join(naive_observation_bytes(seq, o) for o in seq.observations)
    return (
        2 * SECTION.size
        + len(zlib.compress(seq.metadata.to_bytes(), level))
        + len(zlib.compress(body, level))
    )


# -- reports ---------------------------------------------------------------------


def layout_sizes(path, level: int = CODEC_LEVEL) -> dict[LayoutOrder, int]:
    totals = {order: 0 for order in LayoutOrder}
    with ContainerReader(path) as reader:
        for k in range(reader.entry_count):
            seq = reader.read(k, ReadLevel.FULL)
            for order in LayoutOrder:
                totals[order] += len(zlib.compress(relayout(seq, order), level))
    return totals


def bench_layout(path) -> BenchReport:
    report = BenchReport("layout")
    sizes = layout_sizes(path)
    for order, size in sorted(sizes.items(), key=lambda kv: (kv[1], kv[0].name)):
        report.add(order.name, size_bytes=size)
    return report


def section_breakdown(path) -> dict[str, int]:
    """File bytes attributed to header, each section kind (incl. headers), and index."""
    out = {"header": 0, **{s.name.lower(): 0 for s in Section}, "index": 0}
    with ContainerReader(path) as reader:
        out["header"] = reader.data_start
        for k in range(reader.entry_count):
            for sid, _, clen in reader.section_table(k):
                out[sid.name.lower()] += SECTION.size + clen
        out["index"] = os.path.getsize(path) - reader.index_offset
    return out


def bench_breakdown(path) -> BenchReport:
    report = BenchReport("breakdown")
    for label, size in section_breakdown(path).items():
        report.add(label, size_bytes=size)
    return report


def time_reads(reader: ContainerReader, entry: int, level: ReadLevel, trials: int):
    """Wall times in ms and decompressed bytes per read."""
    times = []
    per_read = 0
    for _ in range(trials):
        before = reader.decompressed_bytes
        t0 = time.perf_counter()
        reader.read(entry, level)
        times.append((time.perf_counter() - t0) * 1e3)
        per_read = reader.decompressed_bytes - before
    return times, per_read


def bench_read(path, entry: int, level: ReadLevel, trials: int = 100) -> BenchReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = BenchReport("read")
    with ContainerReader(path) as reader:
        times, per_read = time_reads(reader, entry, level, trials)
    report.add(
        f"{ReadLevel(level).name.lower()}[{entry}]",
        size_bytes=per_read,
        mean_ms=statistics.fmean(times),
        std_ms=statistics.stdev(times) if trials > 1 else None,
        trials=trials,
    )
    return report


# -- parallel conversion ---------------------------------------------------------


def _convert_worker(spec_path, seed, policy, out_path, queue):
    from .simgen import SamplingPolicy, generate, load_spec, sample

    t0 = time.perf_counter()
    try:
        spec = load_spec(spec_path)
        seq = sample(generate(spec, seed), SamplingPolicy.parse(policy))
        writer = ContainerWriter(out_path, spec.schema)
        writer.append(seq)
        writer.finalize()
        error = None
    except Exception as exc:  # reported per worker
        error = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0
    maxrss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    queue.put((out_path, wall, maxrss, error))


def run_parallel(spec_path, instances: int, seed: int = 42, policy: str = "on_action", workdir=None):
    """Start ``instances`` conversion processes at once; poll their RSS until done.

    Returns one dict per worker with wall time (s), peak RSS (bytes) and error.
    """
    if instances < 1:
        raise ValueError("instances must be >= 1")
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="replaycask-par-")
        workdir = tmp.name
    try:
        procs = []
        for i in range(instances):
            out = os.path.join(workdir, f"worker{i}.terc")
            p = ctx.Process(target=_convert_worker, args=(str(spec_path), seed, policy, out, queue))
            procs.append((out, p))
        for _, p in procs:
            p.start()
        peaks = {out: 0 for out, _ in procs}
        handles = {}
        for out, p in procs:
            try:
                handles[out] = psutil.Process(p.pid)
            except psutil.NoSuchProcess:
                pass
        results = {}
        while len(results) < instances:
            for out, h in list(handles.items()):
                try:
                    peaks[out] = max(peaks[out], h.memory_info().rss)
                except psutil.Error:
                    handles.pop(out)
            while not queue.empty():
                out, wall, maxrss, error = queue.get()
                results[out] = (wall, maxrss, error)
            if all(not p.is_alive() for _, p in procs) and queue.empty() and len(results) < instances:
                for out, p in procs:
                    results.setdefault(out, (float("nan"), 0, f"worker exited with code {p.exitcode}"))
            time.sleep(1.0 / POLL_HZ)
        for _, p in procs:
            p.join()
        rows = []
        for i, (out, _) in enumerate(procs):
            wall, maxrss, error = results[out]
            rows.append({"worker": i, "wall_s": wall, "peak_rss_bytes": max(peaks[out], maxrss), "error": error})
        return rows
    finally:
        if tmp is not None:
            tmp.cleanup()


def bench_parallel(spec_path, instance_counts, seed: int = 42, policy: str = "on_action") -> BenchReport:
    report = BenchReport("parallel")
    for n in instance_counts:
        rows = run_parallel(spec_path, n, seed=seed, policy=policy)
        errors = [r["error"] for r in rows if r["error"]]
        if errors:
            raise RuntimeError(f"{len(errors)} of {n} workers failed: {errors[0]}")
        walls_ms = [r["wall_s"] * 1e3 for r in rows]
        report.add(
            f"N={n}",
            mean_ms=statistics.fmean(walls_ms),
            std_ms=statistics.stdev(walls_ms) if n > 1 else None,
            trials=n,
            peak_rss_bytes=max(r["peak_rss_bytes"] for r in rows),
        )
    return report
