"""Command-line front end: ``replaycask <subcommand> ...``.

Exit codes: 0 success, 1 I/O or data errors, 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from . import bench
from .container import ContainerWriter, ReadLevel, verify
from .errors import ReplayCaskError, UnknownField
from .simgen import SamplingPolicy, derive_seeds, generate, load_spec, sample
from .store import MetadataStore, Predicate, index_build, query, stats


class UsageError(Exception):
    pass


def _emit(report: bench.BenchReport, out):
    text = report.to_csv()
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_convert(args):
    spec = load_spec(args.spec)
    try:
        policy = SamplingPolicy.parse(args.policy)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    seeds = derive_seeds(args.seed, args.count)
    writer = ContainerWriter(args.out, spec.schema)
    for s in seeds:
        writer.append(sample(generate(spec, s), policy))
    summary = writer.finalize()
    print(f"container,{args.out}")
    print(f"entries,{summary.entry_count}")
    print(f"total_bytes,{summary.total_bytes}")
    for name, size in summary.per_section_bytes.items():
        print(f"section_{name},{size}")


def cmd_bench_layout(args):
    _emit(bench.bench_layout(args.input), args.out)


def cmd_breakdown(args):
    _emit(bench.bench_breakdown(args.input), args.out)


def cmd_bench_read(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    try:
        level = ReadLevel.parse(args.level)
    except KeyError:
        raise UsageError(f"unknown level {args.level!r}") from None
    _emit(bench.bench_read(args.input, args.entry, level, args.trials), args.out)


def cmd_bench_parallel(args):
    counts = args.instances
    if any(n < 1 for n in counts):
        raise UsageError("--instances must be >= 1")
    _emit(bench.bench_parallel(args.spec, counts, seed=args.seed, policy=args.policy), args.out)


def cmd_build_index(args):
    store = index_build(args.containers)
    store.save(args.out)
    print(f"rows,{len(store)}")
    for path, msg in store.failures:
        print(f"failed,{path},{msg}", file=sys.stderr)
    return 1 if store.failures else 0


def _predicates(exprs):
    try:
        return [Predicate.parse(e) for e in exprs or ()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_query(args):
    store = MetadataStore.load(args.store)
    hits = query(store, _predicates(args.where))
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["container_path", "entry_ordinal"])
    writer.writerows(hits)


def cmd_stats(args):
    store = MetadataStore.load(args.store)
    try:
        table = stats(store, args.group_by, args.measure or ["count"], field=args.field, bins=args.bins)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cols = ["group"] + [c for c in ("count", "mean", "std", "histogram", "bin_edges") if table and c in table[0]]
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(cols)
    for row in table:
        writer.writerow([json.dumps(row[c]) if isinstance(row[c], list) else row[c] for c in cols])


def cmd_verify(args):
    report = verify(args.input)
    print(f"entries_ok,{report.entries_ok}")
    print(f"index_consistent,{str(report.index_consistent).lower()}")
    for entry, section in report.checksum_failures:
        print(f"checksum_failure,{entry},{section}")
    for problem in report.problems:
        print(f"problem,{problem}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaycask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="generate synthetic replays into a container")
    p.add_argument("--spec", required=True, help="workload spec file, or @w1 for the bundled reference")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--policy", default="every_step", help="every_step | on_action | every_n:N | every_n_or_action:N")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("bench-layout", help="compressed entity bytes for each dimension order")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_layout)

    p = sub.add_parser("breakdown", help="file bytes per section kind")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("bench-read", help="time partial and full reads of one entry")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--entry", type=int, default=0)
    p.add_argument("--level", default="full", help="metadata_only | scalars | planes | full")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_read)

    p = sub.add_parser("bench-parallel", help="simultaneous conversion processes")
    p.add_argument("--spec", required=True)
    p.add_argument("--instances", type=int, nargs="+", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--policy", default="on_action")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_parallel)

    p = sub.add_parser("build-index", help="extract metadata rows into a store file")
    p.add_argument("containers", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="rows matching all predicates, e.g. 'duration_steps>=5000'")
    p.add_argument("--store", required=True)
    p.add_argument("--where", action="append")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("stats", help="grouped aggregates over a store")
    p.add_argument("--store", required=True)
    p.add_argument("--group-by")
    p.add_argument("--measure", action="append", help="count | mean | std | histogram")
    p.add_argument("--field", default="duration_steps")
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("verify", help="check every section CRC and the entry index")
    p.add_argument("input")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (UsageError, UnknownField) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ReplayCaskError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
