import os

import pytest
from strategies import SMALL, TINY, random_sequence, tiny_sequence

from replaycask.bench import (
    REPORT_COLUMNS,
    BenchReport,
    bench_breakdown,
    bench_layout,
    bench_read,
    naive_entry_size,
    naive_stream_size,
    parse_report,
    section_breakdown,
)
from replaycask.container import ContainerWriter, ReadLevel
from replaycask.layout import LayoutOrder


def _small_container(path, n=3):
    with ContainerWriter(path, SMALL) as w:
        for s in range(n):
            w.append(random_sequence(SMALL, s, 50, list(range(0, 50, 5)), [12] * 10))
    return path


def test_report_std_dropped_for_single_trial():
    report = BenchReport("read", cores=2)
    report.add("a", mean_ms=1.0, std_ms=0.5, trials=1)
    report.add("b", mean_ms=1.0, std_ms=0.5, trials=3)
    rows = parse_report(report.to_csv())
    assert list(rows[0]) == list(REPORT_COLUMNS)
    assert rows[0]["std_ms"] == "" and rows[1]["std_ms"] == "0.5000"
    assert rows[0]["cores"] == "2"


def test_layout_report_has_four_sorted_rows(tmp_path):
    rows = parse_report(bench_layout(_small_container(tmp_path / "c")).to_csv())
    assert sorted(r["label"] for r in rows) == sorted(o.name for o in LayoutOrder)
    sizes = [int(r["size_bytes"]) for r in rows]
    assert sizes == sorted(sizes)


def test_layout_empty_replay_sizes_equal(tmp_path):
    with ContainerWriter(tmp_path / "c", TINY) as w:
        w.append(tiny_sequence([], declared=4))
    sizes = {int(r["size_bytes"]) for r in parse_report(bench_layout(tmp_path / "c").to_csv())}
    assert len(sizes) == 1


def test_breakdown_accounts_for_every_byte(tmp_path):
    path = _small_container(tmp_path / "c")
    parts = section_breakdown(path)
    assert sum(parts.values()) == os.path.getsize(path)
    rows = parse_report(bench_breakdown(path).to_csv())
    assert [r["label"] for r in rows] == ["header", "metadata", "scalars", "planes", "entities", "index"]


def test_breakdown_empty_container(tmp_path):
    with ContainerWriter(tmp_path / "c", TINY):
        pass
    parts = section_breakdown(tmp_path / "c")
    assert parts["metadata"] == parts["scalars"] == parts["planes"] == parts["entities"] == 0
    assert parts["header"] + parts["index"] == os.path.getsize(tmp_path / "c")


def test_bench_read(tmp_path):
    path = _small_container(tmp_path / "c")
    (row,) = parse_report(bench_read(path, 1, ReadLevel.FULL, trials=5).to_csv())
    assert row["trials"] == "5" and row["std_ms"] != ""
    (row,) = parse_report(bench_read(path, 1, ReadLevel.SCALARS, trials=1).to_csv())
    assert row["std_ms"] == ""
    with pytest.raises(ValueError):
        bench_read(path, 0, ReadLevel.FULL, trials=0)


def test_naive_sizes_exceed_payload():
    seq = random_sequence(SMALL, 1, 20, list(range(20)), [5] * 20)
    assert naive_entry_size(seq) > naive_stream_size(seq) > 0
