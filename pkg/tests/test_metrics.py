import pytest

from agentsim.errors import InvalidInputError
from agentsim.metrics import (
    MetricsSummary, compare_report, format_report, pending_ratio, percentile,
)


def summary(**kw):
    base = {name: 1.0 for name in MetricsSummary.field_names()}
    base["requests_completed"] = 10
    base.update(kw)
    return MetricsSummary(**base)


def test_percentile():
    assert percentile([4.2], 0) == 4.2 and percentile([4.2], 73) == 4.2
    vals = list(range(1, 101))
    assert percentile(vals, 99) == 99
    assert percentile(vals, 50) == 50
    assert percentile(vals[::-1], 100) == 100
    with pytest.raises(InvalidInputError):
        percentile([], 50)
    with pytest.raises(InvalidInputError):
        percentile([1], 101)


def test_pending_ratio():
    assert pending_ratio(100, 100) == 0.0
    assert pending_ratio(100, 80) == 0.2
    assert pending_ratio(7, 0) == 1.0
    assert pending_ratio(0, 0) == 0.0
    with pytest.raises(InvalidInputError):
        pending_ratio(3, 4)


def test_identical_summaries_give_unit_ratios():
    s = summary()
    assert all(row["ratio"] == 1.0 for row in compare_report(s, s).values())


def test_ratio_examples():
    t = compare_report(summary(throughput=0.69, mean_latency=1066.05),
                       summary(throughput=2.36, mean_latency=266.50))
    assert round(t["throughput"]["ratio"], 2) == 3.42
    assert round(t["mean_latency"]["ratio"], 2) == 0.25
    assert t["throughput"]["improved"] is True and t["mean_latency"]["improved"] is True
    assert t["mean_latency"]["direction"] == "lower"


def test_zero_baseline():
    t = compare_report(summary(stall_ratio=0.0, pending_ratio=0.0),
                       summary(stall_ratio=0.1, pending_ratio=0.0))
    assert t["stall_ratio"]["ratio"] is None and t["stall_ratio"]["improved"] is None
    assert t["pending_ratio"]["ratio"] == 1.0


def test_schema_mismatch():
    d = summary().to_dict()
    bad = dict(d)
    bad.pop("p99")
    with pytest.raises(InvalidInputError, match="p99"):
        compare_report(d, bad)
    with pytest.raises(InvalidInputError):
        compare_report(d, {**d, "p50": "fast"})


def test_format_report_lists_every_metric():
    text = format_report(compare_report(summary(), summary(p99=2.0)))
    lines = text.splitlines()
    assert len(lines) == 1 + len(MetricsSummary.field_names())
    assert any(l.startswith("p99") and "2.00x" in l for l in lines)


def test_json_is_stable():
    s = summary()
    assert s.to_json() == summary().to_json()
    assert s.to_json().endswith("}\n")
