"""Sweep reporting: aggregation, delimited/tabular output, figure rendering."""

import json

import pytest

from fedfraud.errors import ConfigError
from fedfraud.report import (
    aggregate,
    read_rows,
    render_figures,
    render_table,
    row_line,
    write_delimited,
    write_rows,
)


def rows_fixture():
    rows = []
    for eps, base in (("0.5", 0.1), ("inf", 0.3), ("0.01", 0.05)):
        for i, seed in enumerate((11, 22)):
            rows.append({
                "protocol": "orchestrated", "epsilon": eps, "seed": seed,
                "auc_pr": base + 0.01 * i, "auc_roc": 0.5 + base,
            })
    return rows


def test_row_line_sorted_and_stable():
    line = row_line({"b": 1, "a": 2})
    assert line == '{"a": 2, "b": 1}'


def test_write_read_roundtrip_and_append(tmp_path):
    path = tmp_path / "rows.ndjson"
    rows = rows_fixture()
    write_rows(path, rows[:2])
    write_rows(path, rows[2:], append=True)
    assert read_rows(path) == rows


def test_aggregate_orders_budgets_and_summarises():
    aggs = aggregate(rows_fixture())
    assert [a["epsilon"] for a in aggs] == ["0.01", "0.5", "inf"]  # inf sorts last
    mid = aggs[1]
    assert mid["repeats"] == 2
    assert mid["auc_pr"]["mean"] == pytest.approx(0.105)
    assert mid["auc_pr"]["std_error"] > 0
    assert mid["auc_pr"]["ci_low"] < 0.105 < mid["auc_pr"]["ci_high"]
    # seeds are identifiers, not metrics
    assert "seed" not in mid


def test_aggregate_single_sample_has_zero_spread():
    aggs = aggregate([{"protocol": "p2p", "epsilon": "1.0", "seed": 1, "auc_pr": 0.4}])
    assert aggs[0]["auc_pr"] == {"mean": 0.4, "std_error": 0.0, "ci_low": 0.4, "ci_high": 0.4}


def test_render_table_layout():
    table = render_table(aggregate(rows_fixture()))
    lines = table.splitlines()
    assert lines[0].split()[:3] == ["protocol", "epsilon", "n"]
    assert set(lines[1]) <= {"-", " "}
    assert len(lines) == 2 + 3  # header + rule + one line per budget
    assert "±" in lines[2]
    with pytest.raises(ConfigError):
        render_table([])


def test_write_delimited_parsable(tmp_path):
    path = tmp_path / "report.tsv"
    write_delimited(path, aggregate(rows_fixture()))
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:3] == ["protocol", "epsilon", "repeats"]
    assert "auc_pr_mean" in header and "auc_pr_ci_high" in header
    first = dict(zip(header, lines[1].split("\t")))
    assert first["epsilon"] == "0.01"
    assert float(first["auc_pr_mean"]) == pytest.approx(0.055)


def test_render_figures_writes_png(tmp_path):
    rows = rows_fixture()
    for row in rows:
        row.update(membership_f_score=2 / 3, membership_baseline=2 / 3,
                   inversion_mean_r2=0.0, attribute_accuracy=0.25,
                   attribute_frequency_baseline=0.25)
    paths = render_figures(aggregate(rows), tmp_path)
    names = sorted(p.split("/")[-1] for p in map(str, paths))
    assert names == ["attacks_vs_epsilon.png", "utility_vs_epsilon.png"]
    for p in paths:
        with open(p, "rb") as fh:
            assert fh.read(8) == b"\x89PNG\r\n\x1a\n"


def test_render_figures_utility_only(tmp_path):
    paths = render_figures(aggregate(rows_fixture()), tmp_path)
    assert [str(p).split("/")[-1] for p in paths] == ["utility_vs_epsilon.png"]
