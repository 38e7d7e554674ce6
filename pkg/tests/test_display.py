import csv
import io
import json

import pytest
from pytest import approx

from detection_equity.display import (
    MISSING, render_ap_report, render_histogram, render_json, render_mapping, render_table,
    render_trajectory,
)
from detection_equity.errors import ValidationError
from detection_equity.matching import AbsentReport, APReport, GroupGapReport
from detection_equity.stats import RunAggregate
from detection_equity.trainer import SweepRow


def report(ap50, ap75=None):
    thresholds, values = (0.5,), (ap50,)
    if ap75 is not None:
        thresholds, values = (0.5, 0.75), (ap50, ap75)
    n = len(thresholds)
    return APReport(thresholds, values, n_gt=10, tp=(6,) * n, fp=(1,) * n, ignored=(0,) * n)


def md_cells(text, row=0):
    line = text.splitlines()[2 + row]
    return [c.strip() for c in line.strip("|").split("|")]


@pytest.fixture
def gap_report():
    return GroupGapReport(report(0.598), report(0.535), inequity=0.25, inequity_reverse=0.125, name="model")


def test_better_group_is_bolded(gap_report):
    cells = md_cells(render_table(gap_report))
    assert cells[:3] == ["model", "**59.8**", "53.5"]
    assert cells[-2:] == ["0.250", "0.125"]


def test_missing_metric_stays_plain(gap_report):
    cells = md_cells(render_table(gap_report))
    # AP75 is undefined for both groups
    assert cells[5:7] == [MISSING, MISSING]


def test_absent_group(gap_report):
    absent = GroupGapReport(report(0.5), AbsentReport("no DS persons"), name="m")
    cells = md_cells(render_table(absent))
    assert cells[1:3] == ["50.0", MISSING]
    assert render_table(absent, "json").count('"absent": true') == 1


def test_multiple_models_one_row_each(gap_report):
    other = GroupGapReport(report(0.4), report(0.45), name="other")
    text = render_table([gap_report, other])
    assert md_cells(text, 1)[:3] == ["other", "40.0", "**45.0**"]


def test_json_and_markdown_agree(gap_report):
    data = json.loads(render_table(gap_report, "json"))[0]
    cells = md_cells(render_table(gap_report))
    assert float(cells[1].strip("*")) == approx(100 * data["LS"]["ap"], abs=0.05)
    assert float(cells[2].strip("*")) == approx(100 * data["DS"]["ap"], abs=0.05)
    assert float(cells[-2]) == approx(data["inequity"], abs=5e-4)
    assert data["gap"]["AP"] == approx(0.598 - 0.535)


def test_csv_table(gap_report):
    rows = list(csv.DictReader(io.StringIO(render_table(gap_report, "csv"))))
    assert len(rows) == 1
    assert float(rows[0]["AP_LS"]) == approx(0.598)
    assert rows[0]["AP75_LS"] == ""


def test_empty_sweep_is_header_only():
    assert render_table([]) == "| alpha_DS | metric | LS | DS | gap |\n|---|---|---|---|---|\n"


def test_sweep_rows():
    rows = [
        SweepRow(5.0, "loss", RunAggregate(0.5, 0.1, 10), RunAggregate(0.7, 0.2, 10)),
        SweepRow(5.0, "AP", RunAggregate(0.6, 0.01, 10), RunAggregate(0.65, 0.02, 10)),
    ]
    text = render_table(rows)
    assert md_cells(text, 0) == ["5", "loss", "**0.500 ± 0.100**", "0.700 ± 0.200", "-0.200"]
    assert md_cells(text, 1) == ["5", "AP", "60.0 ± 1.0", "**65.0 ± 2.0**", "-5.0"]
    parsed = list(csv.DictReader(io.StringIO(render_table(rows, "csv"))))
    assert parsed[0]["runs"] == "10"


def test_values_printing_alike_are_not_bolded():
    close = GroupGapReport(report(0.5981), report(0.5979), name="close")
    assert md_cells(render_table(close))[1:3] == ["59.8", "59.8"]
    rows = [
        SweepRow(2.0, "loss", RunAggregate(0.5001, 0.1, 3), RunAggregate(0.4999, 0.1, 3)),
        SweepRow(2.0, "AP", RunAggregate(0.6001, 0.01, 3), RunAggregate(0.5999, 0.02, 3)),
    ]
    text = render_table(rows)
    assert "**" not in text
    assert md_cells(text, 1)[2:4] == ["60.0 ± 1.0", "60.0 ± 2.0"]


def test_single_run_has_no_spread():
    row = SweepRow(1.0, "AP50", RunAggregate(0.5, 0.0, 1), RunAggregate(0.5, 0.0, 1))
    assert md_cells(render_table([row]))[2:4] == ["50.0", "50.0"]


def test_ap_report_formats():
    r = report(0.75, 0.25)
    assert json.loads(render_ap_report(r))["ap"] == approx(0.5)
    md = render_ap_report(r, "md")
    assert md_cells(md, 2) == ["AP", "50.0", "", "", ""]
    assert render_ap_report(AbsentReport("empty"), "md").count("\n") == 2


def test_histogram_and_mapping():
    assert md_cells(render_histogram({"LLL": 3, "LLD": 1}, "md"), 1) == ["LLD", "1"]
    assert render_mapping({"width": 0.5, "n": 4}, "csv") == "key,value\nn,4\nwidth,0.5\n"


def test_trajectory_csv():
    text = render_trajectory([{"iteration": 0, "group": "LS", "loss": 0.7, "ap50_toy": None}])
    assert text == "iteration,group,loss,ap50_toy\n0,LS,0.7,\n"


def test_json_is_stable():
    assert render_json({"b": 1, "a": 2}) == render_json({"a": 2, "b": 1})


def test_unknown_format(gap_report):
    with pytest.raises(ValidationError):
        render_table(gap_report, "xml")
