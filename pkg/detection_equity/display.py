"""Report rendering.

Every renderer returns text and is a pure function of its input, so a
report written twice is byte-identical. AP values appear as percentages
with one decimal; multi-run values carry "±" and the standard deviation.
In Markdown tables the better value of each LS / DS pair is bolded.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Callable, Iterable, Sequence

from detection_equity.errors import ValidationError
from detection_equity.matching import METRICS, AbsentReport, APReport, GroupGapReport
from detection_equity.stats import RunAggregate
from detection_equity.trainer import SweepRow

FORMATS = ("json", "csv", "md")
MISSING = "n/a"
PLUS_MINUS = "±"


# ── Cell formatting ──────────────────────────────────────────────

def pct(value: float | None) -> str:
    return MISSING if value is None else f"{100.0 * value:.1f}"


def _number(value: float | None, metric: str) -> str:
    if value is None:
        return MISSING
    return f"{value:.3f}" if metric == "loss" else pct(value)


def _mean_std(agg: RunAggregate, metric: str) -> str:
    if agg.run_count == 1:
        return _number(agg.mean, metric)
    std = f"{agg.std:.3f}" if metric == "loss" else f"{100.0 * agg.std:.1f}"
    return f"{_number(agg.mean, metric)} {PLUS_MINUS} {std}"


def _bold(text: str) -> str:
    return f"**{text}**"


def _pair(
    ls: float | None,
    ds: float | None,
    ls_text: str,
    ds_text: str,
    lower_is_better: bool = False,
    shown: Callable[[float], str] = pct,
) -> list[str]:
    """Bold the strictly better of an LS / DS pair; ties and gaps stay plain.

    Values are compared as ``shown`` prints them, so two cells reading the
    same number are a tie.
    """
    if ls is None or ds is None:
        return [ls_text, ds_text]
    ls_shown, ds_shown = float(shown(ls)), float(shown(ds))
    if ls_shown == ds_shown:
        return [ls_text, ds_text]
    ls_wins = (ls_shown < ds_shown) if lower_is_better else (ls_shown > ds_shown)
    return [_bold(ls_text), ds_text] if ls_wins else [ls_text, _bold(ds_text)]


def _md(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(["" if v is None else v for v in row] for row in rows)
    return buf.getvalue()


def render_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _check_format(fmt: str) -> None:
    if fmt not in FORMATS:
        raise ValidationError(f"Unknown output format {fmt!r}; expected one of {FORMATS}")


# ── Single-report rendering ──────────────────────────────────────

def render_ap_report(report: APReport | AbsentReport, fmt: str = "json") -> str:
    _check_format(fmt)
    if fmt == "json":
        return render_json(report.to_dict())
    if isinstance(report, AbsentReport):
        rows = []
    else:
        rows = list(zip(report.thresholds, report.per_threshold, report.tp, report.fp, report.ignored))
    if fmt == "csv":
        return _csv(["iou", "ap", "tp", "fp", "ignored"], rows)
    md_rows = [[f"{t:.2f}", pct(ap), str(tp), str(fp), str(ig)] for t, ap, tp, fp, ig in rows]
    if isinstance(report, APReport):
        md_rows.append(["AP", pct(report.ap), "", "", ""])
    return _md(["IoU", "AP", "TP", "FP", "Ignored"], md_rows)


# ── Group tables ─────────────────────────────────────────────────

GAP_HEADER = ["Model", *(f"{m} {g}" for m in METRICS for g in ("LS", "DS")), "Inequity LS>DS", "Inequity DS>LS"]


def _gap_md_row(report: GroupGapReport) -> list[str]:
    row = [report.name or "-"]
    for metric in METRICS:
        ls, ds = report.report_ls.metric(metric), report.report_ds.metric(metric)
        row.extend(_pair(ls, ds, pct(ls), pct(ds)))
    row.append(MISSING if report.inequity is None else f"{report.inequity:.3f}")
    row.append(MISSING if report.inequity_reverse is None else f"{report.inequity_reverse:.3f}")
    return row


def _gap_csv_row(report: GroupGapReport) -> list:
    row = [report.name]
    for metric in METRICS:
        row.extend([report.report_ls.metric(metric), report.report_ds.metric(metric)])
    row.extend([report.inequity, report.inequity_reverse])
    return row


SWEEP_HEADER = ["alpha_DS", "metric", "LS", "DS", "gap"]
SWEEP_CSV_HEADER = ["alpha_DS", "metric", "LS_mean", "LS_std", "DS_mean", "DS_std", "gap", "runs"]


def _alpha(value: float) -> str:
    return f"{value:g}"


def _sweep_md_row(row: SweepRow) -> list[str]:
    cells = _pair(
        row.ls.mean, row.ds.mean,
        _mean_std(row.ls, row.metric), _mean_std(row.ds, row.metric),
        lower_is_better=row.metric == "loss",
        shown=lambda value: _number(value, row.metric),
    )
    gap = f"{row.gap:.3f}" if row.metric == "loss" else pct(row.gap)
    return [_alpha(row.alpha_ds), row.metric, *cells, gap]


def _sweep_csv_row(row: SweepRow) -> list:
    return [row.alpha_ds, row.metric, row.ls.mean, row.ls.std, row.ds.mean, row.ds.std, row.gap, row.ls.run_count]


def render_table(report: GroupGapReport | Sequence[GroupGapReport] | Sequence[SweepRow], fmt: str = "md") -> str:
    """LS / DS paired table for one or more gap reports, or for a sweep."""
    _check_format(fmt)
    rows = [report] if isinstance(report, GroupGapReport) else list(report)
    is_sweep = bool(rows) and isinstance(rows[0], SweepRow)
    if not rows and not isinstance(report, GroupGapReport):
        is_sweep = True  # an empty sequence renders as an empty sweep

    if fmt == "json":
        return render_json([r.to_dict() for r in rows])
    if is_sweep:
        if fmt == "csv":
            return _csv(SWEEP_CSV_HEADER, [_sweep_csv_row(r) for r in rows])
        return _md(SWEEP_HEADER, [_sweep_md_row(r) for r in rows])
    if fmt == "csv":
        header = ["model", *(f"{m}_{g}" for m in METRICS for g in ("LS", "DS")), "inequity", "inequity_reverse"]
        return _csv(header, [_gap_csv_row(r) for r in rows])
    return _md(GAP_HEADER, [_gap_md_row(r) for r in rows])


# ── Consensus, stats, and curves ─────────────────────────────────

def render_histogram(histogram: dict[str, int], fmt: str = "json") -> str:
    _check_format(fmt)
    if fmt == "json":
        return render_json(histogram)
    rows = list(histogram.items())
    if fmt == "csv":
        return _csv(["pattern", "count"], rows)
    return _md(["Pattern", "Count"], [[p, str(n)] for p, n in rows])


def render_trajectory(rows: Sequence[dict], fmt: str = "csv") -> str:
    _check_format(fmt)
    if fmt == "json":
        return render_json(list(rows))
    header = ["iteration", "group", "loss", "ap50_toy"]
    values = [[r[k] for k in header] for r in rows]
    if fmt == "csv":
        return _csv(header, values)
    return _md(header, [[str(it), g, f"{loss:.4f}", pct(ap)] for it, g, loss, ap in values])


def render_mapping(data: dict, fmt: str = "json") -> str:
    """Flat key/value reports (stats results)."""
    _check_format(fmt)
    if fmt == "json":
        return render_json(data)
    rows = [[k, json.dumps(v)] for k, v in sorted(data.items())]
    if fmt == "csv":
        return _csv(["key", "value"], rows)
    return _md(["Key", "Value"], rows)
