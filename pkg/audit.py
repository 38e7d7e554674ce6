#!/usr/bin/env python3
"""Detection Equity Audit - CLI Entry Point.

Usage:
  python audit.py eval --gt gt.json --det dets.json
  python audit.py group-eval --gt gt.json --det model_a.json --det model_b.json --format md
  python audit.py consensus --votes votes.json
  python audit.py stats width --n 100 --k 1 --delta 0.05
  python audit.py stats resolvable --n 12000 --n 4000 --gap 0.05
  python audit.py stats min-samples --ratio 3 --gap 0.05
  python audit.py sweep --alpha 1 --alpha 5 --repeats 10 --seed 0
  python audit.py train-curves --alpha 5 --seed 0 --out curves.csv

Reports go to --out or standard output. Errors go to standard error as one
JSON line {"error": code, "message": text}; exit codes are 0 success,
2 validation, 3 IO, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from detection_equity import config
from detection_equity.consensus import aggregate_all, disparity_labels, group_rate, load_votes, vote_histogram
from detection_equity.dataset import (
    apply_group_labels, apply_min_area_filter, group_counts, load_detections, load_ground_truth,
)
from detection_equity.display import (
    FORMATS, render_ap_report, render_histogram, render_json, render_mapping, render_table,
    render_trajectory,
)
from detection_equity.errors import AuditError, DataFileError, ValidationError
from detection_equity.matching import evaluate, group_gap
from detection_equity.stats import ConfidenceSpec, confidence_width, holdout_report, min_samples
from detection_equity.trainer import (
    SyntheticConfig, TrainingConfig, alpha_sweep, generate_synthetic, train,
)
from detection_equity.weighted_loss import GroupAlphas, LossConfig, WeightVector

logger = logging.getLogger("audit")

COMMANDS = ("eval", "group-eval", "consensus", "stats", "sweep", "train-curves")
STATS_ACTIONS = ("width", "resolvable", "min-samples")

DEFAULT_FORMAT = {
    "eval": "json",
    "group-eval": "md",
    "consensus": "json",
    "stats": "json",
    "sweep": "md",
    "train-curves": "csv",
}


# ── Parser ───────────────────────────────────────────────────────

class _Parser(argparse.ArgumentParser):
    """argparse that reports bad arguments as validation errors."""

    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="audit.py",
        description="Audit object detectors for per-group performance gaps",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--out", help="Write the report here instead of standard output")
        p.add_argument("--format", choices=FORMATS, help="Report format")

    def evaluation(p):
        p.add_argument("--gt", required=True, help="Ground-truth JSON file")
        p.add_argument("--min-area", type=float, help="Ignore person boxes smaller than this (px^2)")
        p.add_argument("--iou", type=float, action="append", help="IoU threshold (repeatable)")
        p.add_argument("--interpolation", choices=("101", "all_points"))

    def training(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--scheme", choices=("augmented", "group"))
        p.add_argument("--iterations", type=int)

    p = sub.add_parser("eval", help="AP / AP50 / AP75 for one detection file")
    evaluation(p)
    p.add_argument("--det", required=True, action="append", help="Detection JSON file")
    common(p)

    p = sub.add_parser("group-eval", help="Per-group AP, gaps, and predictive inequity")
    evaluation(p)
    p.add_argument("--det", required=True, action="append", help="Detection JSON file (repeatable, one row each)")
    p.add_argument("--votes", help="Annotator votes; consensus labels replace the file's groups")
    p.add_argument("--cross-group", choices=("ignore", "fp"))
    common(p)

    p = sub.add_parser("consensus", help="Aggregate annotator votes")
    p.add_argument("--votes", required=True, help="Votes JSON file")
    common(p)

    p = sub.add_parser("stats", help="Holdout confidence math")
    p.add_argument("action", choices=STATS_ACTIONS)
    p.add_argument("--n", type=int, action="append", help="Sample count (twice for resolvable)")
    p.add_argument("--k", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--gap", type=float)
    p.add_argument("--ratio", type=float)
    common(p)

    p = sub.add_parser("sweep", help="Train the toy detector across alpha_DS values")
    p.add_argument("--alpha", type=float, action="append", help="alpha_DS value (repeatable)")
    p.add_argument("--repeats", type=int)
    training(p)
    common(p)

    p = sub.add_parser("train-curves", help="Per-group held-out loss across training iterations")
    p.add_argument("--alpha", type=float, action="append", help="alpha_DS value (one)")
    training(p)
    common(p)

    return parser


# ── Command config ───────────────────────────────────────────────

@dataclass
class CommandConfig:
    command: str
    fmt: str
    out: str | None = None
    action: str | None = None
    gt: str | None = None
    det: list[str] = field(default_factory=list)
    votes: str | None = None
    min_area: float | None = None
    iou: list[float] | None = None
    interpolation: str | None = None
    cross_group: str | None = None
    alphas: list[float] | None = None
    repeats: int | None = None
    seed: int = 0
    scheme: str | None = None
    iterations: int | None = None
    n: list[int] = field(default_factory=list)
    k: int | None = None
    delta: float | None = None
    gap: float | None = None
    ratio: float | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValidationError(f"Unknown command: {self.command!r}")
        if self.fmt not in FORMATS:
            raise ValidationError(f"Unknown output format: {self.fmt!r}")
        if self.min_area is not None and self.min_area < 0:
            raise ValidationError(f"--min-area must be >= 0, got {self.min_area}")
        if self.iterations is not None and self.iterations < 0:
            raise ValidationError(f"--iterations must be >= 0, got {self.iterations}")
        if self.command == "stats":
            needed = {"width": 1, "resolvable": 2, "min-samples": 0}[self.action]
            if len(self.n) != needed:
                raise ValidationError(f"stats {self.action} takes --n exactly {needed} time(s)")
            if self.action != "width" and self.gap is None:
                raise ValidationError(f"stats {self.action} needs --gap")
            if self.action == "min-samples" and self.ratio is None:
                raise ValidationError("stats min-samples needs --ratio")
        if self.command == "train-curves" and self.alphas and len(self.alphas) > 1:
            raise ValidationError("train-curves takes a single --alpha")

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> CommandConfig:
        ns = vars(args)
        return cls(
            command=args.command,
            fmt=args.format or DEFAULT_FORMAT[args.command],
            out=args.out,
            action=ns.get("action"),
            gt=ns.get("gt"),
            det=ns.get("det") or [],
            votes=ns.get("votes"),
            min_area=ns.get("min_area"),
            iou=ns.get("iou"),
            interpolation=ns.get("interpolation"),
            cross_group=ns.get("cross_group"),
            alphas=ns.get("alpha"),
            repeats=ns.get("repeats"),
            seed=ns.get("seed") or 0,
            scheme=ns.get("scheme"),
            iterations=ns.get("iterations"),
            n=ns.get("n") or [],
            k=ns.get("k"),
            delta=ns.get("delta"),
            gap=ns.get("gap"),
            ratio=ns.get("ratio"),
        )


# ── Commands ─────────────────────────────────────────────────────

def _load_dataset(cfg: CommandConfig):
    ds = apply_min_area_filter(load_ground_truth(cfg.gt), cfg.min_area)
    if cfg.votes:
        results = aggregate_all(load_votes(cfg.votes))
        ds = apply_group_labels(ds, {r.instance_id: r.label for r in results if r.label is not None})
    return ds


def _cmd_eval(cfg: CommandConfig) -> str:
    if len(cfg.det) != 1:
        raise ValidationError("eval takes exactly one --det file; use group-eval to compare models")
    ds = _load_dataset(cfg)
    report = evaluate(load_detections(cfg.det[0]), ds.instances, cfg.iou, cfg.interpolation)
    return render_ap_report(report, cfg.fmt)


def _cmd_group_eval(cfg: CommandConfig) -> str:
    ds = _load_dataset(cfg)
    logger.info("Group counts: %s", group_counts(ds))
    reports = [
        group_gap(
            load_detections(path), ds,
            name=Path(path).stem,
            cross_group=cfg.cross_group,
            thresholds=cfg.iou,
            interpolation=cfg.interpolation,
        )
        for path in cfg.det
    ]
    return render_table(reports, cfg.fmt)


def _cmd_consensus(cfg: CommandConfig) -> str:
    records = load_votes(cfg.votes)
    results = aggregate_all(records)
    histogram = vote_histogram(records)
    if cfg.fmt != "json":
        return render_histogram(histogram, cfg.fmt)
    labels = disparity_labels(results)
    return render_json({
        "results": [r.to_dict() for r in results],
        "histogram": histogram,
        "ds_rate": group_rate(labels) if labels else None,
        "discarded": sum(1 for r in results if r.discarded),
    })


def _cmd_stats(cfg: CommandConfig) -> str:
    if cfg.action == "width":
        spec = ConfidenceSpec(
            n=cfg.n[0],
            k=cfg.k if cfg.k is not None else int(config.setting("stats", "k", 1)),
            delta=cfg.delta if cfg.delta is not None else float(config.setting("stats", "delta", 0.05)),
        )
        data = {"n": spec.n, "k": spec.k, "delta": spec.delta, "width": confidence_width(spec)}
    elif cfg.action == "resolvable":
        data = holdout_report(cfg.n[0], cfg.n[1], cfg.gap, cfg.k, cfg.delta)
    else:
        n_a, n_b = min_samples(cfg.ratio, cfg.gap, cfg.k, cfg.delta)
        data = {"ratio": cfg.ratio, "gap": cfg.gap, "n_a": n_a, "n_b": n_b}
    return render_mapping(data, cfg.fmt)


def _training(cfg: CommandConfig) -> TrainingConfig:
    if cfg.iterations is None:
        return TrainingConfig.from_config()
    return TrainingConfig.from_config(iterations=cfg.iterations)


def _cmd_sweep(cfg: CommandConfig) -> str:
    rows = alpha_sweep(
        alphas=cfg.alphas,
        repeats=cfg.repeats,
        seed=cfg.seed,
        scheme=cfg.scheme,
        training=_training(cfg),
    )
    return render_table(rows, cfg.fmt)


def _cmd_train_curves(cfg: CommandConfig) -> str:
    alpha = cfg.alphas[0] if cfg.alphas else 1.0
    alphas = GroupAlphas(alpha_ls=1.0, alpha_ds=alpha, alpha_o=1.0)
    batch, heldout = generate_synthetic(cfg.seed, SyntheticConfig.from_config())
    scheme = cfg.scheme or config.setting("sweep", "scheme", "augmented")
    kwargs = {"alphas": alphas} if scheme == "group" else {"weights": WeightVector.from_alphas(alphas)}
    result = train(batch, LossConfig.from_config(), training=_training(cfg), seed=cfg.seed,
                   heldout=heldout, **kwargs)
    return render_trajectory(result.trajectory, cfg.fmt)


_HANDLERS = {
    "eval": _cmd_eval,
    "group-eval": _cmd_group_eval,
    "consensus": _cmd_consensus,
    "stats": _cmd_stats,
    "sweep": _cmd_sweep,
    "train-curves": _cmd_train_curves,
}


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as e:
        raise DataFileError(f"Cannot write {out}: {e.strerror or e}") from None


# ── Entry ────────────────────────────────────────────────────────

def _configure_logging() -> None:
    level = str(config.setting("logging", "level", "WARNING")).upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def run(argv: list[str] | None = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        cfg = CommandConfig.from_args(args)
        _emit(_HANDLERS[cfg.command](cfg), cfg.out)
    except AuditError as e:
        sys.stderr.write(json.dumps({"error": e.code, "message": str(e)}) + "\n")
        return e.exit_status
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
