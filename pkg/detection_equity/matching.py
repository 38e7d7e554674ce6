"""Detection matching, average precision, and per-group evaluation.

Matching follows the COCO convention: detections are visited by
descending score (ties keep input position) and each takes the unmatched,
non-ignored ground truth with the highest IoU >= T. A detection whose
only overlap >= T is an ignore region is IGNORED: it counts as neither
a true nor a false positive.

AP uses 101-point interpolation over recall {0, 0.01, ..., 1} by
default; "all_points" gives the VOC-style area under the precision
envelope.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Literal, Sequence

import numpy as np

from detection_equity import config
from detection_equity.dataset import (
    DISPARITY_GROUPS, PERSON, Dataset, Detection, GroundTruthInstance, GroupLabel,
    disparity_scope,
)
from detection_equity.errors import ValidationError
from detection_equity.geometry import iou, iou_matrix

logger = logging.getLogger(__name__)

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
METRICS = ("AP", "AP50", "AP75")

Interpolation = Literal["101", "all_points"]
CrossGroup = Literal["ignore", "fp"]


class MatchStatus(str, Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "IGNORED"


def validate_threshold(value: float) -> float:
    if not 0.0 < value <= 1.0:
        raise ValidationError(f"IoU threshold must be in (0, 1], got {value}")
    return float(value)


def _thresholds(thresholds: Sequence[float] | None) -> tuple[float, ...]:
    if thresholds is None:
        thresholds = config.setting("evaluation", "iou_thresholds", COCO_THRESHOLDS)
    if not thresholds:
        raise ValidationError("At least one IoU threshold is required")
    return tuple(validate_threshold(t) for t in thresholds)


def _interpolation(value: str | None) -> str:
    value = str(value or config.setting("evaluation", "interpolation", "101"))
    if value not in ("101", "all_points"):
        raise ValidationError(f"Unknown interpolation: {value!r}")
    return value


# ── Matching ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class MatchOutcome:
    """Per-detection statuses, ordered by descending score.

    ``positions`` holds each detection's index in the caller's detection
    list; it breaks score ties when outcomes of several images are merged.
    """

    scores: tuple[float, ...] = ()
    statuses: tuple[MatchStatus, ...] = ()
    matched_ids: tuple[str | None, ...] = ()
    n_gt: int = 0  # non-ignored ground truth in the image
    positions: tuple[int, ...] = ()

    def count(self, status: MatchStatus) -> int:
        return sum(1 for s in self.statuses if s == status)


def match(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    threshold: float,
    positions: Sequence[int] | None = None,
) -> MatchOutcome:
    """Greedy matching for a single image and class.

    Ties in score are visited in ``positions`` order (default: list order).
    """
    threshold = validate_threshold(threshold)
    positions = list(range(len(dets))) if positions is None else list(positions)
    if len(positions) != len(dets):
        raise ValidationError("match() needs one position per detection")
    image_ids = {d.image_id for d in dets} | {g.image_id for g in gts}
    if len(image_ids) > 1:
        raise ValidationError(f"match() needs a single image, got {sorted(image_ids)}")
    classes = {d.class_name for d in dets} | {g.class_name for g in gts}
    if len(classes) > 1:
        raise ValidationError(f"match() needs a single class, got {sorted(classes)}")

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, positions[i]))
    ordered = [dets[i] for i in order]
    ious = iou_matrix([d.bbox for d in ordered], [g.bbox for g in gts])
    ignore = np.array([g.ignore for g in gts], dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)

    statuses, matched = [], []
    for row in ious:
        above = row >= threshold
        free = above & ~ignore & ~taken
        if free.any():
            j = int(np.argmax(np.where(free, row, -1.0)))
            taken[j] = True
            statuses.append(MatchStatus.TP)
            matched.append(gts[j].instance_id)
        elif (above & ignore).any():
            j = int(np.argmax(np.where(above & ignore, row, -1.0)))
            statuses.append(MatchStatus.IGNORED)
            matched.append(gts[j].instance_id)
        else:
            statuses.append(MatchStatus.FP)
            matched.append(None)

    return MatchOutcome(
        scores=tuple(d.score for d in ordered),
        statuses=tuple(statuses),
        matched_ids=tuple(matched),
        n_gt=int((~ignore).sum()),
        positions=tuple(positions[i] for i in order),
    )


# ── Average precision ────────────────────────────────────────────

def precision_recall(outcomes: Sequence[MatchOutcome], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each non-ignored detection.

    Detections are ordered by descending score, then by position. Outcomes
    built without positions fall back to their concatenation order.
    """
    scores, positions, is_tp = [], [], []
    offset = 0
    for o in outcomes:
        own = o.positions or range(offset, offset + len(o.scores))
        offset += len(o.scores)
        for s, st, pos in zip(o.scores, o.statuses, own):
            if st == MatchStatus.IGNORED:
                continue
            scores.append(s)
            positions.append(pos)
            is_tp.append(st == MatchStatus.TP)
    if not scores:
        return np.zeros(0), np.zeros(0)
    order = np.lexsort((np.asarray(positions), -np.asarray(scores, dtype=float)))
    tp_flags = np.asarray(is_tp, dtype=float)[order]
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    return tp / (tp + fp), tp / n_gt


def average_precision(
    outcomes: Sequence[MatchOutcome],
    n_gt: int,
    interpolation: Interpolation | None = None,
) -> float | None:
    """AP over the matched detections of all images; None when ``n_gt`` is 0."""
    if n_gt < 0:
        raise ValidationError(f"Ground-truth count must be >= 0, got {n_gt}")
    interpolation = _interpolation(interpolation)
    if n_gt == 0:
        return None
    precision, recall = precision_recall(outcomes, n_gt)
    if precision.size == 0:
        return 0.0

    if interpolation == "101":
        # envelope[i] = max precision at any point with recall >= recall[i]
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_GRID, side="left")
        hit = idx < recall.size
        values = np.zeros_like(RECALL_GRID)
        values[hit] = envelope[idx[hit]]
        return float(np.mean(values))

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


# ── Reports ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class APReport:
    thresholds: tuple[float, ...]
    per_threshold: tuple[float, ...]
    n_gt: int
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    ignored: tuple[int, ...]

    def at(self, threshold: float) -> float | None:
        for t, value in zip(self.thresholds, self.per_threshold):
            if abs(t - threshold) < 1e-9:
                return value
        return None

    @property
    def ap(self) -> float:
        return float(np.mean(self.per_threshold))

    @property
    def ap50(self) -> float | None:
        return self.at(0.5)

    @property
    def ap75(self) -> float | None:
        return self.at(0.75)

    def metric(self, name: str) -> float | None:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75}[name]

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "n_gt": self.n_gt,
            "per_threshold": [
                {"iou": t, "ap": v, "tp": tp, "fp": fp, "ignored": ig}
                for t, v, tp, fp, ig in zip(
                    self.thresholds, self.per_threshold, self.tp, self.fp, self.ignored
                )
            ],
        }


@dataclass(frozen=True)
class AbsentReport:
    """A metric that is undefined for this slice, with the reason."""

    reason: str

    def metric(self, name: str) -> None:
        return None

    def to_dict(self) -> dict:
        return {"absent": True, "reason": self.reason}


def _by_image(items) -> dict[str, list]:
    grouped: dict[str, list] = defaultdict(list)
    for position, item in items:
        grouped[item.image_id].append((position, item))
    return grouped


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    thresholds: Sequence[float] | None = None,
    interpolation: Interpolation | None = None,
    class_name: str | None = None,
) -> APReport | AbsentReport:
    """AP at every threshold for one class; absent when there is no ground truth."""
    thresholds = _thresholds(thresholds)
    interpolation = _interpolation(interpolation)
    class_name = class_name or config.setting("evaluation", "class_name", PERSON)

    dets_by_image = _by_image((i, d) for i, d in enumerate(dets) if d.class_name == class_name)
    gts_by_image = _by_image((i, g) for i, g in enumerate(gts) if g.class_name == class_name)
    image_ids = list(dict.fromkeys([*gts_by_image, *dets_by_image]))
    n_gt = sum(1 for items in gts_by_image.values() for _, g in items if not g.ignore)
    if n_gt == 0:
        return AbsentReport(f"no non-ignored '{class_name}' ground truth")

    per_threshold, tps, fps, ignored = [], [], [], []
    for t in thresholds:
        outcomes = []
        for image_id in image_ids:
            image_dets = dets_by_image.get(image_id, [])
            outcomes.append(match(
                [d for _, d in image_dets],
                [g for _, g in gts_by_image.get(image_id, [])],
                t,
                positions=[p for p, _ in image_dets],
            ))
        per_threshold.append(average_precision(outcomes, n_gt, interpolation))
        tps.append(sum(o.count(MatchStatus.TP) for o in outcomes))
        fps.append(sum(o.count(MatchStatus.FP) for o in outcomes))
        ignored.append(sum(o.count(MatchStatus.IGNORED) for o in outcomes))

    return APReport(
        thresholds=thresholds,
        per_threshold=tuple(per_threshold),
        n_gt=n_gt,
        tp=tuple(tps),
        fp=tuple(fps),
        ignored=tuple(ignored),
    )


def group_ground_truth(
    ds: Dataset,
    group: GroupLabel,
    cross_group: CrossGroup | None = None,
    class_name: str | None = None,
) -> tuple[Dataset, list[GroundTruthInstance]]:
    """Scope the dataset to one group's evaluation and mark ignore regions.

    Returns the scoped dataset and its ground truth, where only non-ignored
    persons of ``group`` stay positives. Other-group persons become ignore
    regions (``cross_group="ignore"``) or are dropped so detections on them
    count as false positives (``"fp"``). Unknown, not-a-person, and
    unlabeled persons are always ignore regions.
    """
    if group not in DISPARITY_GROUPS:
        raise ValidationError(f"Per-group evaluation needs LS or DS, got {group}")
    cross_group = cross_group or config.setting("evaluation", "cross_group", "ignore")
    if cross_group not in ("ignore", "fp"):
        raise ValidationError(f"Unknown cross-group mode: {cross_group!r}")
    class_name = class_name or config.setting("evaluation", "class_name", PERSON)

    scope = disparity_scope(ds)
    gts = []
    for inst in scope.instances:
        if inst.class_name != class_name:
            continue
        if inst.ignore or inst.group == group:
            gts.append(inst)
        elif inst.group in DISPARITY_GROUPS:
            if cross_group == "ignore":
                gts.append(replace(inst, ignore=True))
        else:
            gts.append(replace(inst, ignore=True))
    return scope, gts


def group_evaluate(
    dets: Sequence[Detection],
    ds: Dataset,
    group: GroupLabel,
    cross_group: CrossGroup | None = None,
    thresholds: Sequence[float] | None = None,
    interpolation: Interpolation | None = None,
    class_name: str | None = None,
) -> APReport | AbsentReport:
    scope, gts = group_ground_truth(ds, group, cross_group, class_name)
    if not any(not g.ignore for g in gts):
        reason = f"no {group.value} instances in evaluation scope"
        logger.warning("Per-group evaluation absent: %s", reason)
        return AbsentReport(reason)
    in_scope = set(scope.image_ids)
    return evaluate(
        [d for d in dets if d.image_id in in_scope],
        gts,
        thresholds=thresholds,
        interpolation=interpolation,
        class_name=class_name,
    )


# ── Predictive inequity ──────────────────────────────────────────

def predictive_inequity(losses_ls: Sequence[float], losses_ds: Sequence[float]) -> float:
    """Mean over all (LS, DS) pairs of max(loss_LS - loss_DS, 0)."""
    a = np.asarray(losses_ls, dtype=float)
    b = np.asarray(losses_ds, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValidationError("Predictive inequity needs at least one loss per group")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValidationError("Predictive inequity needs finite losses")
    return float(np.mean(np.maximum(a[:, None] - b[None, :], 0.0)))


def instance_losses(
    dets: Sequence[Detection],
    ds: Dataset,
    group: GroupLabel,
    score_cutoff: float | None = None,
    class_name: str | None = None,
) -> list[float]:
    """1 - best IoU with a confident detection, per non-ignored person of ``group``."""
    if score_cutoff is None:
        score_cutoff = config.setting("evaluation", "score_cutoff", 0.85)
    class_name = class_name or config.setting("evaluation", "class_name", PERSON)
    confident = _by_image(
        (i, d) for i, d in enumerate(dets) if d.class_name == class_name and d.score >= score_cutoff
    )
    losses = []
    for inst in ds.instances:
        if inst.class_name != class_name or inst.ignore or inst.group != group:
            continue
        best = max((iou(inst.bbox, d.bbox) for _, d in confident.get(inst.image_id, [])), default=0.0)
        losses.append(min(1.0, max(0.0, 1.0 - best)))
    return losses


@dataclass(frozen=True)
class GroupGapReport:
    report_ls: APReport | AbsentReport
    report_ds: APReport | AbsentReport
    inequity: float | None = None
    inequity_reverse: float | None = None
    name: str = ""
    gaps: dict = field(default=None, init=False, compare=False)

    def __post_init__(self):
        gaps = {}
        for metric in METRICS:
            ls, ds = self.report_ls.metric(metric), self.report_ds.metric(metric)
            gaps[metric] = None if ls is None or ds is None else ls - ds
        object.__setattr__(self, "gaps", gaps)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "LS": self.report_ls.to_dict(),
            "DS": self.report_ds.to_dict(),
            "gap": dict(self.gaps),
            "inequity": self.inequity,
            "inequity_reverse": self.inequity_reverse,
        }


def group_gap(
    dets: Sequence[Detection],
    ds: Dataset,
    name: str = "",
    cross_group: CrossGroup | None = None,
    thresholds: Sequence[float] | None = None,
    interpolation: Interpolation | None = None,
    loss_fn: Callable[[Sequence[Detection], Dataset, GroupLabel], list[float]] | None = None,
) -> GroupGapReport:
    """Both per-group reports, their gaps, and predictive inequity both ways."""
    reports = {
        g: group_evaluate(dets, ds, g, cross_group, thresholds, interpolation)
        for g in DISPARITY_GROUPS
    }
    loss_fn = loss_fn or instance_losses
    losses_ls = loss_fn(dets, ds, GroupLabel.LS)
    losses_ds = loss_fn(dets, ds, GroupLabel.DS)
    inequity = reverse = None
    if losses_ls and losses_ds:
        inequity = predictive_inequity(losses_ls, losses_ds)
        reverse = predictive_inequity(losses_ds, losses_ls)
    return GroupGapReport(
        report_ls=reports[GroupLabel.LS],
        report_ds=reports[GroupLabel.DS],
        inequity=inequity,
        inequity_reverse=reverse,
        name=name,
    )
