"""Synthetic anchor scenes, a gradient-descent trainer, and alpha sweeps.

The scenes mimic the imbalance studied in the audit: roughly 3.5 LS
persons per DS person, with DS features sitting closer to the background
cluster and DS regression targets shifted by a constant offset. A linear
model cannot serve both groups perfectly, so the loss weights decide who
pays for the compromise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from detection_equity import config
from detection_equity.dataset import PERSON, Dataset, Detection, GroundTruthInstance, GroupLabel, ImageRecord
from detection_equity.errors import NumericalError, ValidationError
from detection_equity.geometry import BBox, BoxOffsets, decode_offsets
from detection_equity.matching import COCO_THRESHOLDS, METRICS, AbsentReport, group_evaluate
from detection_equity.stats import RunAggregate, aggregate_runs
from detection_equity.weighted_loss import (
    UNIT_WEIGHTS, AnchorBatch, Attribute, GroupAlphas, LossConfig, ToyModel, WeightVector,
    group_mean_loss, group_sample_weights, loss_gradient, per_anchor_loss,
    weighted_detection_loss,
)

logger = logging.getLogger(__name__)

Scheme = Literal["augmented", "group"]

IMAGE_WIDTH = 1280.0
IMAGE_HEIGHT = 720.0

# Persons live on the left of the scene, background anchors on the right,
# so a background detection never overlaps a person box.
_PERSON_X = (150.0, 450.0)
_BACKGROUND_X = (850.0, 1150.0)
_CENTER_Y = (250.0, 470.0)
_ANCHOR_W = (60.0, 120.0)
_ASPECT = 2.2

_ATTRIBUTE_GROUP = {
    Attribute.LS: GroupLabel.LS,
    Attribute.DS: GroupLabel.DS,
    Attribute.PERSON_UNKNOWN: GroupLabel.UNKNOWN,
}


# ── Configuration ────────────────────────────────────────────────

@dataclass(frozen=True)
class SyntheticConfig:
    ratio: float = 3.5
    n_ds: int = 200
    n_unknown: int = 60
    n_background: int = 500
    heldout_fraction: float = 0.5
    feature_dim: int = 4
    group_shift: float = 0.9
    background_shift: float = 1.6
    ds_offset: tuple[float, ...] = (0.18, -0.14, 0.22, -0.18)
    noise: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "ds_offset", tuple(float(v) for v in self.ds_offset))
        if self.ratio <= 0:
            raise ValidationError(f"Group ratio must be > 0, got {self.ratio}")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValidationError(f"heldout_fraction must be in (0, 1), got {self.heldout_fraction}")
        if self.feature_dim < 2:
            raise ValidationError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if len(self.ds_offset) != 4:
            raise ValidationError("ds_offset needs 4 components (tx, ty, tw, th)")
        if self.noise < 0:
            raise ValidationError(f"noise must be >= 0, got {self.noise}")
        for name, count in self.counts().items():
            held = round(count * self.heldout_fraction)
            if held < 1 or count - held < 1:
                raise ValidationError(
                    f"{name} count {count} leaves an empty training or held-out split"
                )

    @classmethod
    def from_config(cls, **overrides) -> SyntheticConfig:
        values = dict(config.section("synthetic"))
        values.update(overrides)
        return cls(**values)

    @property
    def n_ls(self) -> int:
        return round(self.ratio * self.n_ds)

    def counts(self) -> dict[str, int]:
        return {
            "LS": self.n_ls,
            "DS": self.n_ds,
            "unknown": self.n_unknown,
            "background": self.n_background,
        }


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.2
    iterations: int = 600
    eval_every: int = 50
    init_scale: float = 0.01
    schedule: Literal["constant", "step"] = "constant"
    steps: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        if self.eval_every < 0:
            raise ValidationError(f"eval_every must be >= 0, got {self.eval_every}")
        if self.schedule not in ("constant", "step"):
            raise ValidationError(f"Unknown learning-rate schedule: {self.schedule!r}")

    @classmethod
    def from_config(cls, preset: str | None = None, **overrides) -> TrainingConfig:
        values = dict(config.section("training"))
        if preset:
            presets = config.section("presets")
            if preset not in presets:
                raise ValidationError(f"Unknown training preset: {preset!r}")
            values.update(presets[preset])
        values.update(overrides)
        return cls(**values)

    def rate_at(self, iteration: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        drops = sum(1 for s in self.steps if iteration >= s)
        return self.learning_rate * self.gamma ** drops


# ── Scene generation ─────────────────────────────────────────────

def _anchors(rng: np.random.Generator, n: int, x_range: tuple[float, float]) -> list[BBox]:
    cx = rng.uniform(*x_range, size=n)
    cy = rng.uniform(*_CENTER_Y, size=n)
    w = rng.uniform(*_ANCHOR_W, size=n)
    return [BBox.from_center(x, y, width, _ASPECT * width) for x, y, width in zip(cx, cy, w)]


def generate_synthetic(seed: int, cfg: SyntheticConfig | None = None) -> tuple[AnchorBatch, AnchorBatch]:
    """Seeded (train, held-out) anchor batches.

    With u the all-ones direction and v an orthogonal one, feature means are
    LS c*u + s*v, DS (c - s)*u - s*v, unknown c*u and background -c*u,
    where c = background_shift / 2 and s = group_shift / 2. Features carry
    a leading bias column.
    """
    cfg = cfg or SyntheticConfig.from_config()
    rng = np.random.default_rng(seed)
    d = cfg.feature_dim

    u = np.ones(d) / np.sqrt(d)
    v = np.zeros(d)
    v[0], v[1] = 1.0 / np.sqrt(2.0), -1.0 / np.sqrt(2.0)
    c, s = cfg.background_shift / 2.0, cfg.group_shift / 2.0
    ds_offset = np.asarray(cfg.ds_offset)

    blocks = [
        # attribute, count, feature mean, offset shift, label
        (Attribute.LS, cfg.n_ls, c * u + s * v, np.zeros(4), 1),
        (Attribute.DS, cfg.n_ds, (c - s) * u - s * v, ds_offset, 1),
        (Attribute.PERSON_UNKNOWN, cfg.n_unknown, c * u, 0.5 * ds_offset, 1),
        (Attribute.NOT_PERSON, cfg.n_background, -c * u, None, 0),
    ]
    mixing = 0.1 * rng.standard_normal((d, 4))

    train_parts, held_parts = [], []
    for attribute, count, mean, shift, label in blocks:
        z = mean + rng.standard_normal((count, d))
        positive = shift is not None
        if positive:
            t_star = z @ mixing + shift + cfg.noise * rng.standard_normal((count, 4))
        else:
            t_star = np.zeros((count, 4))
        anchors = _anchors(rng, count, _PERSON_X if positive else _BACKGROUND_X)
        part = AnchorBatch(
            features=np.hstack([np.ones((count, 1)), z]),
            labels=np.full(count, label),
            t_star=t_star,
            positive=np.full(count, positive),
            attributes=np.full(count, int(attribute)),
            k=2,
            anchors=tuple(anchors),
        )
        order = rng.permutation(count)
        n_held = round(count * cfg.heldout_fraction)
        held_mask = np.zeros(count, dtype=bool)
        held_mask[order[:n_held]] = True
        train_parts.append(part.subset(~held_mask))
        held_parts.append(part.subset(held_mask))

    return _concat(train_parts), _concat(held_parts)


def _concat(parts: Sequence[AnchorBatch]) -> AnchorBatch:
    return AnchorBatch(
        features=np.vstack([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        t_star=np.vstack([p.t_star for p in parts]),
        positive=np.concatenate([p.positive for p in parts]),
        attributes=np.concatenate([p.attributes for p in parts]),
        k=parts[0].k,
        anchors=tuple(a for p in parts for a in p.anchors),
    )


# ── Toy detection scenes ─────────────────────────────────────────

def toy_scene(model: ToyModel, heldout: AnchorBatch) -> tuple[Dataset, list[Detection]]:
    """One image per held-out person anchor; background detections spread round-robin."""
    if heldout.anchors is None:
        raise ValidationError("Toy evaluation needs anchor boxes")
    scores = model.probabilities(heldout.features)[:, 1]
    predicted = model.offsets(heldout.features)
    if not (np.isfinite(scores).all() and np.isfinite(predicted).all()):
        raise NumericalError("Model scores or offsets are not finite on the held-out anchors")

    images, instances, dets = [], [], []
    persons = np.flatnonzero(heldout.positive)
    backgrounds = np.flatnonzero(~heldout.positive)
    if persons.size == 0:
        raise ValidationError("Toy evaluation needs at least one held-out person")

    for n, i in enumerate(persons):
        image_id = f"toy-{n:05d}"
        anchor = heldout.anchors[i]
        images.append(ImageRecord(image_id, IMAGE_WIDTH, IMAGE_HEIGHT))
        instances.append(GroundTruthInstance(
            instance_id=f"{image_id}-p",
            image_id=image_id,
            bbox=decode_offsets(BoxOffsets.from_array(heldout.t_star[i]), anchor),
            class_name=PERSON,
            group=_ATTRIBUTE_GROUP[Attribute(int(heldout.attributes[i]))],
        ))
        dets.append(_detection(image_id, predicted[i], anchor, scores[i]))

    for n, i in enumerate(backgrounds):
        image_id = images[n % len(images)].image_id
        dets.append(_detection(image_id, predicted[i], heldout.anchors[i], scores[i]))

    return Dataset(images, instances), dets


def _detection(image_id: str, offsets: np.ndarray, anchor: BBox, score: float) -> Detection:
    return Detection(
        image_id=image_id,
        bbox=decode_offsets(BoxOffsets.from_array(offsets), anchor),
        class_name=PERSON,
        score=float(np.clip(score, 0.0, 1.0)),
    )


def heldout_group_loss(model: ToyModel, heldout: AnchorBatch, loss_cfg: LossConfig) -> dict[str, float]:
    """Mean per-anchor loss of the LS and DS held-out anchors."""
    per_anchor = per_anchor_loss(heldout, model, loss_cfg)
    result = {}
    for group, attribute in (("LS", Attribute.LS), ("DS", Attribute.DS)):
        mask = heldout.attributes == attribute
        if mask.any():
            result[group] = float(per_anchor[mask].mean())
    return result


def toy_metrics(model: ToyModel, heldout: AnchorBatch, thresholds: Sequence[float] = COCO_THRESHOLDS) -> dict:
    """Per-group toy AP reports keyed by "LS" / "DS"."""
    ds, dets = toy_scene(model, heldout)
    return {
        g.value: group_evaluate(dets, ds, g, thresholds=thresholds, interpolation="101")
        for g in (GroupLabel.LS, GroupLabel.DS)
    }


# ── Training ─────────────────────────────────────────────────────

@dataclass
class TrainResult:
    model: ToyModel
    objective: list[float] = field(default_factory=list)
    trajectory: list[dict] = field(default_factory=list)


def train(
    batch: AnchorBatch,
    loss_cfg: LossConfig | None = None,
    weights: WeightVector | None = None,
    training: TrainingConfig | None = None,
    seed: int = 0,
    heldout: AnchorBatch | None = None,
    alphas: GroupAlphas | None = None,
    track_ap: bool = True,
) -> TrainResult:
    """Plain gradient descent on the weighted detection loss.

    ``weights`` selects the per-attribute (augmented) scheme; ``alphas``
    selects the per-group-mean scheme. ``objective`` holds the training loss
    before every step and after the last one. ``trajectory`` holds one row
    per group at iteration 0, every ``eval_every`` iterations, and at the end.
    """
    if weights is not None and alphas is not None:
        raise ValidationError("Pass either weights or alphas, not both")
    loss_cfg = loss_cfg or LossConfig.from_config(k=batch.k)
    training = training or TrainingConfig.from_config()
    if len(batch) == 0:
        raise ValidationError("Training needs a non-empty batch")

    rng = np.random.default_rng(seed)
    model = ToyModel.initialize(batch.features.shape[1], batch.k, rng, training.init_scale)

    if alphas is not None:
        # alpha_g / N_g per anchor with unit normalizers is the per-group mean loss
        loss_cfg = replace(loss_cfg, n_cls=1.0, n_reg=1.0)
        sample_weights = group_sample_weights(batch, alphas)

        def objective(m: ToyModel) -> float:
            return group_mean_loss(batch, m, loss_cfg, alphas)
    else:
        weights = weights or UNIT_WEIGHTS
        sample_weights = None

        def objective(m: ToyModel) -> float:
            return weighted_detection_loss(batch, m, loss_cfg, weights)

    result = TrainResult(model=model)
    evaluate_on = heldout if heldout is not None else batch

    def checkpoint(iteration: int) -> None:
        try:
            losses = heldout_group_loss(result.model, evaluate_on, loss_cfg)
            if not all(np.isfinite(v) for v in losses.values()):
                raise NumericalError(f"held-out losses {losses}")
            ap50 = {}
            if track_ap and evaluate_on.anchors is not None:
                ap50 = {g: r.ap50 for g, r in toy_metrics(result.model, evaluate_on, (0.5,)).items()
                        if not isinstance(r, AbsentReport)}
        except NumericalError as e:
            raise NumericalError(
                f"Held-out evaluation failed at iteration {iteration}: {e}", iteration=iteration,
            ) from None
        for group, loss in losses.items():
            result.trajectory.append({
                "iteration": iteration,
                "group": group,
                "loss": loss,
                "ap50_toy": ap50.get(group),
            })
        logger.debug("iteration %d held-out losses %s", iteration, losses)

    checkpoint(0)
    for it in range(training.iterations):
        value = objective(result.model)
        result.objective.append(value)
        if not np.isfinite(value):
            raise NumericalError(f"Training loss became non-finite at iteration {it}", iteration=it)
        grad = loss_gradient(batch, result.model, loss_cfg, weights or UNIT_WEIGHTS, sample_weights)
        if not np.isfinite(grad.flat()).all():
            raise NumericalError(f"Gradient became non-finite at iteration {it}", iteration=it)
        try:
            result.model = result.model.step(grad, training.rate_at(it))
        except ValidationError:
            raise NumericalError(f"Parameters became non-finite at iteration {it}", iteration=it) from None
        done = it + 1
        if training.eval_every and done % training.eval_every == 0 and done != training.iterations:
            checkpoint(done)

    if training.iterations:
        final = objective(result.model)
        if not np.isfinite(final):
            raise NumericalError(
                f"Training loss became non-finite at iteration {training.iterations}",
                iteration=training.iterations,
            )
        result.objective.append(final)
        checkpoint(training.iterations)
    return result


# ── Alpha sweep ──────────────────────────────────────────────────

@dataclass(frozen=True)
class SweepRow:
    alpha_ds: float
    metric: str
    ls: RunAggregate
    ds: RunAggregate

    @property
    def gap(self) -> float:
        return self.ls.mean - self.ds.mean

    def to_dict(self) -> dict:
        return {
            "alpha_DS": self.alpha_ds,
            "metric": self.metric,
            "LS": self.ls.to_dict(),
            "DS": self.ds.to_dict(),
            "gap": self.gap,
        }


SWEEP_METRICS = ("loss", *METRICS)


def _run_metrics(model: ToyModel, heldout: AnchorBatch, loss_cfg: LossConfig) -> dict[str, dict[str, float]]:
    losses = heldout_group_loss(model, heldout, loss_cfg)
    reports = toy_metrics(model, heldout)
    values = {"loss": losses}
    for metric in METRICS:
        values[metric] = {
            g: r.metric(metric) for g, r in reports.items() if not isinstance(r, AbsentReport)
        }
    return values


def alpha_sweep(
    alphas: Sequence[float] | None = None,
    repeats: int | None = None,
    seed: int = 0,
    scheme: Scheme | None = None,
    synthetic: SyntheticConfig | None = None,
    training: TrainingConfig | None = None,
    loss_cfg: LossConfig | None = None,
) -> list[SweepRow]:
    """Train at each alpha_DS (alpha_LS = alpha_O = 1) and aggregate per-group metrics.

    Repeat r uses seed + r for both data and initialization, so every alpha
    sees the same scenes.
    """
    alphas = list(alphas if alphas is not None else config.setting("sweep", "alphas", [1, 2, 3, 5, 10]))
    repeats = int(repeats if repeats is not None else config.setting("sweep", "repeats", 10))
    scheme = scheme or config.setting("sweep", "scheme", "augmented")
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    if scheme not in ("augmented", "group"):
        raise ValidationError(f"Unknown weighting scheme: {scheme!r}")
    synthetic = synthetic or SyntheticConfig.from_config()
    training = replace(training or TrainingConfig.from_config(), eval_every=0)
    loss_cfg = loss_cfg or LossConfig.from_config()

    scenes = [generate_synthetic(seed + r, synthetic) for r in range(repeats)]
    rows = []
    for alpha in alphas:
        group_alphas = GroupAlphas(alpha_ls=1.0, alpha_ds=float(alpha), alpha_o=1.0)
        runs = []
        for r, (train_batch, heldout) in enumerate(scenes):
            kwargs = (
                {"alphas": group_alphas} if scheme == "group"
                else {"weights": WeightVector.from_alphas(group_alphas)}
            )
            result = train(train_batch, loss_cfg, training=training, seed=seed + r,
                           heldout=heldout, track_ap=False, **kwargs)
            runs.append(_run_metrics(result.model, heldout, loss_cfg))
        for metric in SWEEP_METRICS:
            per_group = {
                g: [run[metric][g] for run in runs if run[metric].get(g) is not None]
                for g in ("LS", "DS")
            }
            if not per_group["LS"] or not per_group["DS"]:
                logger.warning("alpha_DS=%s: %s undefined for a group, row skipped", alpha, metric)
                continue
            rows.append(SweepRow(
                alpha_ds=float(alpha),
                metric=metric,
                ls=aggregate_runs(per_group["LS"]),
                ds=aggregate_runs(per_group["DS"]),
            ))
        logger.info("alpha_DS=%s done (%d repeats, scheme %s)", alpha, repeats, scheme)
    return rows
