"""Detection-head loss with per-attribute reweighting.

For anchors i with predicted class distribution p_i, one-hot target p*_i,
predicted offsets t_i and target offsets t*_i:

    L = 1/N_cls * sum_i W[a_i] * L_cls(p_i, p*_i)
      + lambda/N_reg * sum_i W[a_i] * p*_i * L_reg(t_i, t*_i)

L_cls is the log loss and L_reg the smooth-L1 sum over (x, y, w, h). The
``p*_i`` gate keeps only positive (foreground) anchors in the regression
term. W = (1, 1, 1, 1) gives the plain detection loss.

The toy model is a linear softmax classifier plus a linear regressor over
anchor features, which is enough to exercise every term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Mapping, Sequence

import numpy as np

from detection_equity import config
from detection_equity.errors import ValidationError
from detection_equity.geometry import BBox, BoxOffsets

logger = logging.getLogger(__name__)


class Attribute(IntEnum):
    LS = 0
    DS = 1
    NOT_PERSON = 2
    PERSON_UNKNOWN = 3


# ── Types ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AnchorSample:
    features: np.ndarray
    p_star: np.ndarray
    attribute: Attribute
    t_star: BoxOffsets | None = None
    anchor: BBox | None = None

    def __post_init__(self):
        p = np.asarray(self.p_star, dtype=float)
        if p.ndim != 1 or np.count_nonzero(p) != 1 or p.sum() != 1.0 or p.max() != 1.0:
            raise ValidationError("p_star must be a one-hot vector")

    @property
    def label(self) -> int:
        return int(np.argmax(self.p_star))

    @property
    def is_positive(self) -> bool:
        return self.t_star is not None


@dataclass(frozen=True)
class AnchorBatch:
    """Column-stacked anchors; the vectorized form of a list of AnchorSample."""

    features: np.ndarray    # (n, d)
    labels: np.ndarray      # (n,) true class index
    t_star: np.ndarray      # (n, 4), zeros where not positive
    positive: np.ndarray    # (n,) bool
    attributes: np.ndarray  # (n,) Attribute values
    k: int
    anchors: tuple[BBox, ...] | None = None

    def __post_init__(self):
        n = len(self.labels)
        if self.features.shape[0] != n or self.t_star.shape != (n, 4) or self.positive.shape != (n,):
            raise ValidationError("Anchor batch arrays have inconsistent shapes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValidationError(f"Class labels must lie in [0, {self.k})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def p_star(self) -> np.ndarray:
        return np.eye(self.k)[self.labels]

    @classmethod
    def from_samples(cls, samples: Sequence[AnchorSample]) -> AnchorBatch:
        if not samples:
            raise ValidationError("An anchor batch needs at least one sample")
        k = len(samples[0].p_star)
        anchors = tuple(s.anchor for s in samples) if all(s.anchor is not None for s in samples) else None
        return cls(
            features=np.stack([np.asarray(s.features, dtype=float) for s in samples]),
            labels=np.array([s.label for s in samples]),
            t_star=np.array([s.t_star.as_array() if s.t_star else np.zeros(4) for s in samples]),
            positive=np.array([s.is_positive for s in samples]),
            attributes=np.array([int(s.attribute) for s in samples]),
            k=k,
            anchors=anchors,
        )

    def samples(self) -> Iterator[AnchorSample]:
        p_star = self.p_star
        for i in range(len(self)):
            yield AnchorSample(
                features=self.features[i],
                p_star=p_star[i],
                attribute=Attribute(int(self.attributes[i])),
                t_star=BoxOffsets.from_array(self.t_star[i]) if self.positive[i] else None,
                anchor=self.anchors[i] if self.anchors else None,
            )

    def subset(self, mask: np.ndarray) -> AnchorBatch:
        return AnchorBatch(
            features=self.features[mask],
            labels=self.labels[mask],
            t_star=self.t_star[mask],
            positive=self.positive[mask],
            attributes=self.attributes[mask],
            k=self.k,
            anchors=tuple(a for a, m in zip(self.anchors, mask) if m) if self.anchors else None,
        )


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 1.0
    n_cls: float | None = None  # None -> batch size
    n_reg: float | None = None  # None -> batch size
    k: int = 2
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.lambda_ <= 0:
            raise ValidationError(f"lambda must be > 0, got {self.lambda_}")
        for name in ("n_cls", "n_reg"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValidationError(f"{name} must be > 0, got {value}")
        if self.k < 2:
            raise ValidationError(f"class count k must be >= 2, got {self.k}")

    @classmethod
    def from_config(cls, **overrides) -> LossConfig:
        section = config.section("loss")
        values = {
            "lambda_": section.get("lambda", 1.0),
            "n_cls": section.get("n_cls"),
            "n_reg": section.get("n_reg"),
            "epsilon": section.get("epsilon", 1e-12),
        }
        values.update(overrides)
        return cls(**values)

    def normalizers(self, batch_size: int) -> tuple[float, float]:
        return (self.n_cls or batch_size, self.n_reg or batch_size)


@dataclass(frozen=True)
class GroupAlphas:
    alpha_ls: float = 1.0
    alpha_ds: float = 1.0
    alpha_o: float = 1.0

    def __post_init__(self):
        values = (self.alpha_ls, self.alpha_ds, self.alpha_o)
        if min(values) < 0 or max(values) <= 0:
            raise ValidationError(f"Group weights must be >= 0 with one positive: {values}")


@dataclass(frozen=True)
class WeightVector:
    """One weight per Attribute, indexed by Attribute value."""

    values: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != len(Attribute):
            raise ValidationError(f"Weight vector needs {len(Attribute)} entries, got {len(values)}")
        if min(values) < 0 or max(values) <= 0:
            raise ValidationError(f"Weights must be >= 0 with one positive: {values}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_alphas(cls, alphas: GroupAlphas) -> WeightVector:
        return cls((alphas.alpha_ls, alphas.alpha_ds, alphas.alpha_o, alphas.alpha_o))

    def scaled(self, c: float) -> WeightVector:
        return WeightVector(tuple(c * v for v in self.values))

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


UNIT_WEIGHTS = WeightVector()


@dataclass(frozen=True)
class ToyModel:
    cls_weights: np.ndarray  # (d, k)
    reg_weights: np.ndarray  # (d, 4)

    def __post_init__(self):
        if not (np.isfinite(self.cls_weights).all() and np.isfinite(self.reg_weights).all()):
            raise ValidationError("Model parameters must be finite")

    @classmethod
    def initialize(cls, feature_dim: int, k: int, rng: np.random.Generator, scale: float = 0.01) -> ToyModel:
        return cls(
            cls_weights=scale * rng.standard_normal((feature_dim, k)),
            reg_weights=scale * rng.standard_normal((feature_dim, 4)),
        )

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        return softmax(features @ self.cls_weights)

    def offsets(self, features: np.ndarray) -> np.ndarray:
        return features @ self.reg_weights

    def step(self, grad: ModelGradient, learning_rate: float) -> ToyModel:
        return ToyModel(
            cls_weights=self.cls_weights - learning_rate * grad.cls,
            reg_weights=self.reg_weights - learning_rate * grad.reg,
        )


@dataclass(frozen=True)
class ModelGradient:
    cls: np.ndarray
    reg: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.cls.ravel(), self.reg.ravel()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


# ── Elementary terms ─────────────────────────────────────────────

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def log_loss(p: Sequence[float], p_star: Sequence[float], epsilon: float = 1e-12) -> float:
    """-sum_k p*_k log p_k for a one-hot p*; zero probabilities are clamped."""
    p = np.asarray(p, dtype=float)
    p_star = np.asarray(p_star, dtype=float)
    if p.shape != p_star.shape:
        raise ValidationError("p and p_star must have the same length")
    if (p < 0).any() or (p > 1).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError("p must be a probability vector")
    true_p = float(p[int(np.argmax(p_star))])
    if true_p < epsilon:
        logger.warning("Clamping probability %.3g of the true class to %.3g", true_p, epsilon)
        true_p = epsilon
    return -float(np.log(true_p))


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_derivative(x: float) -> float:
    """x inside (-1, 1), sign(x) outside; both branches agree at |x| = 1."""
    return x if abs(x) < 1.0 else float(np.sign(x))


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def reg_loss(t: BoxOffsets, t_star: BoxOffsets) -> float:
    return sum(smooth_l1(a - b) for a, b in zip(t.as_tuple(), t_star.as_tuple()))


# ── Batch losses ─────────────────────────────────────────────────

def _clamped_true_probs(probs: np.ndarray, labels: np.ndarray, epsilon: float) -> np.ndarray:
    true_p = probs[np.arange(len(labels)), labels]
    clamped = true_p < epsilon
    if clamped.any():
        logger.warning("Clamping %d true-class probabilities to %.3g", int(clamped.sum()), epsilon)
    return np.maximum(true_p, epsilon)


def _check_batch(batch: AnchorBatch, model: ToyModel, cfg: LossConfig, what: str) -> None:
    if len(batch) == 0:
        raise ValidationError(f"{what} needs a non-empty batch")
    if not cfg.k == batch.k == model.cls_weights.shape[1]:
        raise ValidationError(
            f"{what} class counts disagree: config k={cfg.k}, batch k={batch.k}, "
            f"model k={model.cls_weights.shape[1]}"
        )


def per_anchor_terms(batch: AnchorBatch, model: ToyModel, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted, unnormalized (L_cls, p* L_reg) for every anchor."""
    _check_batch(batch, model, cfg, "Loss")
    probs = model.probabilities(batch.features)
    cls_terms = -np.log(_clamped_true_probs(probs, batch.labels, cfg.epsilon))
    diff = model.offsets(batch.features) - batch.t_star
    reg_terms = np.where(batch.positive, _smooth_l1(diff).sum(axis=1), 0.0)
    return cls_terms, reg_terms


def per_anchor_loss(batch: AnchorBatch, model: ToyModel, cfg: LossConfig) -> np.ndarray:
    """L_cls + lambda * p* L_reg per anchor, the quantity summed per group."""
    cls_terms, reg_terms = per_anchor_terms(batch, model, cfg)
    return cls_terms + cfg.lambda_ * reg_terms


def _combine(batch, model, cfg, sample_weights: np.ndarray) -> float:
    cls_terms, reg_terms = per_anchor_terms(batch, model, cfg)
    n_cls, n_reg = cfg.normalizers(len(batch))
    return float(
        np.sum(sample_weights * cls_terms) / n_cls
        + cfg.lambda_ / n_reg * np.sum(sample_weights * reg_terms)
    )


def detection_loss(batch: AnchorBatch, model: ToyModel, cfg: LossConfig) -> float:
    return _combine(batch, model, cfg, np.ones(len(batch)))


def weighted_detection_loss(
    batch: AnchorBatch, model: ToyModel, cfg: LossConfig, weights: WeightVector = UNIT_WEIGHTS,
) -> float:
    return _combine(batch, model, cfg, weights.as_array()[batch.attributes])


def loss_gradient(
    batch: AnchorBatch,
    model: ToyModel,
    cfg: LossConfig,
    weights: WeightVector = UNIT_WEIGHTS,
    sample_weights: np.ndarray | None = None,
) -> ModelGradient:
    """Exact gradient of ``weighted_detection_loss`` w.r.t. both weight matrices.

    ``sample_weights`` overrides the per-attribute weights with one weight
    per anchor (used by the per-group-mean scheme).
    """
    _check_batch(batch, model, cfg, "Gradient")
    w = weights.as_array()[batch.attributes] if sample_weights is None else sample_weights
    n_cls, n_reg = cfg.normalizers(len(batch))

    probs = model.probabilities(batch.features)
    d_logits = (w / n_cls)[:, None] * (probs - batch.p_star)

    diff = model.offsets(batch.features) - batch.t_star
    gate = (w * batch.positive * cfg.lambda_ / n_reg)[:, None]
    d_offsets = gate * _smooth_l1_grad(diff)

    return ModelGradient(
        cls=batch.features.T @ d_logits,
        reg=batch.features.T @ d_offsets,
    )


def group_of(attribute: int) -> str:
    if attribute == Attribute.LS:
        return "LS"
    if attribute == Attribute.DS:
        return "DS"
    return "O"


def group_total_loss(losses: Mapping[str, Sequence[float]], alphas: GroupAlphas) -> float:
    """Sum over groups of alpha_g times the group's mean per-instance loss.

    ``losses`` maps "LS", "DS", "O" to per-instance losses; absent or empty
    groups contribute nothing.
    """
    unknown = set(losses) - {"LS", "DS", "O"}
    if unknown:
        raise ValidationError(f"Unknown loss groups: {sorted(unknown)}")
    alpha = {"LS": alphas.alpha_ls, "DS": alphas.alpha_ds, "O": alphas.alpha_o}
    total = 0.0
    for g, values in losses.items():
        if len(values):
            total += alpha[g] / len(values) * float(np.sum(values))
    return total


def group_sample_weights(batch: AnchorBatch, alphas: GroupAlphas) -> np.ndarray:
    """Per-anchor weights alpha_g / N_g realizing the per-group-mean loss."""
    groups = np.array([group_of(a) for a in batch.attributes])
    alpha = {"LS": alphas.alpha_ls, "DS": alphas.alpha_ds, "O": alphas.alpha_o}
    weights = np.zeros(len(batch))
    for g, a in alpha.items():
        mask = groups == g
        if mask.any():
            weights[mask] = a / mask.sum()
    return weights


def group_mean_loss(batch: AnchorBatch, model: ToyModel, cfg: LossConfig, alphas: GroupAlphas) -> float:
    """``group_total_loss`` of the batch's own per-anchor losses."""
    per_anchor = per_anchor_loss(batch, model, cfg)
    groups = np.array([group_of(a) for a in batch.attributes])
    return group_total_loss({g: per_anchor[groups == g] for g in ("LS", "DS", "O")}, alphas)
