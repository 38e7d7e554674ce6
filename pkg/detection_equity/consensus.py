"""Annotator vote aggregation.

Each person box gets votes from several annotators (three by default).
A label held by a strict majority becomes the consensus label; anything
else is discarded. Only LS / DS consensus feeds disparity analysis, but
U and N consensus is kept so the dataset can be cleaned.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from pydantic import BaseModel, ConfigDict
from pydantic import ValidationError as SchemaError

from detection_equity import config
from detection_equity.dataset import DISPARITY_GROUPS, GroupLabel, read_json
from detection_equity.errors import ValidationError

logger = logging.getLogger(__name__)

DISCARDED = "Discarded"

# Canonical letter order inside histogram patterns.
_PATTERN_ORDER = {GroupLabel.LS: 0, GroupLabel.DS: 1, GroupLabel.UNKNOWN: 2, GroupLabel.NOT_PERSON: 3}


def _votes_per_record() -> int:
    return int(config.setting("consensus", "votes_per_record", 3))


# ── Types ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class VoteRecord:
    instance_id: str
    votes: tuple[GroupLabel, ...]

    def __post_init__(self):
        object.__setattr__(self, "votes", tuple(self.votes))
        if not self.votes:
            raise ValidationError(f"Instance {self.instance_id} has no votes")


@dataclass(frozen=True)
class ConsensusResult:
    instance_id: str
    label: GroupLabel | None  # None means discarded
    agreement: int | None = None

    def __post_init__(self):
        if (self.label is None) != (self.agreement is None):
            raise ValidationError(
                f"Instance {self.instance_id}: agreement is set iff a label is assigned"
            )

    @property
    def discarded(self) -> bool:
        return self.label is None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "label": DISCARDED if self.label is None else self.label.value,
            "agreement": self.agreement,
        }


@dataclass(frozen=True)
class RateComparison:
    consensus_rate: float
    reference_rate: float

    @property
    def difference(self) -> float:
        return self.consensus_rate - self.reference_rate


class _VoteSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    instance_id: str
    votes: list[str]


# ── Loading ──────────────────────────────────────────────────────

def load_votes(path: str | Path) -> list[VoteRecord]:
    """Read a votes file: [{"instance_id", "votes": ["L", "D", "U", "N", ...]}]."""
    raw = read_json(path)
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: votes file must hold a JSON array")
    records = []
    seen = set()
    for i, item in enumerate(raw):
        try:
            parsed = _VoteSchema.model_validate(item)
        except SchemaError as e:
            raise ValidationError(f"{path}: vote record #{i}: {e.errors()[0]['msg']}") from None
        if parsed.instance_id in seen:
            raise ValidationError(f"{path}: duplicate vote record {parsed.instance_id}")
        seen.add(parsed.instance_id)
        votes = tuple(GroupLabel.parse(v) for v in parsed.votes)
        records.append(VoteRecord(parsed.instance_id, votes))
    logger.info("Loaded %d vote records from %s", len(records), path)
    return records


# ── Operations ───────────────────────────────────────────────────

def aggregate(record: VoteRecord, votes_per_record: int | None = None) -> ConsensusResult:
    """Majority label (held by more than half the voters) or discarded."""
    expected = votes_per_record or _votes_per_record()
    if len(record.votes) != expected:
        raise ValidationError(
            f"Instance {record.instance_id}: expected {expected} votes, got {len(record.votes)}"
        )
    label, count = Counter(record.votes).most_common(1)[0]
    if 2 * count > expected:
        return ConsensusResult(record.instance_id, label, count)
    return ConsensusResult(record.instance_id, None)


def aggregate_all(records: list[VoteRecord], votes_per_record: int | None = None) -> list[ConsensusResult]:
    ids = Counter(r.instance_id for r in records)
    dup = next((i for i, n in ids.items() if n > 1), None)
    if dup is not None:
        raise ValidationError(f"Duplicate vote record {dup}")
    return [aggregate(r, votes_per_record) for r in records]


def disparity_labels(results: list[ConsensusResult]) -> dict[str, GroupLabel]:
    return {r.instance_id: r.label for r in results if r.label in DISPARITY_GROUPS}


def agreement_slice(results: list[ConsensusResult], agreement: int) -> list[str]:
    """Ids of labeled results with exactly ``agreement`` matching votes."""
    return [r.instance_id for r in results if r.agreement == agreement]


def vote_pattern(votes) -> str:
    """Order-free pattern key, e.g. [DS, LS, LS] -> "LLD"."""
    return "".join(v.letter for v in sorted(votes, key=_PATTERN_ORDER.__getitem__))


def _pattern_sort_key(pattern: str) -> tuple:
    letters = {g.letter: _PATTERN_ORDER[g] for g in GroupLabel}
    return tuple(letters[c] for c in pattern)


def vote_histogram(records: list[VoteRecord]) -> dict[str, int]:
    counts = Counter(vote_pattern(r.votes) for r in records)
    return {p: counts[p] for p in sorted(counts, key=_pattern_sort_key)}


def group_rate(labels: dict[str, GroupLabel]) -> float:
    """Fraction of DS among LS/DS labels."""
    if not labels:
        raise ValidationError("Group rate is undefined for an empty label set")
    bad = next((i for i, g in labels.items() if g not in DISPARITY_GROUPS), None)
    if bad is not None:
        raise ValidationError(f"Instance {bad}: rate needs LS or DS labels, got {labels[bad].value}")
    ds = sum(1 for g in labels.values() if g == GroupLabel.DS)
    return ds / len(labels)


def compare_rates(
    consensus_labels: dict[str, GroupLabel],
    reference_labels: dict[str, GroupLabel],
) -> RateComparison:
    """Annotator-bias check: DS rate of crowd consensus vs. a hand-labeled set."""
    return RateComparison(group_rate(consensus_labels), group_rate(reference_labels))
