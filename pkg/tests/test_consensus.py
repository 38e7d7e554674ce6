from collections import Counter

import numpy as np
import pytest
from pytest import approx

from detection_equity.consensus import (
    DISCARDED, ConsensusResult, VoteRecord, aggregate, aggregate_all, agreement_slice,
    compare_rates, disparity_labels, group_rate, load_votes, vote_histogram, vote_pattern,
)
from detection_equity.dataset import GroupLabel
from detection_equity.errors import ValidationError

LS, DS, U, N = GroupLabel.LS, GroupLabel.DS, GroupLabel.UNKNOWN, GroupLabel.NOT_PERSON


def labels(n_ls, n_ds):
    out = {f"ls{i}": LS for i in range(n_ls)}
    out.update({f"ds{i}": DS for i in range(n_ds)})
    return out


@pytest.mark.parametrize("votes, label, agreement", [
    ((LS, LS, LS), LS, 3),
    ((LS, LS, DS), LS, 2),
    ((DS, U, DS), DS, 2),
    ((N, N, U), N, 2),
    ((LS, DS, U), None, None),
])
def test_aggregate(votes, label, agreement):
    result = aggregate(VoteRecord("x", votes), votes_per_record=3)
    assert result.label == label
    assert result.agreement == agreement


def test_aggregate_wrong_vote_count():
    with pytest.raises(ValidationError):
        aggregate(VoteRecord("x", (LS, LS)), votes_per_record=3)


def test_aggregate_five_voters_needs_three():
    assert aggregate(VoteRecord("x", (LS, LS, DS, DS, U)), 5).label is None
    assert aggregate(VoteRecord("x", (LS, LS, LS, DS, U)), 5).label == LS


def test_result_invariant():
    with pytest.raises(ValidationError):
        ConsensusResult("x", LS, None)
    assert ConsensusResult("x", None).to_dict()["label"] == DISCARDED


def test_duplicate_records_rejected():
    with pytest.raises(ValidationError):
        aggregate_all([VoteRecord("x", (LS, LS, LS)), VoteRecord("x", (DS, DS, DS))], 3)


def test_disparity_labels_keep_only_ls_ds():
    results = [
        ConsensusResult("id1", LS, 3),
        ConsensusResult("id2", U, 2),
        ConsensusResult("id3", None),
    ]
    assert disparity_labels(results) == {"id1": LS}
    assert disparity_labels([ConsensusResult("a", None)]) == {}


def test_disparity_labels_random_corpus():
    rng = np.random.default_rng(11)
    pool = [LS, DS, U, N]
    records = [
        VoteRecord(f"r{i}", tuple(pool[j] for j in rng.integers(0, 4, size=3))) for i in range(100)
    ]
    expected = 0
    for r in records:
        label, count = Counter(r.votes).most_common(1)[0]
        if count >= 2 and label in (LS, DS):
            expected += 1
    assert len(disparity_labels(aggregate_all(records, 3))) == expected


def test_histogram_normalizes_order():
    assert vote_histogram([VoteRecord("x", (DS, LS, LS))]) == {"LLD": 1}
    assert vote_histogram([]) == {}
    assert vote_pattern((N, U, DS)) == "DUN"


def test_histogram_random_corpus():
    rng = np.random.default_rng(12)
    pool = [LS, DS, U, N]
    records = [
        VoteRecord(f"r{i}", tuple(pool[j] for j in rng.integers(0, 4, size=3))) for i in range(300)
    ]
    histogram = vote_histogram(records)
    assert sum(histogram.values()) == 300
    tally = Counter("".join(sorted(v.letter for v in r.votes)) for r in records)
    by_multiset = Counter()
    for pattern, count in histogram.items():
        by_multiset["".join(sorted(pattern))] += count
    assert by_multiset == tally


def test_histogram_keys_in_canonical_order():
    records = [VoteRecord("a", (N, N, N)), VoteRecord("b", (LS, LS, LS)), VoteRecord("c", (LS, LS, DS))]
    assert list(vote_histogram(records)) == ["LLL", "LLD", "NNN"]


@pytest.mark.parametrize("n_ls, n_ds, expected", [
    (2724, 789, 0.2246),
    (387, 100, 0.2053),
])
def test_group_rate_matches_reported_splits(n_ls, n_ds, expected):
    assert group_rate(labels(n_ls, n_ds)) == approx(expected, abs=5e-4)


def test_group_rate_edge_cases():
    assert group_rate(labels(5, 0)) == 0.0
    with pytest.raises(ValidationError):
        group_rate({})
    with pytest.raises(ValidationError):
        group_rate({"a": U})


def test_compare_rates():
    comparison = compare_rates(labels(2724, 789), labels(387, 100))
    assert comparison.difference == approx(789 / 3513 - 100 / 487)


def test_agreement_slice():
    results = [ConsensusResult("a", LS, 3), ConsensusResult("b", DS, 2), ConsensusResult("c", None)]
    assert agreement_slice(results, 3) == ["a"]
    assert agreement_slice(results, 2) == ["b"]


def test_load_votes(write_json):
    path = write_json("votes.json", [
        {"instance_id": "p1", "votes": ["L", "L", "D"]},
        {"instance_id": "p2", "votes": ["DS", "unknown", "N"]},
    ])
    records = load_votes(path)
    assert records[0].votes == (LS, LS, DS)
    assert records[1].votes == (DS, U, N)


def test_load_votes_rejects_bad_label(write_json):
    with pytest.raises(ValidationError):
        load_votes(write_json("votes.json", [{"instance_id": "p1", "votes": ["L", "Q", "D"]}]))
