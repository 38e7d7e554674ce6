import numpy as np
import pytest
from pytest import approx

from conftest import detection, person
from detection_equity.dataset import Dataset, GroupLabel, ImageRecord
from detection_equity.errors import ValidationError
from detection_equity.geometry import BBox, iou
from detection_equity.matching import (
    COCO_THRESHOLDS, AbsentReport, APReport, MatchOutcome, MatchStatus, average_precision,
    evaluate, group_evaluate, group_gap, instance_losses, match, predictive_inequity,
)

LS, DS = GroupLabel.LS, GroupLabel.DS


# ── Independent references ───────────────────────────────────────

def reference_statuses(dets, gts, threshold):
    """Enumerate every one-to-one detection/truth assignment and keep the one
    that visiting detections by descending score admits: each detection holds
    the best free overlap >= threshold (lowest index on ties), or none is free.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    overlap = [[iou(dets[i].bbox, g.bbox) for g in gts] for i in order]
    candidates = [
        [j for j, g in enumerate(gts) if not g.ignore and row[j] >= threshold] for row in overlap
    ]

    def assignments(k, used):
        if k == len(order):
            yield ()
            return
        for choice in [None, *candidates[k]]:
            if choice in used:
                continue
            taken = used if choice is None else used | {choice}
            for rest in assignments(k + 1, taken):
                yield (choice, *rest)

    def admissible(assignment):
        taken = set()
        for row, options, choice in zip(overlap, candidates, assignment):
            free = [j for j in options if j not in taken]
            if choice is None:
                if free:
                    return False
                continue
            if any(row[j] > row[choice] or (row[j] == row[choice] and j < choice) for j in free):
                return False
            taken.add(choice)
        return True

    admitted = [a for a in assignments(0, frozenset()) if admissible(a)]
    assert len(admitted) == 1
    out = []
    for i, row, choice in zip(order, overlap, admitted[0]):
        if choice is not None:
            out.append((dets[i].score, "TP"))
        elif any(g.ignore and row[j] >= threshold for j, g in enumerate(gts)):
            out.append((dets[i].score, "IGNORED"))
        else:
            out.append((dets[i].score, "FP"))
    return out


def reference_ap(entries, n_gt):
    """Max precision at recall >= r, read off the full PR staircase."""
    counted = sorted((e for e in entries if e[1] != "IGNORED"), key=lambda e: -e[0])
    points = []
    tp = fp = 0
    for _, status in counted:
        if status == "TP":
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        candidates = [p for rec, p in points if rec >= r]
        total += max(candidates) if candidates else 0.0
    return total / 101


def random_box(rng, around=None):
    if around is not None:
        jitter = rng.normal(0, 4, size=4)
        coords = np.array(around.to_list()) + jitter
        if coords[2] - coords[0] < 2 or coords[3] - coords[1] < 2:
            return around
        return BBox.from_list(coords)
    x, y = rng.uniform(0, 60, size=2)
    w, h = rng.uniform(10, 40, size=2)
    return BBox(x, y, x + w, y + h)


def random_instance(rng, n_images=1, max_gt=6, max_det=8):
    """Up to ``max_gt`` ground-truth boxes and ``max_det`` detections, some ignored, scores distinct."""
    gts, dets = [], []
    n_gt = int(rng.integers(1, max_gt + 1))
    n_det = int(rng.integers(0, max_det + 1))
    for j in range(n_gt):
        image_id = f"img{j % n_images}"
        gts.append(person(f"g{j}", image_id, random_box(rng).to_list(), ignore=bool(rng.random() < 0.2)))
    scores = rng.permutation(np.linspace(0.05, 0.95, n_det)) if n_det else []
    for i in range(n_det):
        if rng.random() < 0.7:
            anchor = gts[int(rng.integers(0, n_gt))]
            box, image_id = random_box(rng, anchor.bbox), anchor.image_id
        else:
            box, image_id = random_box(rng), f"img{int(rng.integers(0, n_images))}"
        dets.append(detection(image_id, box.to_list(), float(scores[i])))
    return dets, gts


def reference_report(dets, gts, thresholds=COCO_THRESHOLDS):
    image_ids = sorted({g.image_id for g in gts} | {d.image_id for d in dets})
    n_gt = sum(1 for g in gts if not g.ignore)
    values = []
    for t in thresholds:
        entries = []
        for image_id in image_ids:
            entries += reference_statuses(
                [d for d in dets if d.image_id == image_id],
                [g for g in gts if g.image_id == image_id],
                t,
            )
        values.append(None if n_gt == 0 else reference_ap(entries, n_gt))
    return values, n_gt


# ── match ────────────────────────────────────────────────────────

def test_single_pair_true_positive():
    gt = person("g", "a", [0, 0, 10, 10])
    det = detection("a", [0, 0, 10, 12], 0.9)  # IoU 100/120
    outcome = match([det], [gt], 0.75)
    assert outcome.statuses == (MatchStatus.TP,)
    assert outcome.matched_ids == ("g",)


def test_ignored_ground_truth_absorbs_detection():
    gt = person("g", "a", [0, 0, 10, 10], ignore=True)
    det = detection("a", [0, 0, 10, 11], 0.9)
    outcome = match([det], [gt], 0.5)
    assert outcome.statuses == (MatchStatus.IGNORED,)
    assert outcome.n_gt == 0


def test_non_ignored_preferred_over_ignore_region():
    gts = [
        person("ign", "a", [0, 0, 10, 10], ignore=True),
        person("real", "a", [0, 0, 10, 12]),
    ]
    outcome = match([detection("a", [0, 0, 10, 10], 0.9)], gts, 0.5)
    assert outcome.statuses == (MatchStatus.TP,)
    assert outcome.matched_ids == ("real",)


def test_duplicate_detection_is_false_positive():
    gt = person("g", "a", [0, 0, 10, 10])
    dets = [detection("a", [0, 0, 10, 10], 0.6), detection("a", [0, 0, 10, 10], 0.9)]
    outcome = match(dets, [gt], 0.5)
    assert outcome.scores == (0.9, 0.6)
    assert outcome.statuses == (MatchStatus.TP, MatchStatus.FP)


def test_match_requires_single_image_and_class():
    with pytest.raises(ValidationError):
        match([detection("a", [0, 0, 1, 1], 0.5)], [person("g", "b", [0, 0, 1, 1])], 0.5)
    with pytest.raises(ValidationError):
        match([detection("a", [0, 0, 1, 1], 0.5, "car")], [person("g", "a", [0, 0, 1, 1])], 0.5)


@pytest.mark.parametrize("threshold", [0.0, -0.1, 1.5])
def test_threshold_range(threshold):
    with pytest.raises(ValidationError):
        match([], [], threshold)


def test_match_agrees_with_reference_on_random_instances():
    rng = np.random.default_rng(21)
    for _ in range(300):
        dets, gts = random_instance(rng, max_gt=4, max_det=5)
        threshold = float(rng.choice(COCO_THRESHOLDS))
        outcome = match(dets, gts, threshold)
        expected = reference_statuses(dets, gts, threshold)
        assert [s.value for s in outcome.statuses] == [status for _, status in expected]


def test_detection_order_does_not_change_outcome():
    rng = np.random.default_rng(26)
    for _ in range(200):
        dets, gts = random_instance(rng)
        threshold = float(rng.choice(COCO_THRESHOLDS))
        perm = rng.permutation(len(dets))
        shuffled = [dets[i] for i in perm]
        before, after = match(dets, gts, threshold), match(shuffled, gts, threshold)
        assert after.scores == before.scores
        assert after.statuses == before.statuses
        assert after.matched_ids == before.matched_ids
        assert after.n_gt == before.n_gt
        assert [int(perm[p]) for p in after.positions] == list(before.positions)


def test_tied_scores_follow_detection_position():
    dets = [detection("a", [0, 0, 10, 10], 0.9), detection("a", [0, 0, 10, 10], 0.9)]
    outcome = match(dets, [person("g", "a", [0, 0, 10, 10])], 0.5, positions=[7, 3])
    assert outcome.positions == (3, 7)
    assert outcome.statuses == (MatchStatus.TP, MatchStatus.FP)
    with pytest.raises(ValidationError):
        match(dets, [], 0.5, positions=[0])


# ── average_precision ────────────────────────────────────────────

def test_ap_perfect_and_all_false():
    gt = person("g", "a", [0, 0, 10, 10])
    hit = match([detection("a", [0, 0, 10, 10], 0.9)], [gt], 0.5)
    miss = match([detection("a", [50, 50, 60, 60], 0.9)], [gt], 0.5)
    assert average_precision([hit], 1) == 1.0
    assert average_precision([miss], 1) == 0.0


def test_ap_without_ground_truth_is_absent():
    assert average_precision([], 0) is None
    with pytest.raises(ValidationError):
        average_precision([], -1)


def test_ap_fixed_staircase():
    statuses = [MatchStatus.TP, MatchStatus.FP, MatchStatus.TP, MatchStatus.FP,
                MatchStatus.TP, MatchStatus.FP, MatchStatus.TP]
    scores = tuple(np.linspace(0.9, 0.3, 7))
    outcome = MatchOutcome(scores=scores, statuses=tuple(statuses), matched_ids=(None,) * 7, n_gt=5)
    entries = [(s, st.value) for s, st in zip(scores, statuses)]
    assert average_precision([outcome], 5) == approx(reference_ap(entries, 5), abs=1e-12)


def test_all_points_interpolation():
    statuses = (MatchStatus.TP, MatchStatus.FP, MatchStatus.TP)
    outcome = MatchOutcome(scores=(0.9, 0.8, 0.7), statuses=statuses, matched_ids=(None,) * 3, n_gt=2)
    # recall 0.5 at precision 1, recall 1.0 at precision 2/3
    assert average_precision([outcome], 2, "all_points") == approx(0.5 * 1 + 0.5 * 2 / 3)
    with pytest.raises(ValidationError):
        average_precision([outcome], 2, "eleven")


# ── evaluate ─────────────────────────────────────────────────────

def test_evaluate_perfect_detector():
    gts = [person(f"g{i}", f"img{i}", [0, 0, 100, 200]) for i in range(3)]
    dets = [detection(g.image_id, g.bbox.to_list(), 1.0) for g in gts]
    report = evaluate(dets, gts, COCO_THRESHOLDS)
    assert report.ap == report.ap50 == report.ap75 == 1.0


def test_evaluate_straddles_thresholds():
    gts = [person("g", "a", [0, 0, 10, 10])]
    dets = [detection("a", [0, 0, 10, 6], 0.9)]  # IoU 0.6
    report = evaluate(dets, gts, COCO_THRESHOLDS)
    assert report.ap50 == 1.0
    assert report.ap75 == 0.0


def test_evaluate_without_ground_truth_is_absent():
    report = evaluate([detection("a", [0, 0, 1, 1], 0.5)], [], COCO_THRESHOLDS)
    assert isinstance(report, AbsentReport)
    assert report.metric("AP") is None


def test_evaluate_matches_reference_on_random_instances():
    rng = np.random.default_rng(22)
    checked = 0
    for _ in range(150):
        dets, gts = random_instance(rng, n_images=int(rng.integers(1, 3)), max_gt=4, max_det=5)
        expected, n_gt = reference_report(dets, gts)
        report = evaluate(dets, gts, COCO_THRESHOLDS)
        if n_gt == 0:
            assert isinstance(report, AbsentReport)
            continue
        checked += 1
        assert report.per_threshold == approx(expected, abs=1e-9)
    assert checked >= 120


def test_tied_scores_do_not_depend_on_ground_truth_order():
    ga = person("ga", "a", [0, 0, 10, 10])
    gb = person("gb", "b", [0, 0, 10, 10])
    miss_then_hit = [detection("b", [50, 50, 60, 60], 0.5), detection("a", [0, 0, 10, 10], 0.5)]
    forward = evaluate(miss_then_hit, [ga, gb], [0.5])
    backward = evaluate(miss_then_hit, [gb, ga], [0.5])
    assert forward.per_threshold == backward.per_threshold
    # precision 0 then 1/2, both at recall <= 1/2
    assert forward.ap50 == approx(51 * 0.5 / 101)
    hit_then_miss = miss_then_hit[::-1]
    assert evaluate(hit_then_miss, [gb, ga], [0.5]).ap50 == approx(51 / 101)


def test_dropping_a_false_positive_never_lowers_ap():
    rng = np.random.default_rng(27)
    for _ in range(150):
        dets, gts = random_instance(rng)
        if all(g.ignore for g in gts):
            continue
        threshold = float(rng.choice(COCO_THRESHOLDS))
        outcome = match(dets, gts, threshold)
        false_positives = [p for p, s in zip(outcome.positions, outcome.statuses) if s == MatchStatus.FP]
        for interpolation in ("101", "all_points"):
            base = evaluate(dets, gts, [threshold], interpolation).ap
            for p in false_positives:
                kept = [d for i, d in enumerate(dets) if i != p]
                assert evaluate(kept, gts, [threshold], interpolation).ap >= base - 1e-12


def test_metric_ordering_and_rescale_invariance():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        dets, gts = random_instance(rng)
        if all(g.ignore for g in gts):
            continue
        report = evaluate(dets, gts, COCO_THRESHOLDS)
        assert report.ap50 >= report.ap75
        assert report.at(0.95) - 1e-12 <= report.ap <= report.ap50 + 1e-12
        rescaled = [
            detection(d.image_id, d.bbox.to_list(), d.score ** 3) for d in dets
        ]
        assert evaluate(rescaled, gts, COCO_THRESHOLDS).per_threshold == report.per_threshold


# ── Per-group evaluation ─────────────────────────────────────────

def test_single_group_dataset_equals_plain_evaluation():
    images = [ImageRecord("a", 1280, 720), ImageRecord("b", 1280, 720)]
    gts = [person("p1", "a", [0, 0, 100, 200], LS), person("p2", "b", [0, 0, 100, 200], LS)]
    dets = [detection("a", [0, 0, 100, 190], 0.8), detection("b", [300, 0, 400, 200], 0.6)]
    ds = Dataset(images, gts)
    assert group_evaluate(dets, ds, LS) == evaluate(dets, gts)


def test_other_group_hit_is_ignored_not_false_positive():
    ds = Dataset([ImageRecord("a", 1280, 720)], [
        person("ls", "a", [0, 0, 100, 200], LS),
        person("ds", "a", [300, 0, 400, 200], DS),
    ])
    dets = [detection("a", [300, 0, 400, 200], 0.9)]
    ignore_report = group_evaluate(dets, ds, LS, cross_group="ignore", thresholds=[0.5])
    assert (ignore_report.tp, ignore_report.fp, ignore_report.ignored) == ((0,), (0,), (1,))
    fp_report = group_evaluate(dets, ds, LS, cross_group="fp", thresholds=[0.5])
    assert (fp_report.tp, fp_report.fp, fp_report.ignored) == ((0,), (1,), (0,))


def test_unknown_persons_are_always_ignored():
    ds = Dataset([ImageRecord("a", 1280, 720)], [
        person("ls", "a", [0, 0, 100, 200], LS),
        person("u", "a", [300, 0, 400, 200], GroupLabel.UNKNOWN),
    ])
    dets = [detection("a", [300, 0, 400, 200], 0.9), detection("a", [0, 0, 100, 200], 0.5)]
    report = group_evaluate(dets, ds, LS, cross_group="fp", thresholds=[0.5])
    assert report.ignored == (1,)
    assert report.ap50 == 1.0


def test_group_without_instances_is_absent(caplog):
    ds = Dataset([ImageRecord("a", 1280, 720)], [person("ls", "a", [0, 0, 100, 200], LS)])
    report = group_evaluate([], ds, DS)
    assert isinstance(report, AbsentReport)
    assert "DS" in report.reason
    assert "absent" in caplog.text


def test_group_evaluate_rejects_non_disparity_group(two_group_dataset):
    with pytest.raises(ValidationError):
        group_evaluate([], two_group_dataset, GroupLabel.UNKNOWN)


def test_group_tallies_match_manual_recount():
    rng = np.random.default_rng(24)
    for _ in range(60):
        images = [ImageRecord(f"img{i}", 1280, 720) for i in range(3)]
        gts = []
        for j in range(int(rng.integers(2, 7))):
            group = [LS, DS, GroupLabel.UNKNOWN][int(rng.integers(0, 3))]
            gts.append(person(f"g{j}", f"img{j % 3}", random_box(rng).to_list(), group))
        dets = []
        for i in range(int(rng.integers(1, 9))):
            anchor = gts[int(rng.integers(0, len(gts)))]
            dets.append(detection(anchor.image_id, random_box(rng, anchor.bbox).to_list(), float(rng.random())))
        ds = Dataset(images, gts)

        for group in (LS, DS):
            report = group_evaluate(dets, ds, group, cross_group="ignore", thresholds=[0.5])
            in_scope = {g.image_id for g in gts if g.group in (LS, DS)}
            if not any(g.group == group for g in gts):
                assert isinstance(report, AbsentReport)
                continue
            tally = {"TP": 0, "FP": 0, "IGNORED": 0}
            for image_id in sorted(in_scope):
                manual = [
                    person(g.instance_id, g.image_id, g.bbox.to_list(), g.group, ignore=g.group != group)
                    for g in gts if g.image_id == image_id
                ]
                for _, status in reference_statuses([d for d in dets if d.image_id == image_id], manual, 0.5):
                    tally[status] += 1
            assert (report.tp[0], report.fp[0], report.ignored[0]) == (tally["TP"], tally["FP"], tally["IGNORED"])


# ── Predictive inequity ──────────────────────────────────────────

def test_inequity_examples():
    assert predictive_inequity([0.1], [0.5]) == 0.0
    assert predictive_inequity([0.5], [0.1]) == approx(0.4)
    with pytest.raises(ValidationError):
        predictive_inequity([], [0.1])


def test_inequity_matches_double_loop():
    rng = np.random.default_rng(25)
    for _ in range(100):
        a = rng.random(int(rng.integers(1, 21)))
        b = rng.random(int(rng.integers(1, 21)))
        total = 0.0
        for x in a:
            for y in b:
                total += max(x - y, 0.0)
        assert predictive_inequity(a, b) == approx(total / (len(a) * len(b)), abs=1e-12)


def test_inequity_identities():
    assert predictive_inequity([0.1, 0.2], [0.3, 0.9]) == 0.0
    ls, ds = [0.6, 0.9, 0.7], [0.1, 0.4]
    assert predictive_inequity(ls, ds) == approx(np.mean(ls) - np.mean(ds), abs=1e-12)


def test_instance_losses(two_group_dataset, two_group_detections):
    assert instance_losses(two_group_detections, two_group_dataset, LS, score_cutoff=0.85) == [0.0, 1.0]
    assert instance_losses(two_group_detections, two_group_dataset, DS, score_cutoff=0.85) == [0.0, 1.0]


# ── Group gap ────────────────────────────────────────────────────

def test_group_gap_on_two_group_fixture(two_group_dataset, two_group_detections):
    report = group_gap(two_group_detections, two_group_dataset, name="fixture")
    assert isinstance(report.report_ls, APReport)
    assert report.report_ls.ap50 == approx((51 + 50 * 2 / 3) / 101)
    assert report.report_ds.ap50 == approx(51 / 101)
    assert report.gaps["AP50"] == approx(report.report_ls.ap50 - report.report_ds.ap50)
    assert report.inequity == approx(0.25)
    assert report.inequity_reverse == approx(0.25)
    assert report.to_dict()["name"] == "fixture"
