import json

import pytest

from detection_equity.dataset import (
    PERSON, Dataset, Detection, GroundTruthInstance, GroupLabel, ImageRecord, ground_truth_to_dict,
)
from detection_equity.geometry import BBox


def person(instance_id, image_id, coords, group=None, **kwargs):
    return GroundTruthInstance(
        instance_id=instance_id,
        image_id=image_id,
        bbox=BBox.from_list(coords),
        class_name=PERSON,
        group=group,
        **kwargs,
    )


def detection(image_id, coords, score, class_name=PERSON):
    return Detection(image_id, BBox.from_list(coords), class_name, score)


@pytest.fixture
def write_json(tmp_path):
    """Write ``data`` to tmp_path/name and return the path as a string."""
    def _write(name, data):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)
    return _write


@pytest.fixture
def two_group_dataset():
    """Three images with LS and DS persons large enough to pass the area filter."""
    images = [ImageRecord(i, 1280, 720) for i in ("a", "b", "c")]
    instances = [
        person("a-ls", "a", [0, 0, 100, 200], GroupLabel.LS),
        person("a-ds", "a", [300, 0, 400, 200], GroupLabel.DS),
        person("b-ds", "b", [0, 0, 100, 200], GroupLabel.DS),
        person("c-ls", "c", [500, 100, 600, 300], GroupLabel.LS),
    ]
    return Dataset(images, instances)


@pytest.fixture
def two_group_detections():
    return [
        detection("a", [0, 0, 100, 200], 0.95),
        detection("a", [300, 0, 400, 200], 0.90),
        detection("b", [700, 0, 800, 200], 0.80),   # false positive
        detection("c", [505, 100, 605, 300], 0.70),
    ]


@pytest.fixture
def two_group_files(write_json, two_group_dataset, two_group_detections):
    gt = write_json("gt.json", ground_truth_to_dict(two_group_dataset))
    dets = write_json("dets.json", [
        {"image_id": d.image_id, "bbox": d.bbox.to_list(), "class": d.class_name, "score": d.score}
        for d in two_group_detections
    ])
    return gt, dets
