"""Ground truth, detections, and attribute slicing.

Canonical ground-truth file:

    {"images": [{"id", "width", "height", "time_of_day"}],
     "instances": [{"id", "image_id", "bbox": [x_min, y_min, x_max, y_max],
                    "class", "group"?: "LS"|"DS"|"U"|"N", "occluded": bool}]}

Detection file: [{"image_id", "bbox": [...], "class", "score"}].

Filters never delete instances; they flip ``ignore`` so a detection on a
filtered box is neither rewarded nor penalized.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic import ValidationError as SchemaError

from detection_equity import config
from detection_equity.errors import DataFileError, ValidationError
from detection_equity.geometry import BBox, area

logger = logging.getLogger(__name__)

PERSON = "person"


class GroupLabel(str, Enum):
    LS = "LS"
    DS = "DS"
    UNKNOWN = "U"
    NOT_PERSON = "N"

    @property
    def letter(self) -> str:
        return self.value[0]

    @classmethod
    def parse(cls, raw: str) -> GroupLabel:
        try:
            return _GROUP_ALIASES[raw.strip().upper()]
        except (KeyError, AttributeError):
            raise ValidationError(f"Unknown group label: {raw!r}") from None


_GROUP_ALIASES = {
    "LS": GroupLabel.LS, "L": GroupLabel.LS,
    "DS": GroupLabel.DS, "D": GroupLabel.DS,
    "U": GroupLabel.UNKNOWN, "UNKNOWN": GroupLabel.UNKNOWN,
    "N": GroupLabel.NOT_PERSON, "NOTPERSON": GroupLabel.NOT_PERSON,
}

# Groups that take part in disparity analysis.
DISPARITY_GROUPS = (GroupLabel.LS, GroupLabel.DS)


class TimeOfDay(str, Enum):
    DAY = "day"
    NIGHT = "night"
    OTHER = "other"


# ── Domain types ─────────────────────────────────────────────────

@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    time_of_day: TimeOfDay = TimeOfDay.OTHER

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"Image {self.image_id} must have positive size")


@dataclass(frozen=True)
class GroundTruthInstance:
    instance_id: str
    image_id: str
    bbox: BBox
    class_name: str
    group: GroupLabel | None = None
    occluded: bool = False
    ignore: bool = False

    def __post_init__(self):
        if self.group is not None and self.class_name != PERSON:
            raise ValidationError(
                f"Instance {self.instance_id}: group labels are only valid for '{PERSON}'"
            )

    @property
    def is_person(self) -> bool:
        return self.class_name == PERSON


@dataclass(frozen=True)
class Detection:
    image_id: str
    bbox: BBox
    class_name: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(
                f"Detection on {self.image_id}: score {self.score} outside [0, 1]"
            )


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    instances: tuple[GroundTruthInstance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "instances", tuple(self.instances))

        image_ids = [img.image_id for img in self.images]
        dup_images = [i for i, n in Counter(image_ids).items() if n > 1]
        if dup_images:
            raise ValidationError(f"Duplicate image id: {dup_images[0]}")
        dup_instances = [
            i for i, n in Counter(inst.instance_id for inst in self.instances).items() if n > 1
        ]
        if dup_instances:
            raise ValidationError(f"Duplicate instance id: {dup_instances[0]}")

        known = set(image_ids)
        for inst in self.instances:
            if inst.image_id not in known:
                raise ValidationError(
                    f"Instance {inst.instance_id} references missing image {inst.image_id}"
                )

    @property
    def image_ids(self) -> list[str]:
        return [img.image_id for img in self.images]

    def with_instances(self, instances: Iterable[GroundTruthInstance]) -> Dataset:
        return Dataset(images=self.images, instances=tuple(instances))


# ── File schemas ─────────────────────────────────────────────────

class _ImageSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    time_of_day: TimeOfDay = TimeOfDay.OTHER


class _InstanceSchema(BaseModel):
    model_config = ConfigDict(extra="ignore", populate_by_name=True)

    id: str
    image_id: str
    bbox: list[float] = Field(min_length=4, max_length=4)
    class_name: str = Field(alias="class")
    group: str | None = None
    occluded: bool = False

    @field_validator("group")
    @classmethod
    def _known_group(cls, value: str | None) -> str | None:
        if value is not None and value.strip().upper() not in _GROUP_ALIASES:
            raise ValueError(f"unknown group {value!r}")
        return value


class _GroundTruthSchema(BaseModel):
    model_config = ConfigDict(extra="ignore")

    images: list[_ImageSchema] = []
    instances: list[_InstanceSchema] = []


class _DetectionSchema(BaseModel):
    model_config = ConfigDict(extra="ignore", populate_by_name=True)

    image_id: str
    bbox: list[float] = Field(min_length=4, max_length=4)
    class_name: str = Field(alias="class")
    score: float = Field(ge=0.0, le=1.0)


def read_json(path: str | Path):
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        raise DataFileError(f"File not found: {path}") from None
    except OSError as e:
        raise DataFileError(f"Cannot read {path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(
            f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from None


def _schema_message(error: SchemaError, records: list, id_key: str) -> str:
    """Name the offending record of a pydantic error."""
    first = error.errors()[0]
    loc = first.get("loc", ())
    label = ".".join(str(part) for part in loc)
    # loc looks like ("instances", 3, "bbox") or (3, "score")
    index = next((part for part in loc if isinstance(part, int)), None)
    if index is not None and index < len(records) and isinstance(records[index], dict):
        record_id = records[index].get(id_key)
        if record_id is not None:
            return f"record {record_id}: {first['msg']} ({label})"
    return f"{first['msg']} ({label})"


def write_json(data, path: str | Path) -> None:
    try:
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", "utf-8")
    except OSError as e:
        raise DataFileError(f"Cannot write {path}: {e}") from None


# ── Loading ──────────────────────────────────────────────────────

def load_ground_truth(path: str | Path) -> Dataset:
    raw = read_json(path)
    try:
        parsed = _GroundTruthSchema.model_validate(raw)
    except SchemaError as e:
        records = raw.get("instances", []) if isinstance(raw, dict) else []
        if e.errors()[0]["loc"][:1] == ("images",):
            records = raw.get("images", [])
        raise ValidationError(f"{path}: {_schema_message(e, records, 'id')}") from None

    images = [
        ImageRecord(img.id, img.width, img.height, img.time_of_day) for img in parsed.images
    ]
    instances = []
    for rec in parsed.instances:
        try:
            instances.append(GroundTruthInstance(
                instance_id=rec.id,
                image_id=rec.image_id,
                bbox=BBox.from_list(rec.bbox),
                class_name=rec.class_name,
                group=GroupLabel.parse(rec.group) if rec.group is not None else None,
                occluded=rec.occluded,
            ))
        except ValidationError as e:
            raise ValidationError(f"{path}: instance {rec.id}: {e}") from None
    ds = Dataset(images=tuple(images), instances=tuple(instances))
    logger.info("Loaded %d images, %d instances from %s", len(ds.images), len(ds.instances), path)
    return ds


def load_detections(path: str | Path) -> list[Detection]:
    raw = read_json(path)
    if not isinstance(raw, list):
        raise ValidationError(f"{path}: detection file must hold a JSON array")
    try:
        parsed = [_DetectionSchema.model_validate(rec) for rec in raw]
    except SchemaError as e:
        index = next(i for i, rec in enumerate(raw) if not _is_valid_detection(rec))
        raise ValidationError(
            f"{path}: detection #{index}: {e.errors()[0]['msg']}"
        ) from None

    detections = []
    for i, rec in enumerate(parsed):
        try:
            detections.append(Detection(
                rec.image_id, BBox.from_list(rec.bbox), rec.class_name, rec.score,
            ))
        except ValidationError as e:
            raise ValidationError(f"{path}: detection #{i}: {e}") from None
    logger.info("Loaded %d detections from %s", len(detections), path)
    return detections


def _is_valid_detection(record) -> bool:
    try:
        _DetectionSchema.model_validate(record)
    except SchemaError:
        return False
    return True


def ground_truth_to_dict(ds: Dataset) -> dict:
    return {
        "images": [
            {"id": img.image_id, "width": img.width, "height": img.height,
             "time_of_day": img.time_of_day.value}
            for img in ds.images
        ],
        "instances": [
            {"id": inst.instance_id, "image_id": inst.image_id, "bbox": inst.bbox.to_list(),
             "class": inst.class_name, "occluded": inst.occluded,
             **({"group": inst.group.value} if inst.group is not None else {})}
            for inst in ds.instances
        ],
    }


def dump_ground_truth(ds: Dataset, path: str | Path) -> None:
    write_json(ground_truth_to_dict(ds), path)


def dump_detections(detections: Iterable[Detection], path: str | Path) -> None:
    write_json([
        {"image_id": d.image_id, "bbox": d.bbox.to_list(), "class": d.class_name, "score": d.score}
        for d in detections
    ], path)


# BDD100K labels: [{"name", "attributes": {"timeofday"}, "labels": [{"id", "category",
# "box2d": {"x1", "y1", "x2", "y2"}, "attributes": {"occluded"}}]}]
_BDD_TIME = {"daytime": TimeOfDay.DAY, "night": TimeOfDay.NIGHT}


def convert_bdd(
    labels: list[dict],
    groups: dict[str, GroupLabel] | None = None,
    width: float = 1280,
    height: float = 720,
) -> Dataset:
    """Convert BDD100K label records into a Dataset.

    ``groups`` maps BDD label ids to group labels; non-box labels
    (lanes, drivable areas) are skipped.
    """
    groups = groups or {}
    images, instances = [], []
    for frame in labels:
        image_id = frame["name"]
        tod = (frame.get("attributes") or {}).get("timeofday", "")
        images.append(ImageRecord(image_id, width, height, _BDD_TIME.get(tod, TimeOfDay.OTHER)))
        for label in frame.get("labels") or []:
            box = label.get("box2d")
            if box is None:
                continue
            instance_id = str(label["id"])
            class_name = label["category"]
            instances.append(GroundTruthInstance(
                instance_id=instance_id,
                image_id=image_id,
                bbox=BBox(box["x1"], box["y1"], box["x2"], box["y2"]),
                class_name=class_name,
                group=groups.get(instance_id) if class_name == PERSON else None,
                occluded=bool((label.get("attributes") or {}).get("occluded", False)),
            ))
    return Dataset(images=tuple(images), instances=tuple(instances))


# ── Filters ──────────────────────────────────────────────────────

def apply_min_area_filter(ds: Dataset, threshold: float | None = None) -> Dataset:
    """Mark persons smaller than ``threshold`` square pixels as ignore."""
    if threshold is None:
        threshold = config.setting("evaluation", "min_area", 10000)
    if threshold < 0:
        raise ValidationError(f"min-area threshold must be >= 0, got {threshold}")
    return ds.with_instances(
        replace(inst, ignore=True)
        if inst.is_person and not inst.ignore and area(inst.bbox) < threshold
        else inst
        for inst in ds.instances
    )


def apply_group_labels(ds: Dataset, labels: dict[str, GroupLabel]) -> Dataset:
    """Attach group labels (e.g. consensus output) to person instances."""
    known = {inst.instance_id: inst for inst in ds.instances}
    for instance_id in labels:
        if instance_id not in known:
            raise ValidationError(f"Group label for unknown instance {instance_id}")
        if not known[instance_id].is_person:
            raise ValidationError(f"Group label for non-person instance {instance_id}")
    return ds.with_instances(
        replace(inst, group=labels[inst.instance_id]) if inst.instance_id in labels else inst
        for inst in ds.instances
    )


def disparity_scope(ds: Dataset) -> Dataset:
    """Images holding at least one non-ignored LS or DS person."""
    keep = {
        inst.image_id for inst in ds.instances
        if inst.is_person and not inst.ignore and inst.group in DISPARITY_GROUPS
    }
    return Dataset(
        images=tuple(img for img in ds.images if img.image_id in keep),
        instances=tuple(inst for inst in ds.instances if inst.image_id in keep),
    )


SliceAttribute = Literal["occlusion", "time_of_day", "group"]


def slice_by(ds: Dataset, attribute: SliceAttribute, value: str | None = None) -> Dataset:
    """Restrict a dataset by one attribute.

    occlusion:   occluded persons become ignore regions.
    time_of_day: keep only images with that value (``value`` required).
    group:       keep the images in per-group evaluation scope; the
                 positive/ignore split itself happens in ``group_evaluate``.
    """
    if attribute == "occlusion":
        return ds.with_instances(
            replace(inst, ignore=True) if inst.is_person and inst.occluded else inst
            for inst in ds.instances
        )
    if attribute == "time_of_day":
        try:
            tod = TimeOfDay(value)
        except ValueError:
            raise ValidationError(f"Unknown time of day: {value!r}") from None
        keep = {img.image_id for img in ds.images if img.time_of_day == tod}
        return Dataset(
            images=tuple(img for img in ds.images if img.image_id in keep),
            instances=tuple(inst for inst in ds.instances if inst.image_id in keep),
        )
    if attribute == "group":
        return disparity_scope(ds)
    raise ValidationError(f"Unknown slice attribute: {attribute!r}")


def group_counts(ds: Dataset, by_time_of_day: bool = False) -> dict:
    """Count non-ignored persons per group label.

    With ``by_time_of_day`` the result is nested: {time_of_day: {group: n}}.
    """
    def _count(instances) -> dict[str, int]:
        counts = Counter(
            inst.group.value for inst in instances
            if inst.is_person and not inst.ignore and inst.group is not None
        )
        return {g.value: counts.get(g.value, 0) for g in GroupLabel}

    if not by_time_of_day:
        return _count(ds.instances)
    tod_of = {img.image_id: img.time_of_day for img in ds.images}
    return {
        tod.value: _count(inst for inst in ds.instances if tod_of[inst.image_id] == tod)
        for tod in TimeOfDay
    }
