"""Face-detection ingestion and region-mask rasterization.

Detections come from an external detector as JSON; only boxes small relative
to the image keep the strict-MSE treatment. The face mask and its complement
partition every pixel, and average-pooled pyramids align the masks with each
feature-loss resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DetectionsError

CONF_THRESHOLD = 0.5
SMALL_FACE_AREA_FRAC = 0.025
MIN_FACE_AREA_PX = 16.0
DILATION_PX = 4
PYRAMID_LEVELS = (0, 1, 2, 3, 4)  # strides 1, 2, 4, 8, 16


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    confidence: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DetectionsError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionsError(f"confidence {self.confidence} outside [0, 1]")
        if self.x0 < 0 or self.y0 < 0:
            raise DetectionsError("box extends past the image origin")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class DetectionSet:
    image_id: str
    boxes: list[Box] = field(default_factory=list)


@dataclass
class RegionMasks:
    """face + perc partition the HxW grid; pyramid[L] is the face mask pooled 2^L."""

    face: Tensor
    perc: Tensor
    pyramid: dict[int, Tensor]


def _parse_record(record: dict) -> DetectionSet:
    if not isinstance(record, dict) or "image" not in record:
        raise DetectionsError("detection record must be an object with an 'image' key")
    boxes = []
    for raw in record.get("boxes", []):
        if len(raw) != 5:
            raise DetectionsError(f"box needs 5 values [x0,y0,x1,y1,conf], got {raw}")
        boxes.append(Box(*[float(v) for v in raw]))
    return DetectionSet(image_id=str(record["image"]), boxes=boxes)


def load_all_detections(path: str | Path, conf_threshold: float = CONF_THRESHOLD) -> dict[str, DetectionSet]:
    """Load every record in a detections JSON file, keyed by image name."""
    path = Path(path)
    if not path.exists():
        raise DetectionsError(f"detections file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DetectionsError(
            f"malformed detections JSON at {path}:{exc.lineno}:{exc.colno}: {exc.msg}"
        ) from exc
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise DetectionsError("detections file must hold a record or list of records")
    out = {}
    for record in data:
        dset = _parse_record(record)
        dset.boxes = [b for b in dset.boxes if b.confidence >= conf_threshold]
        out[dset.image_id] = dset
    return out


def load_detections(
    path: str | Path, image: str | None = None, conf_threshold: float = CONF_THRESHOLD
) -> DetectionSet:
    """Load one image's detections; with a single-record file the name is optional."""
    records = load_all_detections(path, conf_threshold)
    if image is None:
        if len(records) != 1:
            raise DetectionsError(
                f"file holds {len(records)} records; pass the image name to pick one"
            )
        return next(iter(records.values()))
    if image not in records:
        raise DetectionsError(f"no detections record for image {image!r}")
    return records[image]


def select_small_faces(
    detections: DetectionSet,
    height: int,
    width: int,
    area_frac_max: float = SMALL_FACE_AREA_FRAC,
    min_area_px: float = MIN_FACE_AREA_PX,
) -> DetectionSet:
    """Keep boxes occupying at most ``area_frac_max`` of the image (and >= 16 px^2)."""
    image_area = float(height * width)
    kept = []
    for box in detections.boxes:
        if box.x1 > width or box.y1 > height:
            raise DetectionsError(
                f"box {(box.x0, box.y0, box.x1, box.y1)} exceeds image {width}x{height}"
            )
        if min_area_px <= box.area and box.area / image_area <= area_frac_max:
            kept.append(box)
    return DetectionSet(detections.image_id, kept)


def rasterize(
    detections: DetectionSet,
    height: int,
    width: int,
    dilation_px: int = DILATION_PX,
    levels=PYRAMID_LEVELS,
) -> RegionMasks:
    """Union of dilated boxes -> face mask; complement -> perceptual mask."""
    max_level = max(levels)
    if height % (1 << max_level) or width % (1 << max_level):
        raise DetectionsError(
            f"mask size {height}x{width} must divide by 2^{max_level} for the pyramid"
        )
    face = torch.zeros(height, width)
    for box in detections.boxes:
        y0 = max(0, math.floor(box.y0 - dilation_px))
        x0 = max(0, math.floor(box.x0 - dilation_px))
        y1 = min(height, math.ceil(box.y1 + dilation_px))
        x1 = min(width, math.ceil(box.x1 + dilation_px))
        face[y0:y1, x0:x1] = 1.0
    pyramid = {}
    for level in levels:
        if level == 0:
            pyramid[level] = face.clone()
        else:
            pyramid[level] = F.avg_pool2d(
                face.view(1, 1, height, width), kernel_size=1 << level
            )[0, 0]
    return RegionMasks(face=face, perc=1.0 - face, pyramid=pyramid)


def empty_masks(height: int, width: int, levels=PYRAMID_LEVELS) -> RegionMasks:
    """All-perceptual masks for images without detections."""
    return rasterize(DetectionSet("", []), height, width, levels=levels)
