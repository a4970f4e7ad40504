"""TAO-Amodal-style annotation container: loading, validation, stats.

The annotation file is a single JSON document with top-level arrays
`videos`, `images`, `annotations`, `categories`, `tracks`. Amodal boxes are
stored in `bbox`, visible-region boxes in `modal_bbox` (may be null for a
fully occluded frame).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import geometry
from .geometry import Box, FrameExtent

# Visibility strata are half-open so they partition [0, 1]:
# heavy [0, 0.1), partial [0.1, 0.8), non-occluded [0.8, 1.0].
HEAVY_VIS_MAX = 0.1
PARTIAL_VIS_MAX = 0.8
# A track counts as occluded when visibility <= 0.8 on more than this many
# annotated frames (frames are 1 fps, so frames == seconds).
OCCLUDED_TRACK_MIN_FRAMES = 5

VISIBILITY_TOL = 1e-6


class DatasetError(Exception):
    """Malformed or referentially inconsistent annotation file."""


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class VideoMeta:
    id: int
    name: str
    frame_extent: FrameExtent
    neg_category_ids: frozenset[int] = frozenset()
    not_exhaustive_category_ids: frozenset[int] = frozenset()


@dataclass(frozen=True)
class ImageFrame:
    id: int
    video_id: int
    frame_index: int
    frame_extent: FrameExtent
    file_name: str = ""


@dataclass
class AmodalAnnotation:
    id: int
    image_id: int
    track_id: int
    category_id: int
    amodal_box: Box
    modal_box: Box | None
    visibility: float
    is_uncertain: bool = False
    out_of_frame: bool = False


@dataclass
class TrackRecord:
    track_id: int
    category_id: int
    video_id: int
    annotations: list[AmodalAnnotation] = field(default_factory=list)


@dataclass
class ValidationIssue:
    code: str
    message: str
    annotation_id: int | None = None
    track_id: int | None = None

    def as_dict(self) -> dict:
        return {
            "code": self.code,
            "message": self.message,
            "annotation_id": self.annotation_id,
            "track_id": self.track_id,
        }


@dataclass
class StatsReport:
    n_sequences: int = 0
    n_categories: int = 0
    n_annotations: int = 0
    n_heavy_boxes: int = 0
    n_partial_boxes: int = 0
    n_nonoccluded_boxes: int = 0
    n_oof_boxes: int = 0
    n_tracks: int = 0
    n_occluded_tracks: int = 0
    mean_track_length_seconds: float = 0.0
    total_length_seconds: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Dataset:
    """In-memory, referentially linked annotation set."""

    def __init__(self, videos, images, annotations, categories):
        self.videos: dict[int, VideoMeta] = {v.id: v for v in videos}
        self.images: dict[int, ImageFrame] = {im.id: im for im in images}
        self.categories: dict[int, Category] = {c.id: c for c in categories}
        self.annotations: list[AmodalAnnotation] = list(annotations)
        self._check_integrity()
        self.tracks: dict[int, TrackRecord] = self._build_tracks()

    def _check_integrity(self):
        if len(self.videos) == 0 and self.annotations:
            raise DatasetError("annotations present but no videos")
        for im in self.images.values():
            if im.video_id not in self.videos:
                raise DatasetError(f"image {im.id} references unknown video {im.video_id}")
        for ann in self.annotations:
            if ann.image_id not in self.images:
                raise DatasetError(f"annotation {ann.id} references unknown image {ann.image_id}")
            if ann.category_id not in self.categories:
                raise DatasetError(
                    f"annotation {ann.id} references unknown category {ann.category_id}"
                )
        for v in self.videos.values():
            for cid in v.neg_category_ids | v.not_exhaustive_category_ids:
                if cid not in self.categories:
                    raise DatasetError(f"video {v.id} references unknown category {cid}")

    def _build_tracks(self) -> dict[int, TrackRecord]:
        tracks: dict[int, TrackRecord] = {}
        for ann in self.annotations:
            im = self.images[ann.image_id]
            rec = tracks.get(ann.track_id)
            if rec is None:
                rec = TrackRecord(ann.track_id, ann.category_id, im.video_id)
                tracks[ann.track_id] = rec
            rec.annotations.append(ann)
        for rec in tracks.values():
            rec.annotations.sort(key=lambda a: self.images[a.image_id].frame_index)
        return tracks

    def frame_index_of(self, image_id: int) -> int:
        return self.images[image_id].frame_index

    def annotations_by_image(self) -> dict[int, list[AmodalAnnotation]]:
        out: dict[int, list[AmodalAnnotation]] = {}
        for ann in self.annotations:
            out.setdefault(ann.image_id, []).append(ann)
        return out

    def to_json_obj(self) -> dict:
        videos = [
            {
                "id": v.id,
                "name": v.name,
                "width": v.frame_extent.width,
                "height": v.frame_extent.height,
                "neg_category_ids": sorted(v.neg_category_ids),
                "not_exhaustive_category_ids": sorted(v.not_exhaustive_category_ids),
            }
            for v in sorted(self.videos.values(), key=lambda v: v.id)
        ]
        images = [
            {
                "id": im.id,
                "video_id": im.video_id,
                "frame_index": im.frame_index,
                "width": im.frame_extent.width,
                "height": im.frame_extent.height,
                "file_name": im.file_name,
            }
            for im in sorted(self.images.values(), key=lambda im: im.id)
        ]
        annotations = [
            {
                "id": a.id,
                "image_id": a.image_id,
                "track_id": a.track_id,
                "category_id": a.category_id,
                "bbox": a.amodal_box.as_list(),
                "modal_bbox": None if a.modal_box is None else a.modal_box.as_list(),
                "visibility": a.visibility,
                "is_uncertain": int(a.is_uncertain),
                "out_of_frame": int(a.out_of_frame),
            }
            for a in sorted(self.annotations, key=lambda a: a.id)
        ]
        categories = [
            {"id": c.id, "name": c.name}
            for c in sorted(self.categories.values(), key=lambda c: c.id)
        ]
        tracks = [
            {"id": t.track_id, "category_id": t.category_id, "video_id": t.video_id}
            for t in sorted(self.tracks.values(), key=lambda t: t.track_id)
        ]
        return {
            "videos": videos,
            "images": images,
            "annotations": annotations,
            "categories": categories,
            "tracks": tracks,
        }

    def serialize(self) -> str:
        """Canonical serialization: sorted keys, shortest round-trip floats."""
        return json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.serialize())


def _parse_box(xywh) -> Box:
    if xywh is None:
        raise DatasetError("null bbox")
    if len(xywh) != 4:
        raise DatasetError(f"bbox must have 4 entries, got {xywh!r}")
    return Box.from_list(xywh)


def from_json_obj(obj: dict) -> Dataset:
    try:
        videos = [
            VideoMeta(
                id=int(v["id"]),
                name=str(v.get("name", "")),
                frame_extent=FrameExtent(float(v["width"]), float(v["height"])),
                neg_category_ids=frozenset(int(c) for c in v.get("neg_category_ids", [])),
                not_exhaustive_category_ids=frozenset(
                    int(c) for c in v.get("not_exhaustive_category_ids", [])
                ),
            )
            for v in obj.get("videos", [])
        ]
        vid_extent = {v.id: v.frame_extent for v in videos}
        images = [
            ImageFrame(
                id=int(im["id"]),
                video_id=int(im["video_id"]),
                frame_index=int(im["frame_index"]),
                frame_extent=FrameExtent(
                    float(im.get("width", vid_extent.get(int(im["video_id"]), FrameExtent(1, 1)).width)),
                    float(im.get("height", vid_extent.get(int(im["video_id"]), FrameExtent(1, 1)).height)),
                ),
                file_name=str(im.get("file_name", "")),
            )
            for im in obj.get("images", [])
        ]
        categories = [
            Category(id=int(c["id"]), name=str(c["name"])) for c in obj.get("categories", [])
        ]
        annotations = [
            AmodalAnnotation(
                id=int(a["id"]),
                image_id=int(a["image_id"]),
                track_id=int(a["track_id"]),
                category_id=int(a["category_id"]),
                amodal_box=_parse_box(a["bbox"]),
                modal_box=None if a.get("modal_bbox") is None else _parse_box(a["modal_bbox"]),
                visibility=float(a.get("visibility", 0.0)),
                is_uncertain=bool(a.get("is_uncertain", 0)),
                out_of_frame=bool(a.get("out_of_frame", 0)),
            )
            for a in obj.get("annotations", [])
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed annotation file: {e}") from e
    return Dataset(videos, images, annotations, categories)


def load_dataset(path) -> Dataset:
    """Load and link an annotation file; raises DatasetError on any defect."""
    try:
        with open(path) as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"cannot parse {path}: {e}") from e
    if not isinstance(obj, dict):
        raise DatasetError(f"annotation file {path} must be a JSON object")
    return from_json_obj(obj)


def derive_visibility(ds: Dataset) -> Dataset:
    """Recompute every annotation's visibility and out_of_frame flag in place."""
    for ann in ds.annotations:
        ann.visibility = geometry.visibility(ann.modal_box, ann.amodal_box)
        extent = ds.images[ann.image_id].frame_extent
        ann.out_of_frame = geometry.is_out_of_frame(ann.amodal_box, extent)
    return ds


def validate(ds: Dataset) -> list[ValidationIssue]:
    """Check annotation-level invariants; violations come back as a report."""
    issues: list[ValidationIssue] = []
    seen: set[tuple[int, int]] = set()
    for ann in ds.annotations:
        extent = ds.images[ann.image_id].frame_extent
        key = (ann.track_id, ann.image_id)
        if key in seen:
            issues.append(
                ValidationIssue(
                    "duplicate_track_frame",
                    f"track {ann.track_id} annotated twice on image {ann.image_id}",
                    annotation_id=ann.id,
                    track_id=ann.track_id,
                )
            )
        seen.add(key)
        geom_vis = geometry.visibility(ann.modal_box, ann.amodal_box)
        if abs(ann.visibility - geom_vis) > VISIBILITY_TOL:
            issues.append(
                ValidationIssue(
                    "visibility_mismatch",
                    f"stored visibility {ann.visibility:.6f} differs from geometric "
                    f"{geom_vis:.6f}",
                    annotation_id=ann.id,
                )
            )
        if ann.out_of_frame != geometry.is_out_of_frame(ann.amodal_box, extent):
            issues.append(
                ValidationIssue(
                    "out_of_frame_mismatch",
                    "stored out_of_frame flag disagrees with box geometry",
                    annotation_id=ann.id,
                )
            )
        x0, y0, x1, y1 = geometry.workspace_bounds(extent)
        b = ann.amodal_box
        if b.x < x0 or b.y < y0 or b.x2 > x1 or b.y2 > y1:
            issues.append(
                ValidationIssue(
                    "amodal_outside_workspace",
                    "amodal box extends beyond the 2Wx2H annotation workspace",
                    annotation_id=ann.id,
                )
            )
    for rec in ds.tracks.values():
        indices = [ds.frame_index_of(a.image_id) for a in rec.annotations]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            issues.append(
                ValidationIssue(
                    "track_frames_not_increasing",
                    f"track {rec.track_id} has repeated or unordered frames",
                    track_id=rec.track_id,
                )
            )
        cats = {a.category_id for a in rec.annotations}
        if len(cats) > 1:
            issues.append(
                ValidationIssue(
                    "track_category_mismatch",
                    f"track {rec.track_id} spans categories {sorted(cats)}",
                    track_id=rec.track_id,
                )
            )
        vids = {ds.images[a.image_id].video_id for a in rec.annotations}
        if len(vids) > 1:
            issues.append(
                ValidationIssue(
                    "track_video_mismatch",
                    f"track {rec.track_id} spans videos {sorted(vids)}",
                    track_id=rec.track_id,
                )
            )
    return issues


def is_occluded_track(ds: Dataset, rec: TrackRecord) -> bool:
    """Visibility <= 0.8 on more than 5 annotated frames (seconds at 1 fps)."""
    n_low = sum(1 for a in rec.annotations if a.visibility <= PARTIAL_VIS_MAX)
    return n_low > OCCLUDED_TRACK_MIN_FRAMES


def stats(ds: Dataset) -> StatsReport:
    """Dataset-level occlusion statistics (heavy / partial / OoF / occluded tracks)."""
    rep = StatsReport()
    rep.n_sequences = len(ds.videos)
    rep.n_categories = len(ds.categories)
    rep.n_annotations = len(ds.annotations)
    for ann in ds.annotations:
        if ann.visibility < HEAVY_VIS_MAX:
            rep.n_heavy_boxes += 1
        elif ann.visibility < PARTIAL_VIS_MAX:
            rep.n_partial_boxes += 1
        else:
            rep.n_nonoccluded_boxes += 1
        if ann.out_of_frame:
            rep.n_oof_boxes += 1
    rep.n_tracks = len(ds.tracks)
    lengths = []
    for rec in ds.tracks.values():
        if is_occluded_track(ds, rec):
            rep.n_occluded_tracks += 1
        first = ds.frame_index_of(rec.annotations[0].image_id)
        last = ds.frame_index_of(rec.annotations[-1].image_id)
        lengths.append(float(last - first))
    rep.mean_track_length_seconds = sum(lengths) / len(lengths) if lengths else 0.0
    per_video: dict[int, list[int]] = {}
    for im in ds.images.values():
        per_video.setdefault(im.video_id, []).append(im.frame_index)
    rep.total_length_seconds = float(
        sum(max(fi) - min(fi) for fi in per_video.values() if fi)
    )
    return rep
