"""Occlusion-stratified federated detection AP and Track-AP.

Matching is COCO-style greedy per (image, category); ground truth outside the
requested visibility stratum acts as an ignore target (detections matched to
it are dropped from scoring). Federated filtering follows the TAO/LVIS
convention: a category's detections in a video are scored only when the video
has ground truth for it or declares it negative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .dataset import (
    Dataset,
    HEAVY_VIS_MAX,
    PARTIAL_VIS_MAX,
    is_occluded_track,
)
from .geometry import Box, iou, spatiotemporal_iou

RECALL_SAMPLES = 101

STRATUM_NAMES = [
    "ap_vis_0_01",
    "ap_vis_01_08",
    "ap_vis_08_1",
    "ap_oof",
    "ap_all",
    "ap_modal",
]
TRACK_STRATUM_NAMES = ["track_ap_all", "track_ap_occ_0_08", "track_ap_modal"]


class ResultsError(Exception):
    """Malformed detection/track results."""


@dataclass(frozen=True)
class DetectionResult:
    image_id: int
    category_id: int
    amodal_box: Box
    score: float
    modal_box: Box | None = None
    track_id: int | None = None

    def as_dict(self) -> dict:
        out = {
            "image_id": self.image_id,
            "category_id": self.category_id,
            "bbox": self.amodal_box.as_list(),
            "score": self.score,
        }
        if self.modal_box is not None:
            out["modal_bbox"] = self.modal_box.as_list()
        if self.track_id is not None:
            out["track_id"] = self.track_id
        return out


def results_from_json_obj(arr) -> list[DetectionResult]:
    out = []
    for r in arr:
        out.append(
            DetectionResult(
                image_id=int(r["image_id"]),
                category_id=int(r["category_id"]),
                amodal_box=Box.from_list(r["bbox"]),
                score=float(r["score"]),
                modal_box=None if r.get("modal_bbox") is None else Box.from_list(r["modal_bbox"]),
                track_id=None if r.get("track_id") is None else int(r["track_id"]),
            )
        )
    return out


def load_results(path) -> list[DetectionResult]:
    try:
        with open(path) as f:
            arr = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ResultsError(f"cannot parse {path}: {e}") from e
    if not isinstance(arr, list):
        raise ResultsError(f"results file {path} must be a JSON array")
    try:
        return results_from_json_obj(arr)
    except (KeyError, TypeError, ValueError) as e:
        raise ResultsError(f"malformed results in {path}: {e}") from e


@dataclass(frozen=True)
class EvalStratum:
    """One row of the stratified AP table.

    kind: "all", "visibility_range", "out_of_frame", or "modal". Visibility
    ranges are half-open [lo, hi) except hi == 1.0, which is closed.
    """

    name: str
    kind: str
    lo: float = 0.0
    hi: float = 1.0

    @property
    def use_modal(self) -> bool:
        return self.kind == "modal"

    def contains(self, visibility: float, out_of_frame: bool) -> bool:
        if self.kind in ("all", "modal"):
            return True
        if self.kind == "out_of_frame":
            return out_of_frame
        if self.kind == "visibility_range":
            if self.hi >= 1.0:
                return self.lo <= visibility
            return self.lo <= visibility < self.hi
        raise ValueError(f"unknown stratum kind {self.kind!r}")


def default_strata() -> list[EvalStratum]:
    return [
        EvalStratum("ap_vis_0_01", "visibility_range", 0.0, HEAVY_VIS_MAX),
        EvalStratum("ap_vis_01_08", "visibility_range", HEAVY_VIS_MAX, PARTIAL_VIS_MAX),
        EvalStratum("ap_vis_08_1", "visibility_range", PARTIAL_VIS_MAX, 1.0),
        EvalStratum("ap_oof", "out_of_frame"),
        EvalStratum("ap_all", "all"),
        EvalStratum("ap_modal", "modal"),
    ]


@dataclass
class EvalConfig:
    iou_thresholds: list[float] = field(default_factory=lambda: [0.5])
    max_detections_per_image: int = 300
    strata: list[EvalStratum] = field(default_factory=default_strata)
    uncertain_policy: str = "ignore"  # or "include"

    def __post_init__(self):
        for t in self.iou_thresholds:
            if not 0 < t <= 1:
                raise ValueError(f"IoU threshold out of range: {t}")
        self.iou_thresholds = sorted(self.iou_thresholds)


@dataclass
class StratumResult:
    ap: float | None  # None when no stratum GT anywhere
    per_category: dict[int, float | None]
    counts: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "AP": self.ap,
            "per_category": {str(k): v for k, v in sorted(self.per_category.items())},
            "counts": self.counts,
        }


@dataclass
class EvalReport:
    strata: dict[str, StratumResult]

    def as_dict(self) -> dict:
        return {name: res.as_dict() for name, res in self.strata.items()}

    def ap(self, name: str) -> float | None:
        return self.strata[name].ap


def sweep_thresholds() -> list[float]:
    return [0.5 + 0.05 * i for i in range(10)]


def average_precision(det_flags: list[tuple[float, int, bool]], n_gt: int) -> float | None:
    """101-point interpolated AP.

    det_flags: (score, result_id, is_tp) for every scored detection of one
    category; ignored detections must already be removed. Returns None when
    n_gt == 0 (category excluded from averaging).
    """
    if n_gt == 0:
        return None
    ordered = sorted(det_flags, key=lambda t: (-t[0], t[1]))
    recalls = []
    precisions = []
    tp = fp = 0
    for _, _, is_tp in ordered:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    # precision envelope, then sample at 101 evenly spaced recall levels
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    total = 0.0
    j = 0
    for i in range(RECALL_SAMPLES):
        r = i / (RECALL_SAMPLES - 1)
        while j < len(recalls) and recalls[j] < r:
            j += 1
        if j < len(precisions):
            total += precisions[j]
    return total / RECALL_SAMPLES


def match_detections(gts, dets, iou_thr, stratum: EvalStratum, uncertain_policy="ignore"):
    """Greedy matching of one (image, category) cell.

    gts: AmodalAnnotation list; dets: (DetectionResult, result_id) list.
    Returns (matched_pairs, det_kinds) where det_kinds maps result_id to
    "tp", "fp" or "ignored", and matched_pairs maps result_id -> annotation id.
    """
    box_of_gt = {}
    gt_ignore = {}
    for g in gts:
        box = g.modal_box if stratum.use_modal else g.amodal_box
        ignore = not stratum.contains(g.visibility, g.out_of_frame)
        if uncertain_policy == "ignore" and g.is_uncertain:
            ignore = True
        if box is None:
            if stratum.use_modal:
                ignore = True  # fully occluded frame has no modal target
            else:
                continue
        box_of_gt[g.id] = box
        gt_ignore[g.id] = ignore

    ordered = sorted(dets, key=lambda t: (-t[0].score, t[1]))
    matched_gt: set[int] = set()
    pairs: dict[int, int] = {}
    kinds: dict[int, str] = {}
    for det, rid in ordered:
        det_box = det.modal_box if stratum.use_modal else det.amodal_box
        if det_box is None:
            kinds[rid] = "ignored"  # no modal prediction to score in this stratum
            continue
        best_id = None
        best_iou = iou_thr
        best_ignore = True
        for gid in sorted(box_of_gt):
            if gid in matched_gt or box_of_gt[gid] is None:
                continue
            ov = iou(det_box, box_of_gt[gid])
            if ov < iou_thr:
                continue
            # prefer any scorable GT over ignore GT, then highest IoU
            if best_id is not None and not best_ignore and gt_ignore[gid]:
                continue
            if best_id is None or (best_ignore and not gt_ignore[gid]) or ov > best_iou:
                best_id = gid
                best_iou = ov
                best_ignore = gt_ignore[gid]
        if best_id is None:
            kinds[rid] = "fp"
        else:
            matched_gt.add(best_id)
            pairs[rid] = best_id
            kinds[rid] = "ignored" if gt_ignore[best_id] else "tp"
    return pairs, kinds


def _video_mode(ds: Dataset, video_id: int, category_id: int, positive: set) -> str:
    """How to score a category in a video: "eval", "neg", or "skip"."""
    if (video_id, category_id) in positive:
        return "eval"
    if category_id in ds.videos[video_id].neg_category_ids:
        return "neg"
    return "skip"


def detection_ap(ds: Dataset, results: list[DetectionResult], config: EvalConfig) -> EvalReport:
    """Stratified federated detection AP over all configured strata/thresholds."""
    for r in results:
        if r.image_id not in ds.images:
            raise ResultsError(f"result references unknown image {r.image_id}")
        if r.category_id not in ds.categories:
            raise ResultsError(f"result references unknown category {r.category_id}")

    gt_by_cell: dict[tuple[int, int], list] = {}
    positive: set[tuple[int, int]] = set()
    for ann in ds.annotations:
        vid = ds.images[ann.image_id].video_id
        positive.add((vid, ann.category_id))
        gt_by_cell.setdefault((ann.image_id, ann.category_id), []).append(ann)

    dets_by_cell: dict[tuple[int, int], list] = {}
    for rid, det in enumerate(results):
        dets_by_cell.setdefault((det.image_id, det.category_id), []).append((det, rid))
    for cell, cell_dets in dets_by_cell.items():
        if len(cell_dets) > config.max_detections_per_image:
            cell_dets.sort(key=lambda t: (-t[0].score, t[1]))
            dets_by_cell[cell] = cell_dets[: config.max_detections_per_image]

    categories = sorted(
        {c for _, c in gt_by_cell} | {c for _, c in dets_by_cell}
    )
    cells_by_cat: dict[int, list[tuple[int, int]]] = {c: [] for c in categories}
    for img_id in sorted(ds.images):
        img_cats = {c for (i, c) in gt_by_cell if i == img_id} | {
            c for (i, c) in dets_by_cell if i == img_id
        }
        for c in img_cats:
            cells_by_cat[c].append((img_id, c))

    out: dict[str, StratumResult] = {}
    for stratum in config.strata:
        per_cat_ap: dict[int, float | None] = {}
        counts = {"tp": 0, "fp": 0, "fn": 0, "n_gt": 0}
        for cat in categories:
            flags_all_thr: list[float] = []
            ap_per_thr = []
            for thr in config.iou_thresholds:
                flags: list[tuple[float, int, bool]] = []
                n_gt = 0
                for img_id, _ in cells_by_cat[cat]:
                    vid = ds.images[img_id].video_id
                    mode = _video_mode(ds, vid, cat, positive)
                    if mode == "skip":
                        continue
                    not_exhaustive = cat in ds.videos[vid].not_exhaustive_category_ids
                    gts = gt_by_cell.get((img_id, cat), [])
                    dets = dets_by_cell.get((img_id, cat), [])
                    _, kinds = match_detections(
                        gts, dets, thr, stratum, config.uncertain_policy
                    )
                    for g in gts:
                        ignore = not stratum.contains(g.visibility, g.out_of_frame)
                        if config.uncertain_policy == "ignore" and g.is_uncertain:
                            ignore = True
                        if stratum.use_modal and g.modal_box is None:
                            ignore = True
                        if not ignore:
                            n_gt += 1
                    for det, rid in dets:
                        kind = kinds[rid]
                        if kind == "fp" and not_exhaustive:
                            continue  # category not exhaustively annotated here
                        if kind != "ignored":
                            flags.append((det.score, rid, kind == "tp"))
                ap_per_thr.append(average_precision(flags, n_gt))
                if thr == config.iou_thresholds[0]:
                    counts["n_gt"] += n_gt
                    n_tp = sum(1 for _, _, t in flags if t)
                    counts["tp"] += n_tp
                    counts["fp"] += sum(1 for _, _, t in flags if not t)
                    counts["fn"] += n_gt - n_tp
            valid = [a for a in ap_per_thr if a is not None]
            per_cat_ap[cat] = sum(valid) / len(valid) if valid else None
        scored = [a for a in per_cat_ap.values() if a is not None]
        out[stratum.name] = StratumResult(
            ap=sum(scored) / len(scored) if scored else None,
            per_category=per_cat_ap,
            counts=counts,
        )
    return EvalReport(out)


# ---------------------------------------------------------------------------
# Track-AP


def group_track_results(ds: Dataset, results: list[DetectionResult]):
    """Group detections by track_id; returns {track_id: (category, video, frames)}.

    frames is {frame_index: (amodal Box, modal Box | None)}. Per-track score is
    the mean of member detection scores.
    """
    tracks: dict[int, dict] = {}
    for rid, det in enumerate(results):
        if det.track_id is None:
            raise ResultsError(f"result {rid} lacks a track_id")
        img = ds.images.get(det.image_id)
        if img is None:
            raise ResultsError(f"result references unknown image {det.image_id}")
        t = tracks.setdefault(
            det.track_id,
            {"category_id": det.category_id, "video_id": img.video_id, "frames": {}, "scores": []},
        )
        if t["category_id"] != det.category_id:
            raise ResultsError(
                f"track {det.track_id} appears under categories "
                f"{t['category_id']} and {det.category_id}"
            )
        if t["video_id"] != img.video_id:
            raise ResultsError(f"track {det.track_id} spans multiple videos")
        t["frames"][img.frame_index] = (det.amodal_box, det.modal_box)
        t["scores"].append(det.score)
    for t in tracks.values():
        t["score"] = sum(t["scores"]) / len(t["scores"])
    return tracks


def _track_boxes(frames: dict, use_modal: bool):
    if use_modal:
        return [(fi, m) for fi, (_, m) in sorted(frames.items()) if m is not None]
    return [(fi, a) for fi, (a, _) in sorted(frames.items())]


def default_track_strata() -> list[EvalStratum]:
    return [
        EvalStratum("track_ap_all", "all"),
        EvalStratum("track_ap_occ_0_08", "occluded_track"),
        EvalStratum("track_ap_modal", "modal"),
    ]


def track_ap(
    ds: Dataset,
    results: list[DetectionResult],
    config: EvalConfig,
    strata: list[EvalStratum] | None = None,
) -> EvalReport:
    """Federated Track-AP via greedy spatiotemporal-IoU matching per category."""
    pred_tracks = group_track_results(ds, results)
    if strata is None:
        strata = default_track_strata()

    gt_tracks_by_cat: dict[int, list] = {}
    positive: set[tuple[int, int]] = set()
    for rec in ds.tracks.values():
        positive.add((rec.video_id, rec.category_id))
        gt_tracks_by_cat.setdefault(rec.category_id, []).append(rec)
    pred_by_cat: dict[int, list[int]] = {}
    for tid in sorted(pred_tracks):
        pred_by_cat.setdefault(pred_tracks[tid]["category_id"], []).append(tid)
    categories = sorted(set(gt_tracks_by_cat) | set(pred_by_cat))

    out: dict[str, StratumResult] = {}
    for stratum in strata:
        use_modal = stratum.kind == "modal"
        per_cat_ap: dict[int, float | None] = {}
        counts = {"tp": 0, "fp": 0, "fn": 0, "n_gt": 0}
        for cat in categories:
            ap_per_thr = []
            for thr in config.iou_thresholds:
                gt_entries = []  # (track_id, boxes, ignore)
                for rec in sorted(gt_tracks_by_cat.get(cat, []), key=lambda r: r.track_id):
                    boxes = [
                        (ds.frame_index_of(a.image_id), a.modal_box if use_modal else a.amodal_box)
                        for a in rec.annotations
                        if not (use_modal and a.modal_box is None)
                    ]
                    ignore = False
                    if stratum.kind == "occluded_track":
                        ignore = not is_occluded_track(ds, rec)
                    if config.uncertain_policy == "ignore" and all(
                        a.is_uncertain for a in rec.annotations
                    ):
                        ignore = True
                    if not boxes:
                        ignore = True
                    gt_entries.append((rec.track_id, boxes, ignore))

                flags: list[tuple[float, int, bool]] = []
                n_gt = 0
                matched: set[int] = set()
                gt_video = {rec.track_id: rec.video_id for rec in gt_tracks_by_cat.get(cat, [])}
                for tid, boxes, ignore in gt_entries:
                    if not ignore:
                        n_gt += 1
                pred_order = sorted(
                    pred_by_cat.get(cat, []),
                    key=lambda tid: (-pred_tracks[tid]["score"], tid),
                )
                for tid in pred_order:
                    t = pred_tracks[tid]
                    mode = _video_mode(ds, t["video_id"], cat, positive)
                    if mode == "skip":
                        continue
                    boxes = _track_boxes(t["frames"], use_modal)
                    if not boxes:
                        continue  # nothing scorable in the modal stratum
                    best_id = None
                    best_iou = thr
                    best_ignore = True
                    for gid, gboxes, gignore in gt_entries:
                        if gid in matched or gt_video[gid] != t["video_id"]:
                            continue
                        ov = spatiotemporal_iou(boxes, gboxes)
                        if ov < thr:
                            continue
                        if best_id is not None and not best_ignore and gignore:
                            continue
                        if best_id is None or (best_ignore and not gignore) or ov > best_iou:
                            best_id, best_iou, best_ignore = gid, ov, gignore
                    if best_id is None:
                        if cat in ds.videos[t["video_id"]].not_exhaustive_category_ids:
                            continue
                        flags.append((t["score"], tid, False))
                    else:
                        matched.add(best_id)
                        if not best_ignore:
                            flags.append((t["score"], tid, True))
                ap_per_thr.append(average_precision(flags, n_gt))
                if thr == config.iou_thresholds[0]:
                    counts["n_gt"] += n_gt
                    n_tp = sum(1 for _, _, t in flags if t)
                    counts["tp"] += n_tp
                    counts["fp"] += sum(1 for _, _, t in flags if not t)
                    counts["fn"] += n_gt - n_tp
            valid = [a for a in ap_per_thr if a is not None]
            per_cat_ap[cat] = sum(valid) / len(valid) if valid else None
        scored = [a for a in per_cat_ap.values() if a is not None]
        out[stratum.name] = StratumResult(
            ap=sum(scored) / len(scored) if scored else None,
            per_category=per_cat_ap,
            counts=counts,
        )
    return EvalReport(out)


def evaluate_all(ds: Dataset, results: list[DetectionResult], config: EvalConfig) -> EvalReport:
    """Detection AP plus Track-AP (when results carry track ids) in one report."""
    report = detection_ap(ds, results, config)
    tracked = [r for r in results if r.track_id is not None]
    if tracked and len(tracked) == len(results):
        treport = track_ap(ds, results, config)
        report.strata.update(treport.strata)
    return report
