"""PasteNOcclude: synthetic occlusion by pasting masked object segments.

Occluder segments are placed with size and location drawn only for the first
and last frames of a clip; intermediate frames interpolate linearly. Pasted
segments are appended to the ground truth as new tracks; existing annotations
are left untouched.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import geometry
from .dataset import AmodalAnnotation, Dataset
from .geometry import Box, FrameExtent


class SegmentBankError(Exception):
    """Malformed segment bank or placement."""


@dataclass(frozen=True)
class SegmentAsset:
    asset_id: int
    source_image: str
    bbox: Box
    mask_area: float
    category_id: int
    mask_path: str = ""

    def fill_ratio(self) -> float:
        if self.bbox.area <= 0:
            raise SegmentBankError(f"asset {self.asset_id} has zero-area bbox")
        return self.mask_area / self.bbox.area

    def load_mask(self, root: str = "") -> np.ndarray:
        path = os.path.join(root, self.mask_path) if root else self.mask_path
        mask = np.asarray(Image.open(path).convert("L"))
        return mask > 127


@dataclass
class PnOConfig:
    n_segments_range: tuple[int, int] = (1, 7)
    size_range: tuple[float, float] = (12.0, 192.0)
    sequence_length: int = 8
    mask_fill_min: float = 0.7
    seed: int = 0
    allow_out_of_frame: bool = True
    lock_endpoint_sizes: bool = False
    recompute_occludee_visibility: bool = False

    def __post_init__(self):
        lo, hi = self.n_segments_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad segment count range: {self.n_segments_range}")
        if self.size_range[0] <= 0 or self.size_range[1] < self.size_range[0]:
            raise ValueError(f"bad size range: {self.size_range}")
        if not 0 < self.mask_fill_min <= 1:
            raise ValueError(f"mask_fill_min out of (0,1]: {self.mask_fill_min}")


@dataclass(frozen=True)
class Placement:
    asset_id: int
    first_frame_box: Box
    last_frame_box: Box


def load_segment_bank(path) -> list[SegmentAsset]:
    try:
        with open(path) as f:
            arr = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SegmentBankError(f"cannot parse {path}: {e}") from e
    assets = []
    for a in arr:
        assets.append(
            SegmentAsset(
                asset_id=int(a["asset_id"]),
                source_image=str(a.get("source_image", "")),
                bbox=Box.from_list(a["bbox"]),
                mask_area=float(a["mask_area"]),
                category_id=int(a["category_id"]),
                mask_path=str(a.get("mask_path", "")),
            )
        )
    return assets


def filter_segment_bank(assets, mask_fill_min: float = 0.7) -> list[SegmentAsset]:
    """Drop occluder candidates whose mask covers too little of their box."""
    return [a for a in assets if a.fill_ratio() >= mask_fill_min]


def interpolate_box(first: Box, last: Box, t: float) -> Box:
    """Component-wise linear interpolation of (x, y, w, h); t in [0, 1].

    Uses the convex form (1-t)*first + t*last so the endpoints reproduce the
    input boxes exactly.
    """
    u = 1.0 - t
    return Box(
        u * first.x + t * last.x,
        u * first.y + t * last.y,
        u * first.w + t * last.w,
        u * first.h + t * last.h,
    )


def sequence_rng(seed: int, sequence_id: int) -> np.random.Generator:
    """Per-sequence RNG stream so parallel augmentation is order-independent."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(sequence_id,)))


def _sample_endpoint(rng, config: PnOConfig, frame: FrameExtent, size=None) -> Box:
    lo, hi = config.size_range
    if size is None:
        w = rng.uniform(lo, hi)
        h = rng.uniform(lo, hi)
    else:
        w, h = size
    if config.allow_out_of_frame:
        # center anywhere such that at least one pixel stays inside the image
        cx = rng.uniform(-w / 2 + 1, frame.width + w / 2 - 1)
        cy = rng.uniform(-h / 2 + 1, frame.height + h / 2 - 1)
    else:
        cx = rng.uniform(w / 2, max(frame.width - w / 2, w / 2))
        cy = rng.uniform(h / 2, max(frame.height - h / 2, h / 2))
    return Box(cx - w / 2, cy - h / 2, w, h)


def sample_placements(
    rng: np.random.Generator, config: PnOConfig, frame: FrameExtent, bank
) -> list[Placement]:
    """Draw k ~ U[n_segments_range] placements with endpoint boxes in size_range."""
    if not bank:
        raise SegmentBankError("segment bank is empty after filtering")
    lo, hi = config.n_segments_range
    k = int(rng.integers(lo, hi + 1))
    placements = []
    for _ in range(k):
        asset = bank[int(rng.integers(0, len(bank)))]
        first = _sample_endpoint(rng, config, frame)
        size = (first.w, first.h) if config.lock_endpoint_sizes else None
        last = _sample_endpoint(rng, config, frame, size=size)
        placements.append(Placement(asset.asset_id, first, last))
    return placements


def _paste(frame_px: np.ndarray, mask: np.ndarray, patch: np.ndarray, box: Box):
    """Hard-composite a nearest-neighbor-resized masked patch at an integer box."""
    H, W = frame_px.shape[:2]
    x0, y0 = int(round(box.x)), int(round(box.y))
    bw, bh = max(int(round(box.w)), 1), max(int(round(box.h)), 1)
    # nearest-neighbor index maps for the resize
    src_h, src_w = mask.shape
    ys = (np.arange(bh) * src_h // bh).clip(0, src_h - 1)
    xs = (np.arange(bw) * src_w // bw).clip(0, src_w - 1)
    mask_r = mask[np.ix_(ys, xs)]
    patch_r = patch[np.ix_(ys, xs)]
    ty0, ty1 = max(y0, 0), min(y0 + bh, H)
    tx0, tx1 = max(x0, 0), min(x0 + bw, W)
    if ty0 >= ty1 or tx0 >= tx1:
        return
    sy0, sx0 = ty0 - y0, tx0 - x0
    m = mask_r[sy0 : sy0 + (ty1 - ty0), sx0 : sx0 + (tx1 - tx0)]
    p = patch_r[sy0 : sy0 + (ty1 - ty0), sx0 : sx0 + (tx1 - tx0)]
    region = frame_px[ty0:ty1, tx0:tx1]
    region[m] = p[m]


def apply(
    ds: Dataset,
    video_id: int,
    placements: list[Placement],
    bank,
    frames: list[np.ndarray] | None = None,
    mask_root: str = "",
    patches: dict[int, np.ndarray] | None = None,
) -> Dataset:
    """Composite placements over one video's frames and extend its ground truth.

    frames: optional per-frame uint8 images modified in place. Annotation
    bookkeeping alone needs no pixels. Returns ds (mutated).
    """
    assets = {a.asset_id: a for a in bank}
    for p in placements:
        if p.asset_id not in assets:
            raise SegmentBankError(f"placement references unknown asset {p.asset_id}")

    images = sorted(
        (im for im in ds.images.values() if im.video_id == video_id),
        key=lambda im: im.frame_index,
    )
    if not images:
        return ds
    L = len(images)
    next_ann_id = max((a.id for a in ds.annotations), default=0) + 1
    next_track_id = max(ds.tracks.keys(), default=0) + 1

    masks: dict[int, np.ndarray] = {}
    if frames is not None:
        for p in placements:
            if p.asset_id not in masks:
                masks[p.asset_id] = assets[p.asset_id].load_mask(mask_root)

    new_anns = []
    for pi, p in enumerate(placements):
        track_id = next_track_id + pi
        asset = assets[p.asset_id]
        for fi, im in enumerate(images):
            t = fi / (L - 1) if L > 1 else 0.0
            placed = interpolate_box(p.first_frame_box, p.last_frame_box, t)
            extent = im.frame_extent
            amodal = geometry.clip_to_workspace(placed, extent)
            modal = geometry.clip_to_image(placed, extent)
            modal_box = None if modal.area <= 0 else modal
            ann = AmodalAnnotation(
                id=next_ann_id,
                image_id=im.id,
                track_id=track_id,
                category_id=asset.category_id,
                amodal_box=amodal,
                modal_box=modal_box,
                visibility=geometry.visibility(modal_box, amodal),
                is_uncertain=False,
                out_of_frame=geometry.is_out_of_frame(amodal, extent),
            )
            next_ann_id += 1
            new_anns.append(ann)
            if frames is not None:
                mask = masks[p.asset_id]
                if patches is not None and p.asset_id in patches:
                    patch = patches[p.asset_id]
                else:
                    patch = np.full(mask.shape + frames[fi].shape[2:], 127, dtype=frames[fi].dtype)
                _paste(frames[fi], mask, patch, placed)

    ds.annotations.extend(new_anns)
    ds.tracks = ds._build_tracks()
    return ds


def augment_dataset(ds: Dataset, bank, config: PnOConfig) -> Dataset:
    """Sample and apply placements for every video, seeded per sequence."""
    filtered = filter_segment_bank(bank, config.mask_fill_min)
    for video_id in sorted(ds.videos):
        images = [im for im in ds.images.values() if im.video_id == video_id]
        if not images:
            continue
        rng = sequence_rng(config.seed, video_id)
        extent = images[0].frame_extent
        placements = sample_placements(rng, config, extent, filtered)
        apply(ds, video_id, placements, filtered)
    return ds
