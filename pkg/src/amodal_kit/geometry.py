"""Axis-aligned box arithmetic: IoU, visibility, workspace clipping, delta coding.

Boxes are (x, y, w, h) with continuous sub-pixel coordinates and area = w * h
(no +1 correction). Amodal boxes may legally extend beyond the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: top-left corner plus size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"non-finite box: {self}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: {self}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, xywh) -> "Box":
        x, y, w, h = xywh
        return cls(float(x), float(y), float(w), float(h))


@dataclass(frozen=True)
class FrameExtent:
    """Image width/height in pixels."""

    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame extent must be positive: {self}")


@dataclass(frozen=True)
class BoxDelta:
    """Center-offset / log-size box parameterization relative to a reference."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_list(self) -> list[float]:
        return [self.dx, self.dy, self.dw, self.dh]


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    # rounding at non-representable edges can nudge the ratio past 1
    return min(inter / union, 1.0)


def visibility(modal: Box | None, amodal: Box) -> float:
    """Visible fraction proxy: IoU of modal and amodal boxes, 0 if no modal box."""
    if modal is None:
        return 0.0
    return iou(modal, amodal)


def is_out_of_frame(b: Box, frame: FrameExtent) -> bool:
    """True iff the box extends beyond [0, W) x [0, H) in any direction.

    Ties at the exact border count as in-frame. A box fully outside the
    frame also returns true.
    """
    return b.x < 0 or b.y < 0 or b.x2 > frame.width or b.y2 > frame.height


def workspace_bounds(frame: FrameExtent) -> tuple[float, float, float, float]:
    """Bounds (x0, y0, x1, y1) of the 2W x 2H center-aligned annotation workspace."""
    w, h = frame.width, frame.height
    return (-w / 2.0, -h / 2.0, 1.5 * w, 1.5 * h)


def clip_box(b: Box, x0: float, y0: float, x1: float, y1: float) -> Box:
    """Intersect a box with a rectangle; collapses to a zero-area box outside it."""
    nx = min(max(b.x, x0), x1)
    ny = min(max(b.y, y0), y1)
    nx2 = min(max(b.x2, x0), x1)
    ny2 = min(max(b.y2, y0), y1)
    return Box(nx, ny, max(nx2 - nx, 0.0), max(ny2 - ny, 0.0))


def clip_to_workspace(b: Box, frame: FrameExtent) -> Box:
    """Clip a box to the 2W x 2H center-aligned annotation workspace."""
    return clip_box(b, *workspace_bounds(frame))


def clip_to_image(b: Box, frame: FrameExtent) -> Box:
    """Clip a box to the image rectangle [0, W] x [0, H]."""
    return clip_box(b, 0.0, 0.0, frame.width, frame.height)


def spatiotemporal_iou(a, b) -> float:
    """3D IoU of two box tracks given as sequences of (frame_index, Box).

    Per-frame intersections are summed over common frames; a frame where only
    one track exists contributes that box's area to the union only.
    """
    boxes_a = dict(a)
    boxes_b = dict(b)
    inter = 0.0
    union = 0.0
    for fi in boxes_a.keys() | boxes_b.keys():
        box_a = boxes_a.get(fi)
        box_b = boxes_b.get(fi)
        if box_a is not None and box_b is not None:
            i = intersection_area(box_a, box_b)
            inter += i
            union += box_a.area + box_b.area - i
        elif box_a is not None:
            union += box_a.area
        else:
            union += box_b.area
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


def encode_delta(b: Box, ref: Box) -> BoxDelta:
    """Encode b relative to ref as (center offset / ref size, log size ratio)."""
    if ref.w <= 0 or ref.h <= 0:
        raise ValueError(f"reference box has zero size: {ref}")
    if b.w <= 0 or b.h <= 0:
        raise ValueError(f"target box has zero size: {b}")
    return BoxDelta(
        dx=(b.cx - ref.cx) / ref.w,
        dy=(b.cy - ref.cy) / ref.h,
        dw=math.log(b.w / ref.w),
        dh=math.log(b.h / ref.h),
    )


def decode_delta(d: BoxDelta, ref: Box) -> Box:
    """Invert encode_delta: recover the box described by delta d against ref."""
    if ref.w <= 0 or ref.h <= 0:
        raise ValueError(f"reference box has zero size: {ref}")
    cx = d.dx * ref.w + ref.cx
    cy = d.dy * ref.h + ref.cy
    w = math.exp(d.dw) * ref.w
    h = math.exp(d.dh) * ref.h
    return Box(cx - w / 2.0, cy - h / 2.0, w, h)
