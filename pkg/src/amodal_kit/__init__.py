"""Amodal tracking toolkit: stratified evaluation, Kalman coasting tracker,
PasteNOcclude augmentation, and the amodal expander regressor."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Box,
    BoxDelta,
    FrameExtent,
    clip_to_workspace,
    decode_delta,
    encode_delta,
    iou,
    is_out_of_frame,
    spatiotemporal_iou,
    visibility,
)
