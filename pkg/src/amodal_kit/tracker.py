"""Online amodal tracker: constant-velocity Kalman filter with IoU association.

Unmatched tracks coast on their Kalman prediction and keep emitting boxes
(with a decayed score) so that fully occluded objects still produce output,
which is what lifts AP in the heavy-occlusion stratum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box, iou
from .metrics import DetectionResult

STATE_DIM = 8  # [cx, cy, w, h, vcx, vcy, vw, vh]
MEAS_DIM = 4
COAST_SCORE_DECAY = 0.9


@dataclass
class KalmanState:
    mean: np.ndarray  # (8,)
    covariance: np.ndarray  # (8, 8)

    def box(self) -> Box:
        cx, cy, w, h = self.mean[:4]
        w = max(float(w), 1e-6)
        h = max(float(h), 1e-6)
        return Box(float(cx) - w / 2, float(cy) - h / 2, w, h)


@dataclass
class TrackerConfig:
    iou_gate: float = 0.3
    max_coast: int = 10
    min_hits: int = 2
    process_noise_scale: float = 1e-2
    measurement_noise_scale: float = 1e-2
    init_velocity_var: float = 1e4
    emit_coasted: bool = True

    def __post_init__(self):
        if self.max_coast < 1:
            raise ValueError("max_coast must be >= 1")
        if self.process_noise_scale < 0 or self.measurement_noise_scale <= 0:
            raise ValueError("noise scales must be positive")


def _transition() -> np.ndarray:
    F = np.eye(STATE_DIM)
    F[:MEAS_DIM, MEAS_DIM:] = np.eye(MEAS_DIM)
    return F


def _measurement_matrix() -> np.ndarray:
    H = np.zeros((MEAS_DIM, STATE_DIM))
    H[:, :MEAS_DIM] = np.eye(MEAS_DIM)
    return H


_F = _transition()
_H = _measurement_matrix()


def init_state(box: Box, config: TrackerConfig) -> KalmanState:
    mean = np.array([box.cx, box.cy, box.w, box.h, 0.0, 0.0, 0.0, 0.0])
    scale = max(box.w * box.h, 1.0)
    cov = np.diag(
        [config.measurement_noise_scale * scale] * MEAS_DIM
        + [config.init_velocity_var * scale] * MEAS_DIM
    )
    return KalmanState(mean, cov)


def kf_predict(state: KalmanState, config: TrackerConfig) -> KalmanState:
    """Advance one frame under the constant-velocity model."""
    scale = max(float(state.mean[2] * state.mean[3]), 1.0)
    Q = np.eye(STATE_DIM) * config.process_noise_scale * scale
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + Q
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean, cov)


def kf_update(state: KalmanState, measurement: Box, config: TrackerConfig) -> KalmanState:
    """Standard Kalman measurement update on [cx, cy, w, h]."""
    if measurement.w <= 0 or measurement.h <= 0:
        raise ValueError(f"measurement must have positive size: {measurement}")
    z = np.array([measurement.cx, measurement.cy, measurement.w, measurement.h])
    scale = max(measurement.w * measurement.h, 1.0)
    R = np.eye(MEAS_DIM) * config.measurement_noise_scale * scale
    S = _H @ state.covariance @ _H.T + R
    K = state.covariance @ _H.T @ np.linalg.inv(S)
    mean = state.mean + K @ (z - _H @ state.mean)
    # Joseph form keeps the posterior covariance symmetric PSD
    A = np.eye(STATE_DIM) - K @ _H
    cov = A @ state.covariance @ A.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    return KalmanState(mean, cov)


@dataclass
class TrackHypothesis:
    track_id: int
    state: KalmanState
    category_id: int
    score: float
    hits: int = 1
    age: int = 1
    time_since_update: int = 0
    status: str = "tentative"  # tentative | confirmed | coasting | dead


def associate(tracks, detections, iou_gate):
    """Min-cost one-to-one assignment of predicted track boxes to detections.

    Cost is 1 - IoU, gated at iou_gate; association is per category. Returns
    (matches, unmatched_track_indices, unmatched_detection_indices) with
    matches as (track_index, detection_index) pairs sorted for determinism.
    """
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    n_t, n_d = len(tracks), len(detections)
    iou_mat = np.zeros((n_t, n_d))
    for ti, (tbox, tcat) in enumerate(tracks):
        for di, (dbox, dcat) in enumerate(detections):
            if tcat == dcat:
                iou_mat[ti, di] = iou(tbox, dbox)
    # gated pairs get a prohibitive cost so the assignment avoids them
    # whenever an admissible pairing exists
    cost = np.where(iou_mat >= iou_gate, 1.0 - iou_mat, 1e6)
    rows, cols = linear_sum_assignment(cost)
    matches = []
    for ti, di in zip(rows, cols):
        if iou_mat[ti, di] >= iou_gate:
            matches.append((int(ti), int(di)))
    matches.sort()
    matched_t = {t for t, _ in matches}
    matched_d = {d for _, d in matches}
    unmatched_t = [i for i in range(n_t) if i not in matched_t]
    unmatched_d = [i for i in range(n_d) if i not in matched_d]
    return matches, unmatched_t, unmatched_d


class AmodalTracker:
    """Stateful single-sequence tracker. Feed frames strictly in time order."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.tracks: list[TrackHypothesis] = []
        self._next_id = 1
        self._frame_count = 0
        self._last_frame_index: int | None = None

    def step(self, frame_index: int, detections: list[DetectionResult]) -> list[DetectionResult]:
        """Process one frame; returns emitted boxes carrying track ids."""
        if self._last_frame_index is not None and frame_index <= self._last_frame_index:
            raise ValueError(
                f"out-of-order frame index {frame_index} after {self._last_frame_index}"
            )
        self._last_frame_index = frame_index
        self._frame_count += 1
        cfg = self.config

        for trk in self.tracks:
            trk.state = kf_predict(trk.state, cfg)
            trk.age += 1

        track_boxes = [(t.state.box(), t.category_id) for t in self.tracks]
        det_boxes = [(d.amodal_box, d.category_id) for d in detections]
        matches, unmatched_t, unmatched_d = associate(track_boxes, det_boxes, cfg.iou_gate)

        emitted: list[DetectionResult] = []
        for ti, di in matches:
            trk = self.tracks[ti]
            det = detections[di]
            trk.state = kf_update(trk.state, det.amodal_box, cfg)
            trk.hits += 1
            trk.time_since_update = 0
            trk.score = det.score
            if trk.hits >= cfg.min_hits:
                trk.status = "confirmed"
            if trk.status == "confirmed" or self._frame_count <= cfg.min_hits:
                emitted.append(
                    DetectionResult(
                        image_id=det.image_id,
                        category_id=det.category_id,
                        amodal_box=trk.state.box(),
                        modal_box=det.modal_box,
                        score=det.score,
                        track_id=trk.track_id,
                    )
                )

        for ti in unmatched_t:
            trk = self.tracks[ti]
            trk.time_since_update += 1
            if trk.time_since_update > cfg.max_coast:
                trk.status = "dead"
                continue
            if trk.status in ("confirmed", "coasting"):
                trk.status = "coasting"
                if cfg.emit_coasted:
                    emitted.append(
                        DetectionResult(
                            image_id=-1,  # caller rewrites to the frame's image id
                            category_id=trk.category_id,
                            amodal_box=trk.state.box(),
                            score=trk.score * COAST_SCORE_DECAY**trk.time_since_update,
                            track_id=trk.track_id,
                        )
                    )

        for di in unmatched_d:
            det = detections[di]
            trk = TrackHypothesis(
                track_id=self._next_id,
                state=init_state(det.amodal_box, cfg),
                category_id=det.category_id,
                score=det.score,
            )
            self._next_id += 1
            self.tracks.append(trk)
            if cfg.min_hits <= 1 or self._frame_count <= cfg.min_hits:
                trk.status = "confirmed" if cfg.min_hits <= 1 else trk.status
                emitted.append(
                    DetectionResult(
                        image_id=det.image_id,
                        category_id=det.category_id,
                        amodal_box=trk.state.box(),
                        modal_box=det.modal_box,
                        score=det.score,
                        track_id=trk.track_id,
                    )
                )

        self.tracks = [t for t in self.tracks if t.status != "dead"]
        return emitted


def run_sequence(ds, video_id: int, results, config: TrackerConfig | None = None):
    """Track one video: frame-grouped detections in, track results out.

    results: DetectionResult list (track_id ignored); frames are taken from the
    dataset's image table for the video so empty frames still advance time.
    """
    frames = sorted(
        (im for im in ds.images.values() if im.video_id == video_id),
        key=lambda im: im.frame_index,
    )
    by_image: dict[int, list[DetectionResult]] = {}
    for det in results:
        by_image.setdefault(det.image_id, []).append(det)
    tracker = AmodalTracker(config)
    out: list[DetectionResult] = []
    for im in frames:
        dets = sorted(
            by_image.get(im.id, []), key=lambda d: (-d.score, d.amodal_box.x, d.amodal_box.y)
        )
        for rec in tracker.step(im.frame_index, dets):
            if rec.image_id == -1:
                rec = DetectionResult(
                    image_id=im.id,
                    category_id=rec.category_id,
                    amodal_box=rec.amodal_box,
                    modal_box=rec.modal_box,
                    score=rec.score,
                    track_id=rec.track_id,
                )
            out.append(rec)
    return out


def run_all_sequences(ds, results, config: TrackerConfig | None = None):
    """Track every video in the dataset independently, with globally unique ids."""
    out: list[DetectionResult] = []
    id_offset = 0
    for video_id in sorted(ds.videos):
        vid_image_ids = {im.id for im in ds.images.values() if im.video_id == video_id}
        vid_results = [r for r in results if r.image_id in vid_image_ids]
        seq = run_sequence(ds, video_id, vid_results, config)
        max_id = 0
        for rec in seq:
            max_id = max(max_id, rec.track_id)
            out.append(
                DetectionResult(
                    image_id=rec.image_id,
                    category_id=rec.category_id,
                    amodal_box=rec.amodal_box,
                    modal_box=rec.modal_box,
                    score=rec.score,
                    track_id=rec.track_id + id_offset,
                )
            )
        id_offset += max_id
    return out
