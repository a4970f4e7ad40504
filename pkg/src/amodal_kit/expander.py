"""Amodal expander: residual box regressor turning modal proposals amodal.

A two-layer MLP (hidden 256, ReLU, dropout 0.2) consumes a proposal feature
vector concatenated with a 256-dim sinusoidal encoding of the modal box delta
and predicts the delta from the proposal to the amodal box. Training uses
smooth-L1 loss with hand-derived gradients so they can be checked against
finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, BoxDelta, decode_delta, encode_delta, iou

HIDDEN_DIM = 256
PE_DIM = 256
PE_PER_COMPONENT = PE_DIM // 4
PE_BASE = 10000.0
OUT_DIM = 4


def encode_delta_pe(delta: BoxDelta) -> np.ndarray:
    """256-dim sinusoidal encoding: 4 delta components x 64 interleaved sin/cos."""
    comps = np.asarray(delta.as_list(), dtype=float)
    n_freq = PE_PER_COMPONENT // 2
    j = np.arange(n_freq)
    inv_freq = PE_BASE ** (-2.0 * j / PE_PER_COMPONENT)
    args = comps[:, None] * inv_freq[None, :]  # (4, 32)
    out = np.empty((4, PE_PER_COMPONENT))
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out.reshape(-1)


@dataclass
class ExpanderParams:
    w1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (4, hidden)
    b2: np.ndarray  # (4,)

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1] - PE_DIM

    def copy(self) -> "ExpanderParams":
        return ExpanderParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def save(self, path):
        obj = {
            "feature_dim": self.feature_dim,
            "hidden_dim": self.w1.shape[0],
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
        }
        with open(path, "w") as f:
            json.dump(obj, f)

    @classmethod
    def load(cls, path) -> "ExpanderParams":
        with open(path) as f:
            obj = json.load(f)
        return cls(
            np.asarray(obj["w1"], dtype=float),
            np.asarray(obj["b1"], dtype=float),
            np.asarray(obj["w2"], dtype=float),
            np.asarray(obj["b2"], dtype=float),
        )


def init_params(feature_dim: int, rng: np.random.Generator, hidden_dim: int = HIDDEN_DIM) -> ExpanderParams:
    """He-style first layer; zero final layer so the net starts as the identity."""
    in_dim = feature_dim + PE_DIM
    bound = math.sqrt(6.0 / in_dim)
    w1 = rng.uniform(-bound, bound, size=(hidden_dim, in_dim))
    return ExpanderParams(
        w1=w1,
        b1=np.zeros(hidden_dim),
        w2=np.zeros((OUT_DIM, hidden_dim)),
        b2=np.zeros(OUT_DIM),
    )


@dataclass(frozen=True)
class ProposalSample:
    proposal_box: Box
    feature: np.ndarray
    modal_delta: BoxDelta
    modal_gt: Box | None = None
    amodal_gt: Box | None = None
    matched: bool = False


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    iterations: int = 2000
    batch_size: int = 4
    dropout_prob: float = 0.2
    warmup_iters: int = 100
    match_iou: float = 0.5
    smooth_l1_beta: float = 1.0
    seed: int = 0
    log_every: int = 100
    loss_space: str = "delta"  # or "box" for raw-coordinate ablation

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must be in [0, 1)")


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0):
    """Huber loss summed over components; returns (loss, dloss/dpred)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    e = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    ae = np.abs(e)
    quad = ae < beta
    loss = float(np.sum(np.where(quad, 0.5 * e * e / beta, ae - 0.5 * beta)))
    grad = np.where(quad, e / beta, np.sign(e))
    return loss, grad


def _inputs(samples) -> np.ndarray:
    return np.stack(
        [np.concatenate([np.asarray(s.feature, dtype=float), encode_delta_pe(s.modal_delta)]) for s in samples]
    )


def forward(
    params: ExpanderParams,
    feature: np.ndarray,
    modal_delta: BoxDelta,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    dropout_prob: float = 0.2,
) -> np.ndarray:
    """Predict the 4-vector amodal delta for one proposal."""
    x = np.concatenate([np.asarray(feature, dtype=float), encode_delta_pe(modal_delta)])
    if x.shape[0] != params.w1.shape[1]:
        raise ValueError(f"input dim {x.shape[0]} != expected {params.w1.shape[1]}")
    h = np.maximum(params.w1 @ x + params.b1, 0.0)
    if train_mode and dropout_prob > 0:
        if rng is None:
            raise ValueError("train_mode forward needs an rng for the dropout mask")
        mask = rng.random(h.shape) >= dropout_prob
        h = h * mask / (1.0 - dropout_prob)
    return params.w2 @ h + params.b2


def match_proposals(proposals: list[Box], modal_gts: list[Box], match_iou: float = 0.5):
    """Assign each proposal to its max-IoU modal GT (many-to-one) above threshold.

    Returns a list of GT indices, None where unmatched.
    """
    out = []
    for p in proposals:
        best, best_iou = None, match_iou
        for gi, g in enumerate(modal_gts):
            ov = iou(p, g)
            if ov > best_iou or (best is None and ov >= match_iou):
                best, best_iou = gi, ov
        out.append(best)
    return out


def loss_and_grads(
    params: ExpanderParams,
    batch: list[ProposalSample],
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
):
    """Mean smooth-L1 over the batch plus exact reverse-mode gradients.

    Targets are the amodal GT encoded against each proposal box. dropout_mask
    overrides random sampling (used by the finite-difference check); pass
    config.dropout_prob == 0 or an all-ones mask for deterministic behavior.
    """
    if not batch:
        raise ValueError("empty batch")
    for s in batch:
        if not s.matched or s.amodal_gt is None:
            raise ValueError("loss requires matched samples with amodal ground truth")
    X = _inputs(batch)  # (B, in_dim)
    B = X.shape[0]
    if config.loss_space == "box":
        targets = np.array([s.amodal_gt.as_list() for s in batch])
    else:
        targets = np.array(
            [encode_delta(s.amodal_gt, s.proposal_box).as_list() for s in batch]
        )

    Z1 = X @ params.w1.T + params.b1  # (B, hidden)
    H = np.maximum(Z1, 0.0)
    p = config.dropout_prob
    if dropout_mask is not None:
        M = dropout_mask
    elif p > 0 and rng is not None:
        M = rng.random(H.shape) >= p
    else:
        M = np.ones_like(H, dtype=bool)
    keep = 1.0 - p if p > 0 else 1.0
    Hd = H * M / keep
    out = Hd @ params.w2.T + params.b2  # (B, 4)

    if config.loss_space == "box":
        # decode in box space: out is still a delta; map through decode_delta
        preds = np.array(
            [
                decode_delta(BoxDelta(*out[i]), batch[i].proposal_box).as_list()
                for i in range(B)
            ]
        )
        loss, dpred = smooth_l1(preds, targets, config.smooth_l1_beta)
        # chain through decode: d(box)/d(delta) per sample
        dout = np.zeros_like(out)
        for i in range(B):
            ref = batch[i].proposal_box
            w = math.exp(out[i, 2]) * ref.w
            h = math.exp(out[i, 3]) * ref.h
            gx, gy, gw, gh = dpred[i]
            dout[i, 0] = gx * ref.w
            dout[i, 1] = gy * ref.h
            dout[i, 2] = gw * w + gx * (-w / 2)
            dout[i, 3] = gh * h + gy * (-h / 2)
    else:
        loss, dpred = smooth_l1(out, targets, config.smooth_l1_beta)
        dout = dpred
    loss /= B
    dout = dout / B

    g_w2 = dout.T @ Hd
    g_b2 = dout.sum(axis=0)
    dHd = dout @ params.w2
    dZ1 = dHd * M / keep * (Z1 > 0)
    g_w1 = dZ1.T @ X
    g_b1 = dZ1.sum(axis=0)
    grads = ExpanderParams(g_w1, g_b1, g_w2, g_b2)
    return loss, grads, M


def lr_at(step: int, config: TrainConfig) -> float:
    """Warmup then cosine decay to zero over the remaining iterations."""
    if config.iterations <= 0:
        return config.base_lr
    warmup = min(config.warmup_iters, config.iterations)
    if step < warmup:
        return config.base_lr * (step + 1) / warmup
    span = max(config.iterations - warmup, 1)
    t = (step - warmup) / span
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def train(samples: list[ProposalSample], config: TrainConfig):
    """Plain gradient descent over matched samples; returns (params, loss curve)."""
    matched = [s for s in samples if s.matched and s.amodal_gt is not None]
    if not matched:
        raise ValueError("no matched samples to train on")
    rng = np.random.default_rng(config.seed)
    params = init_params(len(matched[0].feature), rng)
    curve = []
    n = len(matched)
    for step in range(config.iterations):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        batch = [matched[i] for i in idx]
        loss, grads, _ = loss_and_grads(params, batch, config, rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"training diverged at iteration {step}: loss={loss}")
        lr = lr_at(step, config)
        params.w1 -= lr * grads.w1
        params.b1 -= lr * grads.b1
        params.w2 -= lr * grads.w2
        params.b2 -= lr * grads.b2
        if step % config.log_every == 0 or step == config.iterations - 1:
            curve.append((step, loss))
    return params, curve


def expand(params: ExpanderParams, samples: list[ProposalSample]) -> list[Box]:
    """Inference: decode each sample's predicted delta against its proposal."""
    out = []
    for s in samples:
        delta = forward(params, s.feature, s.modal_delta, train_mode=False)
        out.append(decode_delta(BoxDelta(*delta), s.proposal_box))
    return out


def scale_box(b: Box, factor: float) -> Box:
    """Scale a box about its center."""
    w, h = b.w * factor, b.h * factor
    return Box(b.cx - w / 2, b.cy - h / 2, w, h)


def make_scaling_task(
    n: int,
    rng: np.random.Generator,
    feature_dim: int = 8,
    scale: float = 1.5,
    jitter: float = 0.03,
) -> list[ProposalSample]:
    """Synthetic task: amodal GT is the modal box scaled about its center.

    The feature vector carries the scale factor; proposals are jittered modal
    boxes, so the learned mapping rescales and recenters correctly.
    """
    samples = []
    for _ in range(n):
        w = rng.uniform(20, 120)
        h = rng.uniform(20, 120)
        x = rng.uniform(0, 400)
        y = rng.uniform(0, 400)
        modal = Box(x, y, w, h)
        amodal = scale_box(modal, scale)
        jx = rng.normal(0, jitter * w)
        jy = rng.normal(0, jitter * h)
        jw = math.exp(rng.normal(0, jitter))
        jh = math.exp(rng.normal(0, jitter))
        proposal = Box(modal.x + jx, modal.y + jy, w * jw, h * jh)
        feature = np.zeros(feature_dim)
        feature[0] = scale
        if feature_dim > 1:
            feature[1:] = rng.normal(0, 0.1, size=feature_dim - 1)
        samples.append(
            ProposalSample(
                proposal_box=proposal,
                feature=feature,
                modal_delta=encode_delta(modal, proposal),
                modal_gt=modal,
                amodal_gt=amodal,
                matched=True,
            )
        )
    return samples
