"""Task heads: box decoding, Hungarian set matching, detection and
segmentation losses, and greedy tracking-by-detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .diffcore import MlpParams, ShapeError, Tensor, gelu, linear, sigmoid, softplus
from .diffcore.tensor import (
    absolute,
    add,
    atan2,
    div,
    exp,
    getitem,
    mean,
    mul,
    power,
    reshape,
    stack,
    sub,
    sum_,
    tanh,
)
from .geom3d import BoundingBox3D, Pose, wrap_angle
from .dynstream import ObjectQuery


@dataclass
class DecodeParams:
    """Shared hidden layer plus per-target linear heads.

    The yaw head emits (sin, cos); its cos bias starts at 1 so a zero head
    decodes to yaw 0.
    """

    w_hidden: Tensor
    b_hidden: Tensor
    w_center: Tensor   # (hidden, 3) tanh-bounded residual
    b_center: Tensor
    w_size: Tensor     # (hidden, 3) log-scale on the size prior
    b_size: Tensor
    w_yaw: Tensor      # (hidden, 2) sin / cos
    b_yaw: Tensor
    w_vel: Tensor      # (hidden, 2)
    b_vel: Tensor
    w_cls: Tensor      # (hidden, n_classes)
    b_cls: Tensor
    size_prior: np.ndarray = field(default_factory=lambda: np.array([1.5, 2.5, 1.5]))
    offset_scale: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 1.0]))


@dataclass
class Detection:
    """Decoded box plus the tensors the loss differentiates through."""

    box: BoundingBox3D
    query_index: int
    class_logits: Tensor       # (n_classes,)
    center_t: Tensor           # (3,)
    log_size_t: Tensor         # (3,)
    sincos_t: Tensor           # (2,)
    velocity_t: Tensor         # (2,)
    prior_identity: Optional[int] = None

    @property
    def score(self) -> float:
        return float(1.0 / (1.0 + math.exp(-float(np.max(self.class_logits.data)))))

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_logits.data))


def decode_boxes(queries: Sequence[ObjectQuery], latents: Tensor, params: DecodeParams) -> list[Detection]:
    """Decode every query latent into a box: center = anchor + bounded
    offset, sizes = exp(logits) * class-free prior, yaw = atan2(sin, cos)."""
    if not queries:
        return []
    n = latents.data.shape[0]
    anchors = stack([q.anchor for q in queries])
    hidden = gelu(linear(latents, params.w_hidden, params.b_hidden))
    center = add(anchors, mul(tanh(linear(hidden, params.w_center, params.b_center)),
                              params.offset_scale))
    log_size = linear(hidden, params.w_size, params.b_size)
    sincos = linear(hidden, params.w_yaw, params.b_yaw)
    vel = linear(hidden, params.w_vel, params.b_vel)
    logits = linear(hidden, params.w_cls, params.b_cls)

    sizes = np.exp(log_size.data) * params.size_prior
    yaws = np.arctan2(sincos.data[:, 0], sincos.data[:, 1])
    out = []
    for i in range(n):
        cl = getitem(logits, i)
        score = float(1.0 / (1.0 + np.exp(-np.max(cl.data))))
        box = BoundingBox3D(
            center=center.data[i].astype(np.float64),
            size=sizes[i].astype(np.float64),
            yaw=float(yaws[i]),
            velocity=vel.data[i].astype(np.float64),
            label=int(np.argmax(cl.data)),
            score=score,
        )
        out.append(
            Detection(
                box=box,
                query_index=i,
                class_logits=cl,
                center_t=getitem(center, i),
                log_size_t=getitem(log_size, i),
                sincos_t=getitem(sincos, i),
                velocity_t=getitem(vel, i),
                prior_identity=queries[i].identity,
            )
        )
    return out


@dataclass
class Assignment:
    """Bipartite matching result: (prediction, ground-truth) index pairs."""

    pairs: list[tuple[int, int]]
    unmatched_preds: list[int]
    unmatched_gts: list[int]


def hungarian_match(cost_matrix: np.ndarray) -> Assignment:
    """Minimum-cost assignment on an (n_pred, n_gt) cost matrix."""
    cost = np.asarray(cost_matrix, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2D")
    if np.isnan(cost).any():
        raise ValueError("NaN in matching costs")
    if cost.size == 0:
        return Assignment([], list(range(cost.shape[0])), list(range(cost.shape[1])))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_preds=[i for i in range(cost.shape[0]) if i not in matched_p],
        unmatched_gts=[j for j in range(cost.shape[1]) if j not in matched_g],
    )


@dataclass
class LossWeights:
    cls: float = 1.0
    center: float = 5.0
    box: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    velocity_norm: float = 10.0


def _normalized_gt(box: BoundingBox3D, ranges: np.ndarray, weights: LossWeights,
                   size_prior: np.ndarray) -> np.ndarray:
    lo, hi = np.asarray(ranges[0]), np.asarray(ranges[1])
    center = (box.center - lo) / (hi - lo)
    log_size = np.log(box.size / size_prior)
    sc = np.array([math.sin(box.yaw), math.cos(box.yaw)])
    vel = box.velocity / weights.velocity_norm
    return np.concatenate([center, log_size, sc, vel])


def _normalized_pred_rows(dets: Sequence[Detection], ranges: np.ndarray, weights: LossWeights,
                          size_prior: np.ndarray) -> Tensor:
    lo, hi = np.asarray(ranges[0]), np.asarray(ranges[1])
    rows = []
    for d in dets:
        center = div(sub(d.center_t, lo), hi - lo)
        from .diffcore.tensor import concat

        rows.append(concat([center, d.log_size_t, d.sincos_t,
                            mul(d.velocity_t, 1.0 / weights.velocity_norm)], axis=0))
    return stack(rows)


def detection_cost_matrix(
    detections: Sequence[Detection],
    gt_boxes: Sequence[BoundingBox3D],
    ranges: np.ndarray,
    weights: LossWeights,
    size_prior: np.ndarray,
) -> np.ndarray:
    """Matching cost with the same terms as the loss: negative class
    probability plus weighted L1 on the normalized box parameters."""
    n, m = len(detections), len(gt_boxes)
    cost = np.zeros((n, m))
    if n == 0 or m == 0:
        return cost
    pred = _normalized_pred_rows(detections, ranges, weights, size_prior).data
    probs = 1.0 / (1.0 + np.exp(-np.stack([d.class_logits.data for d in detections])))
    for j, gt in enumerate(gt_boxes):
        u = _normalized_gt(gt, ranges, weights, size_prior)
        l1 = np.abs(pred - u)
        center_term = l1[:, :3].sum(axis=1)
        box_term = l1[:, 3:].sum(axis=1)
        cls_term = -probs[:, gt.label]
        cost[:, j] = weights.cls * cls_term + weights.center * center_term + weights.box * box_term
    return cost


def detection_loss(
    detections: Sequence[Detection],
    gt_boxes: Sequence[BoundingBox3D],
    assignment: Assignment,
    ranges: np.ndarray,
    weights: LossWeights,
    size_prior: np.ndarray,
    n_classes: int,
) -> Tensor:
    """Focal classification over all queries (unmatched -> background) plus
    L1 on the matched normalized box parameters."""
    if not detections:
        raise ValueError("detection_loss needs at least one detection")
    logits = stack([d.class_logits for d in detections])
    targets = np.zeros((len(detections), n_classes))
    for p, g in assignment.pairs:
        targets[p, gt_boxes[g].label] = 1.0

    p = sigmoid(logits)
    a, gamma = weights.focal_alpha, weights.focal_gamma
    # log p = -softplus(-x), log(1-p) = -softplus(x): stable in both tails
    pos = mul(mul(power(1.0 - p, gamma), softplus(-logits)), a)
    neg = mul(mul(power(p, gamma), softplus(logits)), 1.0 - a)
    focal = add(mul(pos, targets), mul(neg, 1.0 - targets))
    denom = max(len(assignment.pairs), 1)
    loss = mul(sum_(focal), weights.cls / denom)

    if assignment.pairs:
        matched = [detections[pi] for pi, _ in assignment.pairs]
        pred = _normalized_pred_rows(matched, ranges, weights, size_prior)
        gt = np.stack([_normalized_gt(gt_boxes[gi], ranges, weights, size_prior)
                       for _, gi in assignment.pairs])
        l1 = absolute(sub(pred, gt.astype(pred.dtype)))
        center_l1 = sum_(getitem(l1, (slice(None), slice(0, 3))))
        box_l1 = sum_(getitem(l1, (slice(None), slice(3, None))))
        loss = add(loss, mul(center_l1, weights.center / denom))
        loss = add(loss, mul(box_l1, weights.box / denom))
    return loss


def segmentation_loss(logits: Tensor, gt_masks: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Mean over classes of binary cross-entropy plus (1 - Dice)."""
    if logits.data.shape != gt_masks.shape:
        raise ShapeError(f"logit shape {logits.data.shape} != mask shape {gt_masks.shape}")
    y = gt_masks.astype(logits.dtype)
    bce = mean(sub(softplus(logits), mul(logits, y)))
    p = sigmoid(logits)
    inter = sum_(mul(p, y), axis=(1, 2))
    denom = add(sum_(p, axis=(1, 2)), y.sum(axis=(1, 2)) + eps)
    dice = div(add(mul(inter, 2.0), eps), denom)
    return add(bce, 1.0 - mean(dice))


@dataclass
class Track:
    track_id: int
    center: np.ndarray            # world frame
    velocity: np.ndarray          # world frame
    label: int
    score: float
    frames_since_update: int = 0


@dataclass
class TrackedBox:
    box: BoundingBox3D            # ego frame, as detected
    track_id: int
    score: float


def greedy_track(
    detections: Sequence[BoundingBox3D],
    prior_ids: Sequence[Optional[int]],
    tracks: list[Track],
    dt: float,
    next_id: int,
    max_dist: float = 2.0,
    score_thresh: float = 0.3,
    max_age: int = 3,
) -> tuple[list[tuple[int, int]], list[Track], int]:
    """Greedy center-distance association in a common frame.

    Detections and tracks must already live in the same frame. A detection
    carrying a prior identity claims that track first (within ``max_dist``);
    the rest match greedily by descending score to the nearest velocity-
    forward-predicted track. Unmatched detections above ``score_thresh``
    spawn strictly increasing ids; unmatched tracks persist ``max_age``
    frames. Returns (det_index, track_id) pairs, surviving tracks, next_id.
    """
    predicted = {t.track_id: t.center[:2] + t.velocity[:2] * dt for t in tracks}
    by_id = {t.track_id: t for t in tracks}
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    claimed: set[int] = set()
    assigned: list[tuple[int, int]] = []
    matched_dets: set[int] = set()

    # pass 1: carried identities act as matching priors
    for i in order:
        pid = prior_ids[i]
        if pid is None or pid in claimed or pid not in predicted:
            continue
        if np.linalg.norm(detections[i].center[:2] - predicted[pid]) <= max_dist:
            claimed.add(pid)
            matched_dets.add(i)
            assigned.append((i, pid))

    # pass 2: greedy nearest-center for the rest (ties -> lower track id)
    for i in order:
        if i in matched_dets:
            continue
        candidates = sorted(
            (float(np.linalg.norm(detections[i].center[:2] - pc)), tid)
            for tid, pc in predicted.items()
            if tid not in claimed
        )
        if candidates and candidates[0][0] <= max_dist:
            tid = candidates[0][1]
            claimed.add(tid)
            matched_dets.add(i)
            assigned.append((i, tid))

    # pass 3: spawn new tracks
    for i in order:
        if i in matched_dets or detections[i].score < score_thresh:
            continue
        assigned.append((i, next_id))
        next_id += 1

    new_tracks: list[Track] = []
    assigned_ids = {tid for _, tid in assigned}
    for i, tid in assigned:
        det = detections[i]
        new_tracks.append(Track(track_id=tid, center=det.center.copy(),
                                velocity=det.velocity.copy(), label=det.label,
                                score=det.score, frames_since_update=0))
    for t in tracks:
        if t.track_id in assigned_ids:
            continue
        if t.frames_since_update + 1 <= max_age:
            new_tracks.append(Track(track_id=t.track_id,
                                    center=t.center + np.append(t.velocity[:2] * dt, 0.0),
                                    velocity=t.velocity, label=t.label, score=t.score,
                                    frames_since_update=t.frames_since_update + 1))
    assigned.sort()
    return assigned, new_tracks, next_id


class TrackerState:
    """Tracking-by-detection across a scene, associating in the world frame."""

    def __init__(self, max_dist: float = 2.0, score_thresh: float = 0.3, max_age: int = 3):
        self.max_dist = max_dist
        self.score_thresh = score_thresh
        self.max_age = max_age
        self.tracks: list[Track] = []
        self.next_id = 0

    def step(
        self,
        detections: Sequence[BoundingBox3D],
        prior_ids: Sequence[Optional[int]],
        ego_pose: Pose,
        dt: float,
    ) -> list[tuple[int, int]]:
        """Associate ego-frame detections; returns (det_index, track_id)."""
        from .geom3d import transform_box

        world = [transform_box(ego_pose, d) for d in detections]
        assigned, self.tracks, self.next_id = greedy_track(
            world, prior_ids, self.tracks, dt, self.next_id,
            max_dist=self.max_dist, score_thresh=self.score_thresh, max_age=self.max_age,
        )
        return assigned
