"""Dynamic stream: object queries with motion-compensated temporal
propagation, top-k memory and object-to-image cross-attention.

Anchors used for projection geometry and positional encodings are detached
values; gradients reach the learned spawn anchors through the box-decode
residual path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .diffcore import (
    AttentionParams,
    DeformableParams,
    FeatureMap,
    MlpParams,
    Tensor,
    layernorm,
    linear,
    mlp,
    multi_head_attention,
    sigmoid,
    sincos_encoding,
)
from .diffcore.ops import _deformable_core, softmax
from .diffcore.tensor import add, concat, getitem, mul, reshape, stack
from .geom3d import CAMERA_SLOTS, CameraModel, Pose, project_points, rot2


@dataclass
class ObjectQuery:
    """One latent per hypothesized agent, carrying its geometric belief."""

    latent: Tensor                 # (L,)
    anchor: Tensor                 # (3,) m, current ego frame
    velocity_estimate: np.ndarray  # (2,) m/s, current ego frame
    score: float = 0.0
    identity: Optional[int] = None
    age: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.anchor.data)):
            raise ValueError("query anchor must be finite")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("query score must lie in [0, 1]")

    @property
    def anchor_xyz(self) -> np.ndarray:
        return np.asarray(self.anchor.data, dtype=np.float64)


@dataclass
class QueryMemory:
    """Top-k propagated queries from the previous step, score-descending."""

    queries: list[ObjectQuery]
    capacity: int

    def __post_init__(self):
        if len(self.queries) > self.capacity:
            raise ValueError(f"memory holds {len(self.queries)} > capacity {self.capacity}")
        scores = [q.score for q in self.queries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("memory queries must be sorted by score, descending")

    @staticmethod
    def empty(capacity: int) -> "QueryMemory":
        return QueryMemory(queries=[], capacity=capacity)


@dataclass
class SpawnParams:
    embeddings: Tensor     # (N_max, L) learned latents
    anchor_logits: Tensor  # (N_max, 3), sigmoid-mapped into the detection range


def spawn_queries(n_new: int, params: SpawnParams, ranges: np.ndarray) -> list[ObjectQuery]:
    """First ``n_new`` learned queries; anchors sigmoid-mapped into ``ranges``.

    ``ranges`` is (2, 3): row 0 the per-axis minima, row 1 the maxima.
    Deterministic: repeated calls return the same learned values.
    """
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    if n_new > params.embeddings.data.shape[0]:
        raise ValueError("n_new exceeds the learned spawn pool")
    lo, hi = np.asarray(ranges[0], dtype=np.float64), np.asarray(ranges[1], dtype=np.float64)
    out = []
    for i in range(n_new):
        anchor = add(mul(sigmoid(getitem(params.anchor_logits, i)), (hi - lo)), lo)
        out.append(
            ObjectQuery(
                latent=getitem(params.embeddings, i),
                anchor=anchor,
                velocity_estimate=np.zeros(2),
                score=0.0,
                identity=None,
                age=0,
            )
        )
    return out


@dataclass
class MotionParams:
    """Residual MLP conditioning the latent on the ego motion and dt."""

    mlp: MlpParams


def _flatten_se2(delta: Pose) -> np.ndarray:
    c, s = np.cos(delta.rotation), np.sin(delta.rotation)
    tx, ty = delta.translation
    return np.array([c, -s, tx, s, c, ty], dtype=np.float64)


def propagate(
    memory: QueryMemory,
    delta: Pose,
    dt: float,
    params: MotionParams,
    compensate_object_motion: bool = True,
) -> list[ObjectQuery]:
    """Carry memory queries one step forward.

    Geometric part: a constant-velocity step in the old frame (object
    motion), then re-expression of anchor and velocity in the new ego frame
    (ego motion). Learned part: a residual MLP on the latent conditioned on
    the flattened SE(2) ego delta and dt.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if not memory.queries:
        return []
    n = len(memory.queries)
    anchors = np.stack([q.anchor_xyz for q in memory.queries])
    vels = np.stack([q.velocity_estimate for q in memory.queries]).astype(np.float64)
    if compensate_object_motion:
        anchors = anchors.copy()
        anchors[:, :2] += vels * dt
    new_anchors = delta.apply_points(anchors)
    new_vels = vels @ rot2(delta.rotation).T

    latents = stack([q.latent for q in memory.queries])
    cond = np.tile(np.concatenate([_flatten_se2(delta), [dt]]), (n, 1))
    feats = concat([latents, Tensor(cond.astype(latents.dtype))], axis=1)
    new_latents = add(latents, mlp(feats, params.mlp))

    out = []
    for i, q in enumerate(memory.queries):
        out.append(
            ObjectQuery(
                latent=getitem(new_latents, i),
                anchor=Tensor(new_anchors[i].astype(latents.dtype)),
                velocity_estimate=new_vels[i],
                score=q.score,
                identity=q.identity,
                age=q.age + 1,
            )
        )
    return out


def select_topk(queries: Sequence[ObjectQuery], scores: Sequence[float], k: int) -> QueryMemory:
    """k highest-score queries, score-descending; ties keep the lower index."""
    if k < 0:
        raise ValueError("k must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    picked = [replace(queries[i], score=float(scores[i])) for i in order]
    return QueryMemory(queries=picked, capacity=k)


def normalize_anchors(anchors: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    lo, hi = np.asarray(ranges[0]), np.asarray(ranges[1])
    return (anchors - lo) / (hi - lo)


@dataclass
class ObjSelfAttnParams:
    heads: int
    attn: AttentionParams
    pe_w: Tensor
    pe_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    n_freqs: int = 8


def _obj_self_attention(latents: Tensor, anchors: np.ndarray, params: ObjSelfAttnParams, ranges: np.ndarray) -> Tensor:
    enc = sincos_encoding(normalize_anchors(anchors, ranges), params.n_freqs)
    pe = linear(Tensor(enc.astype(latents.dtype)), params.pe_w, params.pe_b)
    qk = add(latents, pe)
    attn_out = multi_head_attention(qk, qk, latents, params.heads, params.attn)
    return layernorm(add(latents, attn_out), params.ln_g, params.ln_b)


def obj_self_attention(queries: Sequence[ObjectQuery], params: ObjSelfAttnParams, ranges: np.ndarray) -> Tensor:
    """Self-attention over the query set with anchor encodings on q/k.

    Returns the updated (n, L) latent matrix.
    """
    latents = stack([q.latent for q in queries])
    anchors = np.stack([q.anchor_xyz for q in queries])
    return _obj_self_attention(latents, anchors, params, ranges)


@dataclass
class ObjImageAttnParams:
    deform: DeformableParams
    pe_w: Tensor
    pe_b: Tensor
    cam_w: Tensor   # (L, 6) per-slot aggregation logits
    cam_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    n_freqs: int = 8


def _obj_image_cross_attention(
    latents: Tensor,
    anchors: np.ndarray,
    features: Mapping[str, FeatureMap],
    cameras: Mapping[str, CameraModel],
    params: ObjImageAttnParams,
) -> Tensor:
    n = latents.data.shape[0]
    per_cam: list[tuple[int, Tensor, np.ndarray]] = []
    for slot, name in enumerate(CAMERA_SLOTS):
        if name not in features:
            continue
        fm = features[name]
        cam = cameras[name]
        uv, _, valid = project_points(cam, anchors)
        fcoords = np.stack([uv[:, 1] / fm.stride - 0.5, uv[:, 0] / fm.stride - 0.5], axis=1)
        out, anyv = _deformable_core(latents, fcoords, fm.data, params.deform, query_valid=valid)
        enc = sincos_encoding(np.stack([uv[:, 0] / cam.width, uv[:, 1] / cam.height], axis=1), params.n_freqs)
        pe = linear(Tensor(enc.astype(out.dtype)), params.pe_w, params.pe_b)
        out = add(out, mul(pe, anyv.astype(out.dtype)[:, None]))
        per_cam.append((slot, out, anyv))

    if not per_cam:
        combined = mul(latents, 0.0)
    else:
        logits = linear(latents, params.cam_w, params.cam_b)  # (n, 6)
        cols = stack([getitem(logits, (slice(None), slot)) for slot, _, _ in per_cam], axis=1)
        mask = np.stack([anyv for _, _, anyv in per_cam], axis=1)
        cols = add(cols, np.where(mask, 0.0, -1e30))
        weights = softmax(cols, axis=-1)
        combined = None
        for c, (_, out, _) in enumerate(per_cam):
            w = reshape(getitem(weights, (slice(None), c)), (n, 1))
            term = mul(out, w)
            combined = term if combined is None else add(combined, term)
    return layernorm(add(latents, combined), params.ln_g, params.ln_b)


def obj_image_cross_attention(
    queries: Sequence[ObjectQuery],
    features: Mapping[str, FeatureMap],
    cameras: Mapping[str, CameraModel],
    params: ObjImageAttnParams,
) -> Tensor:
    """Project each anchor into the available cameras, deformably sample the
    per-camera features at the projections, and aggregate across cameras by
    visibility-masked attention weights. Cameras absent from ``features``
    are unavailable and contribute nothing. Returns the (n, L) latents.
    """
    latents = stack([q.latent for q in queries])
    anchors = np.stack([q.anchor_xyz for q in queries])
    return _obj_image_cross_attention(latents, anchors, features, cameras, params)
