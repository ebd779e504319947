"""Stacked dual-stream transformer layer: five attention blocks per layer
plus per-stream feed-forwards, with the interaction and temporal-BEV
ablation switches.

Block order per layer: object self-attention, object-to-image
cross-attention, BEV temporal grid-attention (self-only when temporal_bev is
off or no history exists), BEV-to-image cross-attention, dynamic-static
cross-attention (plus the static-dynamic block under the bidirectional
variant), then the per-stream feed-forward MLPs. The dynamic-static block
runs last so objects see the already image-updated grid of the same layer.
"""

from __future__ import annotations

from dataclasses import dataclass
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
    sincos_encoding,
)
from .diffcore.ops import _deformable_core
from .diffcore.tensor import add, mul, stack
from .dynstream import (
    ObjImageAttnParams,
    ObjSelfAttnParams,
    ObjectQuery,
    _obj_image_cross_attention,
    _obj_self_attention,
    normalize_anchors,
)
from .geom3d import CameraModel
from .statstream import (
    BevGrid,
    BevImageAttnParams,
    TemporalAttnParams,
    bev_image_cross_attention,
    metric_to_cell,
    temporal_grid_attention,
)

INTERACTION_MODES = ("full", "none", "bidirectional")


@dataclass(frozen=True)
class VariantFlags:
    """Ablation switches: stream interaction mode and temporal BEV on/off."""

    interaction: str = "full"
    temporal_bev: bool = True

    def __post_init__(self):
        if self.interaction not in INTERACTION_MODES:
            raise ValueError(f"interaction must be one of {INTERACTION_MODES}, got {self.interaction!r}")


@dataclass
class DynStaticParams:
    deform: DeformableParams
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class StaticDynParams:
    heads: int
    attn: AttentionParams
    pe_w: Tensor
    pe_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    n_freqs: int = 8


@dataclass
class FfnParams:
    mlp: MlpParams
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class DualLayerParams:
    obj_self: ObjSelfAttnParams
    obj_image: ObjImageAttnParams
    bev_temporal: TemporalAttnParams
    bev_image: BevImageAttnParams
    dyn_static: DynStaticParams
    obj_ffn: FfnParams
    bev_ffn: FfnParams
    static_dyn: Optional[StaticDynParams] = None


def _dynamic_static_core(latents: Tensor, anchors: np.ndarray, grid: BevGrid, params: DynStaticParams) -> Tensor:
    h, w = grid.spec.dims
    refs = metric_to_cell(grid.spec, anchors[:, :2])
    in_hull = (
        (refs[:, 0] >= 0) & (refs[:, 0] <= h - 1)
        & (refs[:, 1] >= 0) & (refs[:, 1] <= w - 1)
    )
    out, _ = _deformable_core(latents, refs, grid.cells, params.deform, query_valid=in_hull)
    return layernorm(add(latents, out), params.ln_g, params.ln_b)


def dynamic_static_cross_attention(
    queries: Sequence[ObjectQuery], grid: BevGrid, params: DynStaticParams
) -> Tensor:
    """Object queries deformably attend to the BEV grid around their anchor;
    queries anchored outside the grid pass through residually. Returns the
    updated (n, L) latent matrix."""
    latents = stack([q.latent for q in queries])
    anchors = np.stack([q.anchor_xyz for q in queries])
    return _dynamic_static_core(latents, anchors, grid, params)


def _static_dynamic_core(
    grid: BevGrid, latents: Optional[Tensor], anchors: Optional[np.ndarray],
    params: StaticDynParams, ranges: np.ndarray,
) -> BevGrid:
    from .statstream import _cells_from_flat

    q = grid.cells_flat()
    if latents is None or latents.data.shape[0] == 0:
        combined = mul(q, 0.0)
    else:
        enc = sincos_encoding(normalize_anchors(anchors, ranges), params.n_freqs)
        pe = linear(Tensor(enc.astype(latents.dtype)), params.pe_w, params.pe_b)
        keys = add(latents, pe)
        combined = multi_head_attention(q, keys, latents, params.heads, params.attn)
    new_flat = layernorm(add(q, combined), params.ln_g, params.ln_b)
    return BevGrid(spec=grid.spec, cells=_cells_from_flat(new_flat, grid.spec), validity=grid.validity)


def static_dynamic_cross_attention(
    grid: BevGrid,
    queries: Sequence[ObjectQuery],
    params: StaticDynParams,
    flags: VariantFlags,
    ranges: np.ndarray,
) -> BevGrid:
    """Bidirectional-variant block: every BEV cell attends over all object
    latents keyed with anchor positional encodings."""
    if flags.interaction != "bidirectional":
        raise ValueError("static-dynamic cross-attention requires the bidirectional variant")
    if queries:
        latents = stack([q.latent for q in queries])
        anchors = np.stack([q.anchor_xyz for q in queries])
    else:
        latents, anchors = None, None
    return _static_dynamic_core(grid, latents, anchors, params, ranges)


def _ffn(latents: Tensor, params: FfnParams) -> Tensor:
    return layernorm(add(latents, mlp(latents, params.mlp)), params.ln_g, params.ln_b)


def forward_layer(
    latents: Tensor,
    anchors: np.ndarray,
    grid: BevGrid,
    warped_prev: Optional[BevGrid],
    features: Mapping[str, FeatureMap],
    cameras: Mapping[str, CameraModel],
    flags: VariantFlags,
    params: DualLayerParams,
    ranges: np.ndarray,
) -> tuple[Tensor, BevGrid]:
    """One dual-stream layer over the stacked (n, L) object latents and the
    BEV grid; returns both updated streams with unchanged shapes."""
    from .statstream import _cells_from_flat  # noqa: F401  (re-export guard)

    latents = _obj_self_attention(latents, anchors, params.obj_self, ranges)
    latents = _obj_image_cross_attention(latents, anchors, features, cameras, params.obj_image)

    prev = warped_prev if flags.temporal_bev else None
    grid = temporal_grid_attention(grid, prev, params.bev_temporal)
    grid = bev_image_cross_attention(grid, features, cameras, params.bev_image)

    if flags.interaction != "none":
        latents = _dynamic_static_core(latents, anchors, grid, params.dyn_static)
        if flags.interaction == "bidirectional":
            grid = _static_dynamic_core(grid, latents, anchors, params.static_dyn, ranges)

    latents = _ffn(latents, params.obj_ffn)
    new_flat = _ffn(grid.cells_flat(), params.bev_ffn)
    grid = BevGrid(spec=grid.spec, cells=_cells_from_flat(new_flat, grid.spec), validity=grid.validity)
    return latents, grid


def forward_stack(
    queries: Sequence[ObjectQuery],
    grid: BevGrid,
    warped_prev: Optional[BevGrid],
    features: Mapping[str, FeatureMap],
    cameras: Mapping[str, CameraModel],
    flags: VariantFlags,
    layer_params: Sequence[DualLayerParams],
    ranges: np.ndarray,
) -> tuple[Tensor, BevGrid]:
    """Sequential layers with independent parameters. The previous grid is
    warped once per timestep by the caller and shared across layers.

    Returns the final (n, L) object latents and the final grid.
    """
    if not layer_params:
        raise ValueError("forward_stack needs at least one layer")
    latents = stack([q.latent for q in queries])
    anchors = np.stack([q.anchor_xyz for q in queries])
    for params in layer_params:
        latents, grid = forward_layer(
            latents, anchors, grid, warped_prev, features, cameras, flags, params, ranges
        )
    return latents, grid
