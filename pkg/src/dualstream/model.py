"""Model assembly: shared patch backbone, query/grid state, stacked
dual-stream layers and the task heads, stepped frame by frame."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from .configio import Config
from .diffcore import FeatureMap, Tensor, patch_embed
from .dualformer import (
    DualLayerParams,
    DynStaticParams,
    FfnParams,
    StaticDynParams,
    VariantFlags,
    forward_stack,
)
from .dynstream import (
    MotionParams,
    ObjectQuery,
    ObjImageAttnParams,
    ObjSelfAttnParams,
    QueryMemory,
    propagate,
    select_topk,
    spawn_queries,
    SpawnParams,
)
from .geom3d import CameraModel, Pose, ego_delta
from .heads import DecodeParams, Detection, decode_boxes
from .params import (
    ParamStore,
    glorot,
    make_attention_params,
    make_deformable_params,
    make_layernorm_params,
    make_mlp_params,
    make_patch_embed_params,
)
from .statstream import BevGrid, BevSpec, SegHeadParams, segmentation_head, warp_bev
from .synthworld.dataset import FrameSample

_MODEL_SEED_SALT = 0xD0A1


@dataclass
class StreamState:
    """Belief carried between frames: query memory, BEV grid, last ego pose."""

    memory: QueryMemory
    grid: Optional[BevGrid]
    prev_pose: Optional[Pose]

    def detached(self) -> "StreamState":
        """Cut the gradient history of the carried belief."""
        mem = QueryMemory(
            queries=[replace(q, latent=q.latent.detach(), anchor=q.anchor.detach())
                     for q in self.memory.queries],
            capacity=self.memory.capacity,
        )
        grid = None
        if self.grid is not None:
            grid = BevGrid(spec=self.grid.spec, cells=self.grid.cells.detach(),
                           validity=self.grid.validity)
        return StreamState(memory=mem, grid=grid, prev_pose=self.prev_pose)


@dataclass
class StepResult:
    detections: list[Detection]
    seg_logits: Tensor
    state: StreamState
    memory_source_indices: np.ndarray  # detection index backing each memory slot
    queries: list[ObjectQuery]         # queries as fed to the stack (for probes)


def _make_pe(store: ParamStore, prefix: str, rng, d_coords: int, n_freqs: int, latent: int):
    d_in = d_coords * 2 * n_freqs
    return (store.tensor(f"{prefix}.w", glorot(rng, d_in, latent)),
            store.tensor(f"{prefix}.b", np.zeros(latent)))


def build_layer_params(store: ParamStore, prefix: str, rng, cfg: Config) -> DualLayerParams:
    L, P, F = cfg.latent_dim, cfg.n_points, cfg.n_freqs

    pe_w, pe_b = _make_pe(store, f"{prefix}.obj_self.pe", rng, 3, F, L)
    g, b = make_layernorm_params(store, f"{prefix}.obj_self.ln", L)
    obj_self = ObjSelfAttnParams(
        heads=cfg.heads, attn=make_attention_params(store, f"{prefix}.obj_self.attn", rng, L),
        pe_w=pe_w, pe_b=pe_b, ln_g=g, ln_b=b, n_freqs=F,
    )

    pe_w, pe_b = _make_pe(store, f"{prefix}.obj_img.pe", rng, 2, F, L)
    g, b = make_layernorm_params(store, f"{prefix}.obj_img.ln", L)
    obj_image = ObjImageAttnParams(
        deform=make_deformable_params(store, f"{prefix}.obj_img.deform", rng, L, L, P),
        pe_w=pe_w, pe_b=pe_b,
        cam_w=store.tensor(f"{prefix}.obj_img.cam_w", np.zeros((L, 6))),
        cam_b=store.tensor(f"{prefix}.obj_img.cam_b", np.zeros(6)),
        ln_g=g, ln_b=b, n_freqs=F,
    )

    from .statstream import BevImageAttnParams, TemporalAttnParams

    g, b = make_layernorm_params(store, f"{prefix}.bev_temporal.ln", L)
    bev_temporal = TemporalAttnParams(
        deform=make_deformable_params(store, f"{prefix}.bev_temporal.deform", rng, L, L, P),
        ln_g=g, ln_b=b,
    )

    pe_w, pe_b = _make_pe(store, f"{prefix}.bev_img.pe", rng, 2, F, L)
    g, b = make_layernorm_params(store, f"{prefix}.bev_img.ln", L)
    bev_image = BevImageAttnParams(
        deform=make_deformable_params(store, f"{prefix}.bev_img.deform", rng, L, L, P),
        pe_w=pe_w, pe_b=pe_b, ln_g=g, ln_b=b, n_freqs=F,
    )

    g, b = make_layernorm_params(store, f"{prefix}.dyn_static.ln", L)
    dyn_static = DynStaticParams(
        deform=make_deformable_params(store, f"{prefix}.dyn_static.deform", rng, L, L, P),
        ln_g=g, ln_b=b,
    )

    static_dyn = None
    if cfg.interaction == "bidirectional":
        pe_w, pe_b = _make_pe(store, f"{prefix}.static_dyn.pe", rng, 3, F, L)
        g, b = make_layernorm_params(store, f"{prefix}.static_dyn.ln", L)
        static_dyn = StaticDynParams(
            heads=cfg.heads, attn=make_attention_params(store, f"{prefix}.static_dyn.attn", rng, L),
            pe_w=pe_w, pe_b=pe_b, ln_g=g, ln_b=b, n_freqs=F,
        )

    g, b = make_layernorm_params(store, f"{prefix}.obj_ffn.ln", L)
    obj_ffn = FfnParams(mlp=make_mlp_params(store, f"{prefix}.obj_ffn.mlp", rng, L, 2 * L, L), ln_g=g, ln_b=b)
    g, b = make_layernorm_params(store, f"{prefix}.bev_ffn.ln", L)
    bev_ffn = FfnParams(mlp=make_mlp_params(store, f"{prefix}.bev_ffn.mlp", rng, L, 2 * L, L), ln_g=g, ln_b=b)

    return DualLayerParams(
        obj_self=obj_self, obj_image=obj_image, bev_temporal=bev_temporal,
        bev_image=bev_image, dyn_static=dyn_static, obj_ffn=obj_ffn, bev_ffn=bev_ffn,
        static_dyn=static_dyn,
    )


def build_decode_params(store: ParamStore, prefix: str, rng, cfg: Config) -> DecodeParams:
    L, H, C = cfg.latent_dim, cfg.decode_hidden, 2
    yaw_bias = np.zeros(2)
    yaw_bias[1] = 1.0  # cos branch starts at 1 so a zero head decodes yaw 0
    return DecodeParams(
        w_hidden=store.tensor(f"{prefix}.w_hidden", glorot(rng, L, H)),
        b_hidden=store.tensor(f"{prefix}.b_hidden", np.zeros(H)),
        w_center=store.tensor(f"{prefix}.w_center", glorot(rng, H, 3) * 0.1),
        b_center=store.tensor(f"{prefix}.b_center", np.zeros(3)),
        w_size=store.tensor(f"{prefix}.w_size", glorot(rng, H, 3) * 0.1),
        b_size=store.tensor(f"{prefix}.b_size", np.zeros(3)),
        w_yaw=store.tensor(f"{prefix}.w_yaw", glorot(rng, H, 2) * 0.1),
        b_yaw=store.tensor(f"{prefix}.b_yaw", yaw_bias),
        w_vel=store.tensor(f"{prefix}.w_vel", glorot(rng, H, 2) * 0.1),
        b_vel=store.tensor(f"{prefix}.b_vel", np.zeros(2)),
        w_cls=store.tensor(f"{prefix}.w_cls", glorot(rng, H, C)),
        b_cls=store.tensor(f"{prefix}.b_cls", np.full(C, -2.0)),  # start near background
        size_prior=np.array([1.5, 2.5, 1.5]),
        offset_scale=np.array([4.0, 4.0, 1.0]),
    )


class DualStreamModel:
    """Two belief streams over a shared image backbone, stepped per frame."""

    def __init__(self, cfg: Config):
        cfg.validate()
        self.cfg = cfg
        self.flags = VariantFlags(interaction=cfg.interaction, temporal_bev=cfg.temporal_bev)
        self.bev_spec = BevSpec(
            dims=(cfg.bev_cells, cfg.bev_cells),
            extent=(-cfg.bev_extent, cfg.bev_extent, -cfg.bev_extent, cfg.bev_extent),
        )
        self.ranges = cfg.detection_ranges()
        self.pillar_heights = tuple(cfg.pillar_height_list())

        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _MODEL_SEED_SALT]))
        store = ParamStore()
        L = cfg.latent_dim
        self.backbone = make_patch_embed_params(store, "backbone", rng, cfg.patch, L)
        self.spawn = SpawnParams(
            embeddings=store.tensor("spawn.embeddings", rng.normal(0.0, 1.0 / math.sqrt(L), (cfg.n_queries, L))),
            anchor_logits=store.tensor("spawn.anchors", rng.uniform(-2.0, 2.0, (cfg.n_queries, 3))),
        )
        self.motion = MotionParams(mlp=make_mlp_params(store, "motion", rng, L + 7, L, L))
        h, w = self.bev_spec.dims
        self.bev_init = store.tensor("bev.init", rng.normal(0.0, 0.02, (L, h, w)))
        self.fresh_cell = store.tensor("bev.fresh", rng.normal(0.0, 0.02, (L,)))
        self.layers = [build_layer_params(store, f"layer{i}", rng, cfg) for i in range(cfg.n_layers)]
        self.decode = build_decode_params(store, "decode", rng, cfg)
        self.seg = SegHeadParams(mlp=make_mlp_params(store, "seg", rng, L, L, 3))
        self.store = store

    def initial_state(self) -> StreamState:
        return StreamState(memory=QueryMemory.empty(self.cfg.topk), grid=None, prev_pose=None)

    def encode_images(self, images: Mapping[str, Optional[np.ndarray]]) -> dict[str, FeatureMap]:
        feats = {}
        dtype = self.cfg.np_dtype()
        for name, img in images.items():
            if img is None:
                continue
            feats[name] = patch_embed(Tensor(img.astype(dtype)), self.cfg.patch, self.backbone, camera=name)
        return feats

    def forward_frame(
        self,
        frame: FrameSample,
        cameras: Mapping[str, CameraModel],
        state: StreamState,
        dt: float,
    ) -> StepResult:
        cfg = self.cfg
        features = self.encode_images(frame.images)

        delta = Pose.identity(2)
        if state.prev_pose is not None:
            delta = ego_delta(state.prev_pose, frame.ego_pose)

        propagated: list[ObjectQuery] = []
        if cfg.propagate_queries and state.memory.queries:
            propagated = propagate(state.memory, delta, dt, self.motion,
                                   compensate_object_motion=cfg.compensate_object_motion)
        n_new = max(cfg.n_queries - len(propagated), 0)
        queries = propagated + spawn_queries(n_new, self.spawn, self.ranges)

        h, w = self.bev_spec.dims
        grid = BevGrid(spec=self.bev_spec, cells=self.bev_init, validity=np.ones((h, w), dtype=bool))
        warped = None
        if state.grid is not None:
            warped = warp_bev(state.grid, delta, self.fresh_cell)

        latents, grid_out = forward_stack(
            queries, grid, warped, features, cameras, self.flags, self.layers, self.ranges
        )
        detections = decode_boxes(queries, latents, self.decode)
        seg_logits = segmentation_head(grid_out, self.seg)

        from .diffcore.tensor import getitem

        updated = []
        scores = []
        for det, q in zip(detections, queries):
            updated.append(
                ObjectQuery(
                    latent=getitem(latents, det.query_index),
                    anchor=Tensor(det.box.center.astype(latents.dtype)),
                    velocity_estimate=det.box.velocity.copy(),
                    score=det.score,
                    identity=q.identity,
                    age=q.age,
                )
            )
            scores.append(det.score)
        memory = select_topk(updated, scores, cfg.topk)
        order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))[: cfg.topk]

        new_state = StreamState(memory=memory, grid=grid_out, prev_pose=frame.ego_pose)
        return StepResult(
            detections=detections,
            seg_logits=seg_logits,
            state=new_state,
            memory_source_indices=order,
            queries=queries,
        )
