import itertools
import math

import numpy as np
import pytest
from util import t64

from dualstream.configio import Config
from dualstream.diffcore import Tensor, finite_diff_check, use_dtype
from dualstream.diffcore.tensor import ShapeError, stack, sum_
from dualstream.dynstream import MotionParams, ObjectQuery, QueryMemory, propagate
from dualstream.geom3d import BoundingBox3D, Pose
from dualstream.heads import (
    Assignment,
    DecodeParams,
    LossWeights,
    Track,
    decode_boxes,
    detection_cost_matrix,
    detection_loss,
    greedy_track,
    hungarian_match,
    segmentation_loss,
)
from dualstream.model import build_decode_params
from dualstream.params import ParamStore

RANGES = np.array([[-16.0, -16.0, -3.0], [16.0, 16.0, 3.0]])
L = 8


def decode_params(seed=0, zero=False):
    store = ParamStore()
    cfg = Config(latent_dim=L, decode_hidden=6)
    p = build_decode_params(store, "decode", np.random.default_rng(seed), cfg)
    if zero:
        for name, t in store.items():
            if name.startswith("decode.") and not name.endswith("b_yaw"):
                t.data = np.zeros_like(t.data)
    return p


def query(rng, anchor=None):
    return ObjectQuery(latent=t64(rng.normal(size=L)),
                       anchor=t64(anchor if anchor is not None else rng.uniform(-5, 5, 3)),
                       velocity_estimate=np.zeros(2), score=0.5)


class TestDecodeBoxes:
    def test_zero_head_decodes_anchor_prior_zero_yaw(self, rng):
        with use_dtype(np.float64):
            p = decode_params(zero=True)
            qs = [query(rng, anchor=[2.0, -1.0, 0.3])]
            latents = stack([q.latent for q in qs])
            dets = decode_boxes(qs, latents, p)
            d = dets[0]
            np.testing.assert_allclose(d.box.center, [2.0, -1.0, 0.3], atol=1e-12)
            np.testing.assert_allclose(d.box.size, p.size_prior, atol=1e-12)
            assert d.box.yaw == pytest.approx(math.atan2(0.0, 1.0), abs=1e-12)

    def test_yaw_head_sin_one_gives_half_pi(self, rng):
        with use_dtype(np.float64):
            p = decode_params(zero=True)
            p.b_yaw.data = np.array([1.0, 0.0])
            qs = [query(rng)]
            dets = decode_boxes(qs, stack([q.latent for q in qs]), p)
            assert dets[0].box.yaw == pytest.approx(math.pi / 2, abs=1e-12)

    def test_decoded_velocity_feeds_propagate_roundtrip(self, rng):
        with use_dtype(np.float64):
            p = decode_params()
            qs = [query(rng, anchor=[1.0, 2.0, 0.0])]
            dets = decode_boxes(qs, stack([q.latent for q in qs]), p)
            vel = dets[0].box.velocity
            carried = ObjectQuery(latent=qs[0].latent, anchor=t64(dets[0].box.center),
                                  velocity_estimate=vel.copy(), score=dets[0].score)
            mem = QueryMemory(queries=[carried], capacity=1)
            from util import make_mlp_params

            zero_mlp = MotionParams(mlp=make_mlp_params(np.random.default_rng(0), L + 7, 4, L, zero=True))
            out = propagate(mem, Pose.identity(2), 0.5, zero_mlp)
            want = dets[0].box.center.copy()
            want[:2] += vel * 0.5
            np.testing.assert_allclose(out[0].anchor_xyz, want, atol=1e-12)

    def test_score_is_sigmoid_of_max_logit(self, rng):
        with use_dtype(np.float64):
            p = decode_params()
            qs = [query(rng) for _ in range(3)]
            dets = decode_boxes(qs, stack([q.latent for q in qs]), p)
            for d in dets:
                want = 1.0 / (1.0 + math.exp(-float(np.max(d.class_logits.data))))
                assert d.score == pytest.approx(want, abs=1e-12)
                assert 0.0 <= d.score <= 1.0


def brute_force_min_cost(cost):
    n, m = cost.shape
    k = min(n, m)
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), k):
            best = min(best, sum(cost[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), k):
            best = min(best, sum(cost[r, j] for j, r in enumerate(rows)))
    return best


class TestHungarian:
    def test_single_pair(self):
        a = hungarian_match(np.array([[3.0]]))
        assert a.pairs == [(0, 0)]
        assert a.unmatched_preds == [] and a.unmatched_gts == []

    def test_two_by_two_diagonal(self):
        a = hungarian_match(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert a.pairs == [(0, 0), (1, 1)]

    def test_matches_brute_force_5x7(self, rng):
        for _ in range(30):
            cost = rng.normal(size=(5, 7))
            a = hungarian_match(cost)
            total = sum(cost[i, j] for i, j in a.pairs)
            assert total == pytest.approx(brute_force_min_cost(cost), abs=1e-9)
            assert len(a.pairs) == 5

    def test_total_beats_random_permutations(self, rng):
        cost = rng.normal(size=(6, 6))
        a = hungarian_match(cost)
        total = sum(cost[i, j] for i, j in a.pairs)
        for _ in range(1000):
            perm = rng.permutation(6)
            assert total <= sum(cost[i, perm[i]] for i in range(6)) + 1e-12

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            hungarian_match(np.array([[np.nan]]))

    def test_empty_sides(self):
        a = hungarian_match(np.zeros((0, 3)))
        assert a.pairs == [] and a.unmatched_gts == [0, 1, 2]


def gt_box(center, yaw=0.0, vel=(0.0, 0.0), label=0, size=(1.5, 2.5, 1.5)):
    return BoundingBox3D(center=np.array(center, dtype=float), size=np.array(size, dtype=float),
                         yaw=yaw, velocity=np.array(vel, dtype=float), label=label, score=1.0)


def perfect_detections(gts, p, confident=10.0):
    """Build Detection objects that exactly reproduce the GT boxes."""
    from dualstream.heads import Detection

    dets = []
    for i, g in enumerate(gts):
        logits = np.full(2, -confident)
        logits[g.label] = confident
        dets.append(Detection(
            box=BoundingBox3D(center=g.center.copy(), size=g.size.copy(), yaw=g.yaw,
                              velocity=g.velocity.copy(), label=g.label, score=1.0),
            query_index=i,
            class_logits=t64(logits),
            center_t=t64(g.center),
            log_size_t=t64(np.log(g.size / p.size_prior)),
            sincos_t=t64([math.sin(g.yaw), math.cos(g.yaw)]),
            velocity_t=t64(g.velocity),
        ))
    return dets


class TestDetectionLoss:
    def test_perfect_predictions_near_zero(self, rng):
        with use_dtype(np.float64):
            p = decode_params()
            gts = [gt_box([1.0, 2.0, 0.0]), gt_box([-3.0, 0.5, 0.2], label=1)]
            dets = perfect_detections(gts, p, confident=20.0)
            w = LossWeights()
            cost = detection_cost_matrix(dets, gts, RANGES, w, p.size_prior)
            a = hungarian_match(cost)
            loss = detection_loss(dets, gts, a, RANGES, w, p.size_prior, n_classes=2)
            assert float(loss.data) <= 1e-3

    def test_empty_gt_pure_background_focal(self, rng):
        with use_dtype(np.float64):
            p = decode_params()
            qs = [query(rng) for _ in range(4)]
            dets = decode_boxes(qs, stack([q.latent for q in qs]), p)
            a = Assignment(pairs=[], unmatched_preds=list(range(4)), unmatched_gts=[])
            w = LossWeights()
            loss = detection_loss(dets, [], a, RANGES, w, p.size_prior, n_classes=2)
            # hand-computed background focal
            logits = np.stack([d.class_logits.data for d in dets])
            pr = 1.0 / (1.0 + np.exp(-logits))
            want = ((1 - w.focal_alpha) * pr ** w.focal_gamma * np.log1p(np.exp(logits))).sum()
            assert float(loss.data) == pytest.approx(want, rel=1e-9)

    def test_gradients_pass_finite_diff(self, rng):
        with use_dtype(np.float64):
            p = decode_params()
            gts = [gt_box([1.0, 2.0, 0.0]), gt_box([-3.0, 0.5, 0.2], label=1)]
            qs = [query(rng) for _ in range(3)]
            latents = Tensor(np.stack([q.latent.data for q in qs]), requires_grad=True)
            w = LossWeights()

            def fn(lat):
                dets = decode_boxes(qs, lat, p)
                cost = detection_cost_matrix(dets, gts, RANGES, w, p.size_prior)
                a = hungarian_match(cost)
                return detection_loss(dets, gts, a, RANGES, w, p.size_prior, n_classes=2)

            assert finite_diff_check(fn, [latents], eps=1e-6) <= 1e-4

    def test_permutation_invariance(self, rng):
        with use_dtype(np.float64):
            p = decode_params()
            gts = [gt_box([1.0, 2.0, 0.0]), gt_box([-3.0, 0.5, 0.2], label=1),
                   gt_box([4.0, -2.0, 0.1])]
            qs = [query(rng) for _ in range(5)]
            dets = decode_boxes(qs, stack([q.latent for q in qs]), p)
            w = LossWeights()

            def full_loss(dets_, gts_):
                cost = detection_cost_matrix(dets_, gts_, RANGES, w, p.size_prior)
                return float(detection_loss(dets_, gts_, hungarian_match(cost), RANGES, w,
                                            p.size_prior, n_classes=2).data)

            base = full_loss(dets, gts)
            assert full_loss(dets, [gts[2], gts[0], gts[1]]) == pytest.approx(base, rel=1e-12)
            assert full_loss([dets[3], dets[1], dets[4], dets[0], dets[2]], gts) == pytest.approx(base, rel=1e-12)


class TestSegmentationLoss:
    def test_saturated_logits_near_zero(self):
        gt = (np.arange(48).reshape(3, 4, 4) % 3 == 0).astype(np.float64)
        logits = t64(np.where(gt > 0, 20.0, -20.0))
        loss = segmentation_loss(logits, gt)
        assert float(loss.data) <= 1e-6

    def test_uniform_zero_logits_bce_ln2(self):
        gt = np.zeros((2, 4, 4))
        gt[:, :2, :] = 1.0  # half filled
        logits = t64(np.zeros((2, 4, 4)))
        loss = segmentation_loss(logits, gt)
        # BCE term is exactly ln 2 per cell; dice of p=0.5 vs half mask
        p = 0.5
        inter = p * gt.sum() / 2
        dice = (2 * inter + 1e-6) / (p * 16 + gt.sum() / 2 + 1e-6)
        want = math.log(2.0) + 1.0 - dice
        assert float(loss.data) == pytest.approx(want, rel=1e-9)

    def test_gradcheck(self, rng):
        with use_dtype(np.float64):
            gt = (rng.uniform(size=(2, 3, 3)) > 0.5).astype(np.float64)
            logits = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
            assert finite_diff_check(lambda x: segmentation_loss(x, gt), [logits], eps=1e-6) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            segmentation_loss(t64(np.zeros((2, 3, 3))), np.zeros((2, 4, 4)))


def det(center, score, vel=(0.0, 0.0), label=0):
    return BoundingBox3D(center=np.array(center, dtype=float), size=np.array([1.5, 2.5, 1.5]),
                         yaw=0.0, velocity=np.array(vel, dtype=float), label=label, score=score)


class TestGreedyTrack:
    def test_id_carried_within_range(self):
        tracks = [Track(track_id=7, center=np.array([1.0, 0.0, 0.0]),
                        velocity=np.array([2.0, 0.0]), label=0, score=0.9)]
        assigned, new_tracks, next_id = greedy_track(
            [det([2.0, 0.1, 0.0], 0.8)], [None], tracks, dt=0.5, next_id=10)
        assert assigned == [(0, 7)]
        assert next_id == 10

    def test_far_detection_spawns_new_id(self):
        tracks = [Track(track_id=7, center=np.array([0.0, 0.0, 0.0]),
                        velocity=np.zeros(2), label=0, score=0.9)]
        assigned, new_tracks, next_id = greedy_track(
            [det([10.0, 10.0, 0.0], 0.8)], [None], tracks, dt=0.5, next_id=10)
        assert assigned == [(0, 10)]
        assert next_id == 11

    def test_below_threshold_not_spawned(self):
        assigned, new_tracks, next_id = greedy_track(
            [det([0.0, 0.0, 0.0], 0.1)], [None], [], dt=0.5, next_id=0)
        assert assigned == []
        assert new_tracks == []

    def test_crossing_tracks_match_exhaustive_oracle(self):
        # two tracks cross; greedy picks the globally nearest pairs in score
        # order, verified against the exhaustive 2x2 minimum
        tracks = [
            Track(track_id=0, center=np.array([0.0, 1.0, 0.0]), velocity=np.array([2.0, 0.0]),
                  label=0, score=0.9),
            Track(track_id=1, center=np.array([0.0, -1.0, 0.0]), velocity=np.array([2.0, 0.0]),
                  label=0, score=0.9),
        ]
        d0 = det([1.0, 0.8, 0.0], 0.9)
        d1 = det([1.0, -0.8, 0.0], 0.8)
        assigned, _, _ = greedy_track([d0, d1], [None, None], tracks, dt=0.5, next_id=5)
        pred = {0: np.array([1.0, 1.0]), 1: np.array([1.0, -1.0])}
        dets = {0: d0.center[:2], 1: d1.center[:2]}
        best_perm, best_cost = None, math.inf
        for perm in itertools.permutations([0, 1]):
            cost = sum(np.linalg.norm(dets[i] - pred[perm[i]]) for i in range(2))
            if cost < best_cost:
                best_cost, best_perm = cost, perm
        want = sorted((i, best_perm[i]) for i in range(2))
        assert assigned == want

    def test_prior_identity_claims_track_first(self):
        tracks = [
            Track(track_id=0, center=np.array([0.0, 0.0, 0.0]), velocity=np.zeros(2),
                  label=0, score=0.9),
            Track(track_id=1, center=np.array([0.5, 0.0, 0.0]), velocity=np.zeros(2),
                  label=0, score=0.9),
        ]
        # the detection is nearest to track 1 but carries identity 0
        assigned, _, _ = greedy_track([det([0.4, 0.0, 0.0], 0.9)], [0], tracks, dt=0.0, next_id=5)
        assert assigned == [(0, 0)]

    def test_no_duplicate_ids_and_increasing_spawns(self, rng):
        tracks = []
        next_id = 0
        spawned = []
        for frame in range(5):
            dets = [det([rng.uniform(-5, 5), rng.uniform(-5, 5), 0.0], float(rng.uniform(0.4, 1.0)))
                    for _ in range(4)]
            assigned, tracks, next_id = greedy_track(dets, [None] * 4, tracks, dt=0.5, next_id=next_id)
            ids = [tid for _, tid in assigned]
            assert len(ids) == len(set(ids))
            spawned.extend(tid for _, tid in assigned)
        assert all(b >= a for a, b in zip(spawned, spawned[1:]) if b >= next_id - 1 and a >= next_id - 1)

    def test_track_ages_out(self):
        tracks = [Track(track_id=3, center=np.zeros(3), velocity=np.zeros(2), label=0,
                        score=0.9, frames_since_update=0)]
        for k in range(3):
            _, tracks, _ = greedy_track([], [], tracks, dt=0.5, next_id=10, max_age=3)
            assert len(tracks) == 1
        _, tracks, _ = greedy_track([], [], tracks, dt=0.5, next_id=10, max_age=3)
        assert tracks == []
