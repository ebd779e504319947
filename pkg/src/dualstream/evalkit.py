"""Detection, tracking and segmentation metrics with the velocity-sliced and
sensor-drop protocols.

Conventions (echoed into every report):
  * detection matching is greedy by descending score on 2D center distance,
    one ground truth per prediction;
  * AP integrates the right-envelope precision over recall in [0.1, 1],
    normalized by 0.9;
  * TP errors are computed at the third distance threshold (the scaled 2 m);
  * the composite detection score weighs mAP by 5 and each TP term by 1
    with normalizers of 1.0 (raw errors clamped at 1); undefined TP terms
    drop out of both the numerator and the weight total;
  * AMOTA follows the recall-sweep convention over 10 evenly spaced recall
    targets; the headline IDS counts id changes of matched GT tracks on the
    raw tracker output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geom3d import BoundingBox3D, wrap_angle

BASE_AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD_INDEX = 2  # the scaled 2 m entry
NDS_MAP_WEIGHT = 5.0
NDS_NORMALIZERS = {"mATE": 1.0, "mAOE": 1.0, "mAVE": 1.0}
RECALL_POINTS = tuple(np.round(np.linspace(0.1, 1.0, 10), 10))


@dataclass
class FrameRecord:
    """Per-frame evaluation payload, everything in the current ego frame."""

    pred_boxes: list[BoundingBox3D]
    track_ids: list[Optional[int]]      # per prediction; None = not tracked
    gt_boxes: list[BoundingBox3D]
    gt_ids: list[int]
    ego_velocity: np.ndarray


@dataclass
class SceneRecord:
    frames: list[FrameRecord]


def center_distance(a: BoundingBox3D, b: BoundingBox3D) -> float:
    return float(np.linalg.norm(a.center[:2] - b.center[:2]))


def _greedy_match_frame(preds: Sequence[BoundingBox3D], gts: Sequence[BoundingBox3D],
                        threshold: float):
    """Greedy by descending score, nearest unmatched GT within threshold.

    Returns (pairs, unmatched_pred_indices): pairs are (pred_i, gt_j).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken: set[int] = set()
    pairs, unmatched = [], []
    for i in order:
        best_j, best_d = None, threshold
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            d = center_distance(preds[i], gt)
            if d <= best_d and (best_j is None or d < best_d):
                best_j, best_d = j, d
        if best_j is None:
            unmatched.append(i)
        else:
            taken.add(best_j)
            pairs.append((i, best_j))
    return pairs, unmatched


@dataclass
class ClassDetectionResult:
    ap: float
    n_gt: int
    matches: list[tuple[BoundingBox3D, BoundingBox3D]]  # at the TP threshold


def detection_ap(scenes: Sequence[SceneRecord], label: int, dist_threshold: float) -> ClassDetectionResult:
    """Average precision for one class at one center-distance threshold.

    Predictions are pooled over all frames and swept by descending score;
    matching is greedy within each frame, one GT per prediction. AP is the
    area under the right-envelope precision over recall in [0.1, 1],
    normalized by 0.9.
    """
    entries = []  # (score, frame_key, pred)
    n_gt = 0
    frame_gts = {}
    for s_idx, scene in enumerate(scenes):
        for f_idx, fr in enumerate(scene.frames):
            key = (s_idx, f_idx)
            gts = [g for g in fr.gt_boxes if g.label == label]
            frame_gts[key] = gts
            n_gt += len(gts)
            for p_idx, p in enumerate(fr.pred_boxes):
                if p.label == label:
                    entries.append((p.score, key, p_idx, p))
    result = ClassDetectionResult(ap=0.0, n_gt=n_gt, matches=[])
    if n_gt == 0:
        return result
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    taken: dict[tuple, set] = {k: set() for k in frame_gts}
    tp, fp = 0, 0
    recalls, precisions = [], []
    for score, key, _, pred in entries:
        gts = frame_gts[key]
        best_j, best_d = None, dist_threshold
        for j, gt in enumerate(gts):
            if j in taken[key]:
                continue
            d = center_distance(pred, gt)
            if best_j is None or d < best_d:
                if d <= dist_threshold:
                    best_j, best_d = j, d
        if best_j is None:
            fp += 1
        else:
            taken[key].add(best_j)
            tp += 1
            result.matches.append((pred, gts[best_j]))
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    result.ap = _envelope_ap(np.array(recalls), np.array(precisions))
    return result


def _envelope_ap(recalls: np.ndarray, precisions: np.ndarray, min_recall: float = 0.1) -> float:
    """Exact area under the max-to-the-right precision envelope."""
    if recalls.size == 0:
        return 0.0
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    area = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        lo = max(prev_r, min_recall)
        if r > lo:
            area += (r - lo) * p
        prev_r = max(prev_r, r)
    return area / (1.0 - min_recall)


def tp_errors(matches: Sequence[tuple[BoundingBox3D, BoundingBox3D]]):
    """(mATE, mAOE, mAVE) over matched pairs; None each when no matches."""
    if not matches:
        return {"mATE": None, "mAOE": None, "mAVE": None}
    ate = float(np.mean([center_distance(p, g) for p, g in matches]))
    aoe = float(np.mean([abs(wrap_angle(p.yaw - g.yaw)) for p, g in matches]))
    ave = float(np.mean([np.linalg.norm(p.velocity - g.velocity) for p, g in matches]))
    return {"mATE": ate, "mAOE": aoe, "mAVE": ave}


def nds(mean_ap: float, errors: dict) -> float:
    """Composite detection score; undefined error terms are excluded from
    the numerator and the weight total."""
    num = NDS_MAP_WEIGHT * mean_ap
    weight = NDS_MAP_WEIGHT
    for name, norm in NDS_NORMALIZERS.items():
        err = errors.get(name)
        if err is None:
            continue
        num += 1.0 - min(1.0, err / norm)
        weight += 1.0
    return num / weight if weight else 0.0


# ---------------------------------------------------------------------------
# tracking

def _frame_track_matches(fr: FrameRecord, threshold: float, min_score: float):
    """Greedy matching of tracked predictions (score >= min_score) to GT."""
    preds, tids = [], []
    for p, tid in zip(fr.pred_boxes, fr.track_ids):
        if tid is not None and p.score >= min_score:
            preds.append(p)
            tids.append(tid)
    pairs, unmatched = _greedy_match_frame(preds, fr.gt_boxes, threshold)
    matched = [(tids[i], fr.gt_ids[j], center_distance(preds[i], fr.gt_boxes[j])) for i, j in pairs]
    return matched, len(unmatched), len(fr.gt_boxes) - len(pairs)


def _tracking_counts(scenes: Sequence[SceneRecord], threshold: float, min_score: float):
    """(TP, FP, FN, IDS, mean matched distance) at one score threshold."""
    tp = fp = fn = ids = 0
    dists = []
    for scene in scenes:
        last_match: dict[int, int] = {}  # gt id -> last matched track id
        for fr in scene.frames:
            matched, n_fp, n_fn = _frame_track_matches(fr, threshold, min_score)
            tp += len(matched)
            fp += n_fp
            fn += n_fn
            for tid, gid, d in matched:
                dists.append(d)
                if gid in last_match and last_match[gid] != tid:
                    ids += 1
                last_match[gid] = tid
    motp = float(np.mean(dists)) if dists else None
    return tp, fp, fn, ids, motp


def amota(scenes: Sequence[SceneRecord], threshold: float):
    """Recall-swept tracking metrics.

    Returns dict with AMOTA, AMOTP, recall (max achieved), IDS (headline,
    at no score cut).
    """
    n_gt = sum(len(fr.gt_boxes) for s in scenes for fr in s.frames)
    scores = sorted(
        {p.score for s in scenes for fr in s.frames
         for p, tid in zip(fr.pred_boxes, fr.track_ids) if tid is not None},
        reverse=True,
    )
    _, _, _, ids_headline, _ = _tracking_counts(scenes, threshold, min_score=0.0)
    if n_gt == 0 or not scores:
        return {"AMOTA": 0.0, "AMOTP": None, "recall": 0.0, "IDS": ids_headline}

    # recall achieved at candidate score thresholds (descending); large score
    # lists are subsampled evenly to bound the sweep cost
    if len(scores) > 64:
        idx = np.unique(np.linspace(0, len(scores) - 1, 64).astype(np.int64))
        scores = [scores[i] for i in idx]
    curve = []
    for s in scores:
        tp, fp, fn, ids_r, motp = _tracking_counts(scenes, threshold, min_score=s)
        recall = tp / n_gt
        curve.append((recall, s, tp, fp, fn, ids_r, motp))
    max_recall = max(c[0] for c in curve)

    motar_terms, motp_terms = [], []
    for r in RECALL_POINTS:
        hit = next((c for c in curve if c[0] >= r), None)
        if hit is None:
            motar_terms.append(0.0)
            continue
        recall, _, tp, fp, fn, ids_r, motp = hit
        denom = r * n_gt
        motar = max(0.0, 1.0 - (ids_r + fp + fn - (1.0 - r) * n_gt) / denom)
        motar_terms.append(motar)
        if motp is not None:
            motp_terms.append(motp)
    return {
        "AMOTA": float(np.mean(motar_terms)),
        "AMOTP": float(np.mean(motp_terms)) if motp_terms else None,
        "recall": float(max_recall),
        "IDS": int(ids_headline),
    }


# ---------------------------------------------------------------------------
# segmentation

def seg_iou(prob_or_logit: np.ndarray, gt_masks: np.ndarray, threshold: float = 0.5,
            logits: bool = True) -> list[float]:
    """Per-class IoU of the binarized prediction; both-empty counts as 1."""
    if prob_or_logit.shape != gt_masks.shape:
        raise ValueError(f"shape mismatch {prob_or_logit.shape} vs {gt_masks.shape}")
    if logits:
        pred = prob_or_logit >= _logit(threshold)
    else:
        pred = prob_or_logit >= threshold
    gt = gt_masks >= 0.5
    out = []
    for c in range(pred.shape[0]):
        inter = np.logical_and(pred[c], gt[c]).sum()
        union = np.logical_or(pred[c], gt[c]).sum()
        out.append(1.0 if union == 0 else float(inter / union))
    return out


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# slicing and the full report

def _speed(box: BoundingBox3D) -> float:
    return float(np.linalg.norm(box.velocity))


def _in_velocity_slice(box: BoundingBox3D, ego_velocity: np.ndarray, v_min: float) -> bool:
    return _speed(box) > v_min and float(np.linalg.norm(box.velocity - ego_velocity)) > v_min


def velocity_slice_records(scenes: Sequence[SceneRecord], v_min: float,
                           match_threshold: float) -> list[SceneRecord]:
    """Restrict GT to agents whose absolute and ego-relative speed both
    exceed ``v_min``; predictions whose best full-set match is an
    out-of-slice GT are dropped."""
    out = []
    for scene in scenes:
        frames = []
        for fr in scene.frames:
            keep_gt = [_in_velocity_slice(g, fr.ego_velocity, v_min) for g in fr.gt_boxes]
            pairs, _ = _greedy_match_frame(fr.pred_boxes, fr.gt_boxes, match_threshold)
            drop_pred = {i for i, j in pairs if not keep_gt[j]}
            keep_idx = [i for i in range(len(fr.pred_boxes)) if i not in drop_pred]
            frames.append(FrameRecord(
                pred_boxes=[fr.pred_boxes[i] for i in keep_idx],
                track_ids=[fr.track_ids[i] for i in keep_idx],
                gt_boxes=[g for g, k in zip(fr.gt_boxes, keep_gt) if k],
                gt_ids=[i for i, k in zip(fr.gt_ids, keep_gt) if k],
                ego_velocity=fr.ego_velocity,
            ))
        out.append(SceneRecord(frames=frames))
    return out


@dataclass
class SliceMetrics:
    mAP: float
    per_class_ap: dict
    mATE: Optional[float]
    mAOE: Optional[float]
    mAVE: Optional[float]
    NDS: float
    AMOTA: float
    AMOTP: Optional[float]
    recall: float
    IDS: int
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP, "per_class_ap": self.per_class_ap,
            "mATE": self.mATE, "mAOE": self.mAOE, "mAVE": self.mAVE, "NDS": self.NDS,
            "AMOTA": self.AMOTA, "AMOTP": self.AMOTP, "recall": self.recall,
            "IDS": self.IDS, "empty": self.empty,
        }


def evaluate_detection_slice(scenes: Sequence[SceneRecord], labels: Sequence[int],
                             thresholds: Sequence[float]) -> SliceMetrics:
    n_gt_total = sum(len(fr.gt_boxes) for s in scenes for fr in s.frames)
    per_class = {}
    aps = []
    matches_tp = []
    for label in labels:
        per_thr = {}
        for k, thr in enumerate(thresholds):
            res = detection_ap(scenes, label, thr)
            if res.n_gt > 0:
                per_thr[f"{thr:.5g}"] = res.ap
                aps.append(res.ap)
                if k == TP_THRESHOLD_INDEX:
                    matches_tp.extend(res.matches)
        if per_thr:
            per_class[str(label)] = per_thr
    mean_ap = float(np.mean(aps)) if aps else 0.0
    errs = tp_errors(matches_tp)
    track = amota(scenes, thresholds[TP_THRESHOLD_INDEX])
    return SliceMetrics(
        mAP=mean_ap, per_class_ap=per_class,
        mATE=errs["mATE"], mAOE=errs["mAOE"], mAVE=errs["mAVE"],
        NDS=nds(mean_ap, errs),
        AMOTA=track["AMOTA"], AMOTP=track["AMOTP"], recall=track["recall"], IDS=track["IDS"],
        empty=(n_gt_total == 0),
    )


@dataclass
class EvalReport:
    run_id: str
    code_version: str
    config: dict
    conventions: dict
    slices: dict[str, SliceMetrics]
    seg: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "run_id": self.run_id,
            "code_version": self.code_version,
            "config": self.config,
            "conventions": self.conventions,
            "slices": {name: m.to_dict() for name, m in self.slices.items()},
            "seg": self.seg,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        lines = ["slice,metric,value"]
        for name, m in sorted(self.slices.items()):
            for key, val in sorted(m.to_dict().items()):
                if key == "per_class_ap":
                    for cls, thr_map in sorted(val.items()):
                        for thr, ap in sorted(thr_map.items()):
                            lines.append(f"{name},ap_class{cls}_thr{thr},{ap!r}")
                elif not isinstance(val, dict):
                    lines.append(f"{name},{key},{'' if val is None else repr(val)}")
        for key, val in sorted(self.seg.items()):
            lines.append(f"all,seg_{key},{val!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        doc = json.loads(text)
        slices = {name: SliceMetrics(**{k: v for k, v in d.items()}) for name, d in doc["slices"].items()}
        return EvalReport(run_id=doc["run_id"], code_version=doc["code_version"],
                          config=doc["config"], conventions=doc["conventions"],
                          slices=slices, seg=doc.get("seg", {}))
