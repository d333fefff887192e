"""Evaluation metrics: precision at fixed recall, FP sequences per minute,
AP50, and top-k proposal recall.

All functions are pure over flat detection / ground-truth records
({clip_id, frame_index, box, score}) and order their inputs internally, so
results are invariant to input record order. Recall is dataset-wide and
frame-level (pooled TP over pooled ground truths). Artifact-kind tracks are
not ground truth: detections on them count as false positives.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import iou
from .synthvid import Dataset


class EvalError(ValueError):
    pass


def _det_key(d):
    return (-d["score"], d["clip_id"], d["frame_index"], tuple(d["box"]))


def _group_by_frame(records):
    out = {}
    for r in records:
        out.setdefault((r["clip_id"], r["frame_index"]), []).append(r)
    return out


def match_frame(dets, gts, thresh=0.5):
    """Greedy per-frame matching: each detection (score-descending order) takes
    the highest-IoU unmatched gt with IoU >= thresh; one gt matches once.

    Returns (tp flags per detection, matched flags per gt).
    """
    tp = [False] * len(dets)
    matched = [False] * len(gts)
    for i, d in enumerate(dets):
        best = -1
        best_iou = 0.0
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            v = iou(d["box"], gt)
            if v >= thresh and v > best_iou:
                best = g
                best_iou = v
        if best >= 0:
            tp[i] = True
            matched[best] = True
    return tp, matched


def _sorted_flags(dets, gts, thresh):
    """Detections in global deterministic score order with their TP flags."""
    dets_sorted = sorted(dets, key=_det_key)
    gt_map = {k: [r["box"] for r in v] for k, v in _group_by_frame(gts).items()}
    by_frame = {}
    for pos, d in enumerate(dets_sorted):
        by_frame.setdefault((d["clip_id"], d["frame_index"]), []).append(pos)
    flags = np.zeros(len(dets_sorted), dtype=bool)
    for key, positions in by_frame.items():
        tp, _ = match_frame([dets_sorted[p] for p in positions], gt_map.get(key, []), thresh)
        for p, f in zip(positions, tp):
            flags[p] = f
    return dets_sorted, flags


def precision_at_recall(dets, gts, target, thresh=0.5):
    """(precision, threshold, reachable) at the largest score threshold whose
    dataset-wide recall reaches the target; unreachable -> threshold 0.0."""
    if not 0.0 < target <= 1.0:
        raise EvalError(f"recall target must be in (0, 1], got {target}")
    total_gt = len(gts)
    if total_gt == 0:
        raise EvalError("precision_at_recall is undefined with zero ground truths")
    dets_sorted, flags = _sorted_flags(dets, gts, thresh)
    scores = np.array([d["score"] for d in dets_sorted], dtype=np.float64)
    cum_tp = np.cumsum(flags)
    for thr in np.unique(scores)[::-1]:
        kept = int(np.searchsorted(-scores, -thr, side="right"))
        recall = cum_tp[kept - 1] / total_gt if kept else 0.0
        if recall >= target:
            precision = cum_tp[kept - 1] / kept
            return float(precision), float(thr), True
    kept = len(dets_sorted)
    precision = (cum_tp[-1] / kept) if kept else 0.0
    return float(precision), 0.0, False


def fp_sequences_per_minute(dets, gts, clip_frames, fps, threshold, link_iou=0.5, thresh=0.5):
    """FP chains per minute of video at a fixed operating threshold.

    False positives of consecutive frames are linked when IoU >= link_iou
    (greedy highest-IoU pairing, no frame gaps); each connected chain counts
    once. The rate divides by the total video minutes of `clip_frames`.
    """
    if fps <= 0:
        raise EvalError(f"fps must be positive, got {fps}")
    kept = [d for d in dets if d["score"] >= threshold]
    dets_sorted, flags = _sorted_flags(kept, gts, thresh)
    fp_by_clip = {}
    for d, f in zip(dets_sorted, flags):
        if not f:
            fp_by_clip.setdefault(d["clip_id"], {}).setdefault(d["frame_index"], []).append(d["box"])
    total_minutes = sum(clip_frames.values()) / fps / 60.0
    if total_minutes <= 0:
        raise EvalError("total video time is zero")
    chains = 0
    for clip_id, frames in fp_by_clip.items():
        n_fp = sum(len(v) for v in frames.values())
        links = 0
        for f in sorted(frames):
            if f + 1 not in frames:
                continue
            cur, nxt = frames[f], frames[f + 1]
            pairs = []
            for i, a in enumerate(cur):
                for j, b in enumerate(nxt):
                    v = iou(a, b)
                    if v >= link_iou:
                        pairs.append((-v, i, j))
            used_i, used_j = set(), set()
            for _, i, j in sorted(pairs):
                if i in used_i or j in used_j:
                    continue
                used_i.add(i)
                used_j.add(j)
                links += 1
        chains += n_fp - links
    return chains / total_minutes


def ap50(dets, gts, thresh=0.5):
    """All-point interpolated average precision at IoU 0.5."""
    if len(gts) == 0:
        raise EvalError("ap50 is undefined with zero ground truths")
    if len(dets) == 0:
        return 0.0
    _, flags = _sorted_flags(dets, gts, thresh)
    cum_tp = np.cumsum(flags)
    cum_fp = np.cumsum(~flags)
    recall = cum_tp / len(gts)
    precision = cum_tp / (cum_tp + cum_fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for k in range(len(recall)):
        if flags[k]:
            ap += (recall[k] - prev_r) * env[k]
            prev_r = recall[k]
    return float(ap)


def recall_at_k(proposals, gts, k=16, thresh=0.5):
    """Mean per-frame fraction of gts covered by the top-k proposals, over
    frames that contain at least one gt."""
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    gt_map = {key: [r["box"] for r in v] for key, v in _group_by_frame(gts).items()}
    if not gt_map:
        raise EvalError("recall_at_k is undefined with zero ground truths")
    prop_map = _group_by_frame(proposals)
    fractions = []
    for key in sorted(gt_map):
        gt_boxes = gt_map[key]
        frame_props = sorted(prop_map.get(key, []), key=_det_key)[:k]
        _, matched = match_frame(frame_props, gt_boxes, thresh)
        fractions.append(sum(matched) / len(gt_boxes))
    return float(np.mean(fractions))


@dataclass
class MetricReport:
    pr80: float
    pr90: float
    fp80: float
    fp90: float
    ap50: float
    r_at_16: float
    thresholds: dict
    flags: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _load_jsonl(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def evaluate(preds, dataset, proposals=None, split="test", k=16,
             iou_thresh=0.5, link_iou=0.5, targets=(0.80, 0.90)):
    """Full metric report for a prediction set against a rendered dataset.

    `preds`/`proposals` may be record lists or JSONL paths; `dataset` a
    Dataset or its directory. R@k uses the proposal-stage records when given,
    otherwise falls back to the detections (flagged).
    """
    if isinstance(preds, (str, bytes)):
        preds = _load_jsonl(preds)
    if isinstance(proposals, (str, bytes)):
        proposals = _load_jsonl(proposals)
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    known = set(dataset.clip_ids(split))
    offenders = sorted({d["clip_id"] for d in preds} - known)
    if offenders:
        raise EvalError(f"predictions reference unknown clip ids: {offenders}")
    gts = dataset.ground_truth_records(split=split, kind="lesion")
    if len(gts) == 0:
        raise EvalError(f"no lesion ground truth in split {split!r}")
    clip_frames = dataset.clip_frame_counts(split=split)

    flags = []
    values = {}
    thresholds = {}
    for target in targets:
        name = f"{int(round(target * 100))}"
        prec, thr, reachable = precision_at_recall(preds, gts, target, thresh=iou_thresh)
        if not reachable:
            flags.append(f"recall_{target:.2f}_unreachable")
        values[f"pr{name}"] = prec
        thresholds[f"pr{name}"] = thr
        values[f"fp{name}"] = fp_sequences_per_minute(
            preds, gts, clip_frames, dataset.fps, thr, link_iou=link_iou, thresh=iou_thresh)

    if proposals is None:
        proposals = preds
        flags.append("r_at_16_on_detections")
    return MetricReport(
        pr80=values["pr80"], pr90=values["pr90"],
        fp80=values["fp80"], fp90=values["fp90"],
        ap50=ap50(preds, gts, thresh=iou_thresh),
        r_at_16=recall_at_k(proposals, gts, k=k, thresh=iou_thresh),
        thresholds=thresholds, flags=flags)
