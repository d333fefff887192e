"""Training losses: proposal objectness/regression plus head classification and
box refinement, applied to the current frame and (as auxiliary losses with
weight 1.0) to every previous frame of the window."""

from dataclasses import dataclass

import numpy as np

from .. import numcore as nc
from ..boxes import encode_deltas, iou_matrix
from ..numcore import Tensor


@dataclass
class LossReport:
    l_cls: float
    l_reg: float
    l_aux: float
    total: float


def assign_anchors(anchors, gts, pos_iou=0.5, neg_iou=0.3):
    """Anchor assignment: IoU >= pos_iou positive, < neg_iou negative, rest ignored.

    The best anchor of each gt is forced positive (Faster R-CNN convention) so
    small or offset lesions still collect positives.
    """
    a = anchors.shape[0]
    if len(gts) == 0:
        return np.zeros(a, bool), np.ones(a, bool), np.full(a, -1, np.int64)
    m = iou_matrix(anchors, gts)
    max_iou = m.max(axis=1)
    argmax = m.argmax(axis=1)
    pos = max_iou >= pos_iou
    best_per_gt = m.argmax(axis=0)
    for g, ai in enumerate(best_per_gt):
        if m[ai, g] > 1e-6:
            pos[ai] = True
            argmax[ai] = g
    neg = (max_iou < neg_iou) & ~pos
    return pos, neg, argmax


def assign_proposals(boxes, gts, pos_iou=0.5):
    n = boxes.shape[0]
    if len(gts) == 0:
        return np.zeros(n, bool), np.full(n, -1, np.int64)
    m = iou_matrix(boxes, gts)
    return m.max(axis=1) >= pos_iou, m.argmax(axis=1)


def _zero(dtype):
    return Tensor(np.zeros((), dtype=dtype))


def frame_loss_terms(arts, head_cls_rows, head_delta_rows, gt_boxes, cfg):
    """(classification, regression) loss tensors for one frame.

    A frame without ground truth contributes only negatives.
    """
    dt = head_cls_rows.data.dtype
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)

    pos, neg, amax = assign_anchors(arts.anchors, gts)
    sel = np.concatenate([np.where(pos)[0], np.where(neg)[0]])
    if sel.size:
        targets = np.concatenate([np.ones(pos.sum()), np.zeros(neg.sum())]).astype(dt)
        obj_loss = nc.bce_with_logits(nc.take(arts.rpn_obj, sel), targets)
    else:
        obj_loss = _zero(dt)
    pos_idx = np.where(pos)[0]
    if pos_idx.size:
        t = encode_deltas(arts.anchors[pos_idx], gts[amax[pos_idx]])
        rpn_reg = nc.smooth_l1(nc.take(arts.rpn_deltas, pos_idx), Tensor(t, dtype=dt))
    else:
        rpn_reg = _zero(dt)

    p_pos, p_amax = assign_proposals(arts.boxlist.boxes, gts)
    cls_targets = p_pos.astype(np.int64)
    head_cls = nc.cross_entropy(head_cls_rows, cls_targets)
    pp = np.where(p_pos)[0]
    if pp.size:
        t = encode_deltas(arts.boxlist.boxes[pp], gts[p_amax[pp]])
        head_reg = nc.smooth_l1(nc.take(head_delta_rows, pp), Tensor(t, dtype=dt))
    else:
        head_reg = _zero(dt)

    return nc.add(obj_loss, head_cls), nc.add(rpn_reg, head_reg)


def compute_losses(window_out, gt_by_frame, cfg):
    """LossReport plus the scalar total tensor for backward.

    total = L_cls + L_reg (current frame) + L_aux, where L_aux is the same
    per-frame loss summed over the T previous window slots (weight 1.0), or 0
    when auxiliary losses are disabled.
    """
    n = cfg.proposals
    dt = window_out.cls_logits.data.dtype
    terms = []
    for slot, fid in enumerate(window_out.frame_ids):
        rows_cls, rows_reg = window_out.slot_rows(slot, n)
        gts = gt_by_frame.get(fid, np.zeros((0, 4)))
        terms.append(frame_loss_terms(window_out.artifacts[fid], rows_cls, rows_reg, gts, cfg))
    cur_cls, cur_reg = terms[-1]
    l_aux = _zero(dt)
    if cfg.aux_loss:
        for cls_t, reg_t in terms[:-1]:
            l_aux = nc.add(l_aux, nc.add(cls_t, reg_t))
    total = nc.add(nc.add(cur_cls, cur_reg), l_aux)
    report = LossReport(cur_cls.item(), cur_reg.item(), l_aux.item(), total.item())
    return report, total
