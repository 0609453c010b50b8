"""Box arithmetic: IoU, greedy suppression, one-to-one matching."""
import numpy as np
import torch

from ..errors import ParameterDomainError


def iou(box_a, box_b):
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    if not (ax2 > ax1 and ay2 > ay1):
        raise ParameterDomainError(f"degenerate box {tuple(box_a)}")
    if not (bx2 > bx1 and by2 > by1):
        raise ParameterDomainError(f"degenerate box {tuple(box_b)}")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def box_iou_matrix(a, b):
    """Pairwise IoU between K x 4 and M x 4 arrays (numpy or torch, no grad)."""
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a, dtype=np.float64)
    b = b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b, dtype=np.float64)
    a = a.reshape(-1, 4)
    b = b.reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(boxes, scores, iou_threshold=0.5):
    """Greedy suppression; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = box_iou_matrix(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        suppressed[pos + 1:] |= ious[i, order[pos + 1:]] >= iou_threshold
    return keep


def match_count(det_boxes, gt_boxes, iou_min=0.5):
    """Number of ground-truth boxes matched one-to-one by detections.

    Detections are assumed sorted by descending score; each takes the unmatched
    ground truth it overlaps most, if that overlap reaches ``iou_min``.
    Returns ``(count, matched_gt_mask)``.
    """
    m = box_iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(m.shape[1], dtype=bool)
    for row in m:
        row = np.where(taken, -1.0, row)
        if row.size and row.max() >= iou_min:
            taken[int(row.argmax())] = True
    return int(taken.sum()), taken
