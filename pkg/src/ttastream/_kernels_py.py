"""Pure-Python (numpy) implementation of the hot box kernels.

Used when the compiled extension is unavailable; the compiled module in
``_kernels.pyx`` mirrors this arithmetic operation for operation so both
backends agree to floating-point noise.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

GAUSSIAN = 0
LINEAR = 1


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (n, 4) / (m, 4) corner-form box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((ix > 0.0) & (iy > 0.0), ix * iy, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where((inter > 0.0) & (union > 0.0), inter / np.where(union > 0.0, union, 1.0), 0.0)


def soft_nms_kernel(
    boxes: np.ndarray,
    scores: np.ndarray,
    method: int,
    sigma: float,
    lin_thresh: float,
    floor: float,
):
    """Score-decay suppression over one class worth of boxes.

    ``boxes`` is (n, 4) corner-form, pre-sorted by the caller's tie-break
    order; selection scans ascending and takes the first maximum, so input
    order is the tie-break. Gaussian decay multiplies every overlapping
    box's score by exp(-iou^2 / sigma); linear decay multiplies by
    (1 - iou) when iou > lin_thresh. Boxes whose running score drops below
    ``floor`` are discarded.

    Returns ``(keep, final, parent, parent_iou)``:
      keep:       int64 indices of surviving boxes, in selection order
                  (which is non-increasing final score);
      final:      float64 score of every input box at keep/drop time;
      parent:     int64 index of the kept box that decayed each box the
                  most (largest decay iou, earliest kept on ties), -1 if
                  the box was never decayed;
      parent_iou: iou with that parent (0.0 where parent is -1).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    cur = scores.copy()
    final = scores.copy()
    alive = np.ones(n, dtype=bool)
    parent = np.full(n, -1, dtype=np.int64)
    parent_iou = np.zeros(n, dtype=np.float64)
    keep: list[int] = []
    if n == 0:
        return np.zeros(0, dtype=np.int64), final, parent, parent_iou

    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    while alive.any():
        masked = np.where(alive, cur, -np.inf)
        m = int(np.argmax(masked))  # first max -> input-order tie-break
        alive[m] = False
        final[m] = cur[m]
        keep.append(m)

        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        ix = np.minimum(boxes[m, 2], boxes[idx, 2]) - np.maximum(boxes[m, 0], boxes[idx, 0])
        iy = np.minimum(boxes[m, 3], boxes[idx, 3]) - np.maximum(boxes[m, 1], boxes[idx, 1])
        inter = np.where((ix > 0.0) & (iy > 0.0), ix * iy, 0.0)
        union = areas[m] + areas[idx] - inter
        ov = np.where((inter > 0.0) & (union > 0.0), inter / np.where(union > 0.0, union, 1.0), 0.0)

        if method == GAUSSIAN:
            decayed = ov > 0.0
            factor = np.exp(-(ov * ov) / sigma)
        else:
            decayed = ov > lin_thresh
            factor = 1.0 - ov
        cur[idx[decayed]] *= factor[decayed]

        better = decayed & (ov > parent_iou[idx])  # strict: earliest kept wins ties
        parent[idx[better]] = m
        parent_iou[idx[better]] = ov[better]

        dropped = idx[cur[idx] < floor]
        final[dropped] = cur[dropped]
        alive[dropped] = False

    return np.asarray(keep, dtype=np.int64), final, parent, parent_iou
