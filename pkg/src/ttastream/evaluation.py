"""Detection metrics: AP and AR averaged over IoU thresholds 0.50 to 0.95.

Average precision uses 101-point interpolation over the monotone precision
envelope; average recall is AR@100. Classes with no ground truth are
excluded from both means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .geometry import Box, Detection

IOU_THRESHOLDS: tuple[float, ...] = tuple(0.5 + 0.05 * i for i in range(10))
RECALL_POINTS = np.array([i / 100.0 for i in range(101)], dtype=np.float64)


class EvaluationError(ValueError):
    pass


class UndefinedAp(EvaluationError):
    """Raised when AP is requested for a class with no ground truth."""


@dataclass(frozen=True)
class GroundTruth:
    frame_id: str
    box: Box
    class_id: int
    ignore: bool = False


@dataclass(frozen=True)
class MatchCounts:
    matched: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    ap: dict[int, list[float | None]]  # class -> AP per threshold, None without GT
    num_gt: dict[int, int]
    map_5095: float
    ar_100: float
    counts: list[MatchCounts] = field(default_factory=list)  # per threshold

    def to_json_dict(self) -> dict:
        return {
            "thresholds": [round(t, 2) for t in self.thresholds],
            "ap_per_class": {
                str(c): [None if v is None else v for v in row]
                for c, row in sorted(self.ap.items())
            },
            "num_gt_per_class": {str(c): n for c, n in sorted(self.num_gt.items())},
            "map_5095": self.map_5095,
            "ar_100": self.ar_100,
            "counts": [
                {"matched": c.matched, "fp": c.fp, "fn": c.fn} for c in self.counts
            ],
        }

    def to_text_table(self) -> str:
        header = "class " + " ".join(f"AP@{t:.2f}" for t in self.thresholds) + "   mean"
        lines = [header, "-" * len(header)]
        for c in sorted(self.ap):
            row = self.ap[c]
            if all(v is None for v in row):
                cells = ["   --- " for _ in row] + ["    ---"]
            else:
                vals = [v for v in row if v is not None]
                cells = [f"{v:7.4f}" for v in row] + [f"{sum(vals) / len(vals):7.4f}"]
            lines.append(f"{c:<6d}" + " ".join(cells))
        lines.append("-" * len(header))
        lines.append(f"mAP@[.50:.95] = {self.map_5095:.6f}")
        lines.append(f"AR@100        = {self.ar_100:.6f}")
        return "\n".join(lines)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_t: float,
) -> list[tuple[int, int | None]]:
    """Greedy single-frame, single-class matching at one IoU threshold.

    Detections are processed by descending score (input order on ties);
    each takes the unmatched non-ignore ground truth of highest iou >=
    ``iou_t``, falling back to the ignore ground truth of highest iou
    (ignore matches are non-exclusive, and excluded from PR accounting
    downstream). Returns (detection index, matched gt index or None) in
    processing order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    if not gts:
        return [(i, None) for i in order]
    det_boxes = np.array(
        [[dets[i].box.x1, dets[i].box.y1, dets[i].box.x2, dets[i].box.y2] for i in order],
        dtype=np.float64,
    ).reshape(len(order), 4)
    gt_boxes = np.array(
        [[g.box.x1, g.box.y1, g.box.x2, g.box.y2] for g in gts], dtype=np.float64
    )
    ious = kernels.iou_matrix(det_boxes, gt_boxes) if order else np.zeros((0, len(gts)))

    taken = [False] * len(gts)
    result: list[tuple[int, int | None]] = []
    for row, det_idx in enumerate(order):
        best_j, best_iou = None, iou_t
        best_ign_j, best_ign_iou = None, iou_t
        for j, gt in enumerate(gts):
            ov = float(ious[row, j])
            if gt.ignore:
                if ov >= best_ign_iou and (best_ign_j is None or ov > best_ign_iou):
                    best_ign_j, best_ign_iou = j, ov
            elif not taken[j]:
                if ov >= best_iou and (best_j is None or ov > best_iou):
                    best_j, best_iou = j, ov
        if best_j is not None:
            taken[best_j] = True
            result.append((det_idx, best_j))
        elif best_ign_j is not None:
            result.append((det_idx, best_ign_j))
        else:
            result.append((det_idx, None))
    return result


def average_precision(
    scored_matches: Sequence[tuple[float, bool]], num_gt: int
) -> float:
    """101-point interpolated AP from dataset-wide (score, is_tp) pairs.

    ``scored_matches`` must exclude ignore-matched detections. Raises
    :class:`UndefinedAp` when ``num_gt`` is zero.
    """
    if num_gt < 0:
        raise EvaluationError("num_gt must be >= 0")
    if num_gt == 0:
        raise UndefinedAp("AP is undefined for a class with no ground truth")
    if not scored_matches:
        return 0.0
    order = sorted(range(len(scored_matches)), key=lambda i: (-scored_matches[i][0], i))
    tp = np.array([1.0 if scored_matches[i][1] else 0.0 for i in order])
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # monotone non-increasing envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.sum(sampled) / len(RECALL_POINTS))


def average_recall(
    matched_per_threshold: Sequence[int], num_gt: int, max_dets: int = 100
) -> float:
    """Mean recall over thresholds for one class (``max_dets`` applied upstream)."""
    if num_gt <= 0:
        raise UndefinedAp("AR is undefined for a class with no ground truth")
    return float(sum(m / num_gt for m in matched_per_threshold) / len(matched_per_threshold))


def _class_frame_dets(dets: Sequence[Detection], class_id: int) -> list[Detection]:
    return [d for d in dets if d.class_id == class_id]


def evaluate(
    dets_by_frame: Mapping[str, Sequence[Detection]],
    gts_by_frame: Mapping[str, Sequence[GroundTruth]],
    classes: int,
    max_dets: int = 100,
) -> EvalReport:
    """Dataset evaluation across classes and the ten IoU thresholds.

    The ground-truth mapping defines the frame universe; a detection frame
    id absent from it is an error.
    """
    for frame_id, frame_dets in dets_by_frame.items():
        if frame_id not in gts_by_frame:
            raise EvaluationError(
                f"detections reference frame {frame_id!r} absent from ground truth"
            )
        for d in frame_dets:
            if d.class_id >= classes:
                raise EvaluationError(
                    f"detection class_id {d.class_id} outside configured {classes} classes"
                )
    for frame_gts in gts_by_frame.values():
        for g in frame_gts:
            if g.class_id >= classes:
                raise EvaluationError(
                    f"ground-truth class_id {g.class_id} outside configured {classes} classes"
                )

    frames = list(gts_by_frame.keys())
    num_gt = {
        c: sum(
            1
            for f in frames
            for g in gts_by_frame[f]
            if g.class_id == c and not g.ignore
        )
        for c in range(classes)
    }

    ap: dict[int, list[float | None]] = {c: [] for c in range(classes)}
    recall_matrix: dict[int, list[float]] = {c: [] for c in range(classes)}
    counts: list[MatchCounts] = []

    for t in IOU_THRESHOLDS:
        t_matched = t_fp = t_fn = 0
        for c in range(classes):
            scored: list[tuple[float, bool]] = []
            matched_limited = 0
            for f in frames:
                frame_dets = _class_frame_dets(dets_by_frame.get(f, ()), c)
                frame_gts = [g for g in gts_by_frame[f] if g.class_id == c]
                matches = match_detections(frame_dets, frame_gts, t)
                for det_idx, gt_idx in matches:
                    if gt_idx is not None and frame_gts[gt_idx].ignore:
                        continue  # excluded from PR entirely
                    scored.append((frame_dets[det_idx].score, gt_idx is not None))
                if len(frame_dets) > max_dets:
                    top = sorted(
                        range(len(frame_dets)),
                        key=lambda i: (-frame_dets[i].score, i),
                    )[:max_dets]
                    limited = [frame_dets[i] for i in top]
                    lmatches = match_detections(limited, frame_gts, t)
                    matched_limited += sum(
                        1
                        for _, gt_idx in lmatches
                        if gt_idx is not None and not frame_gts[gt_idx].ignore
                    )
                else:
                    matched_limited += sum(
                        1
                        for _, gt_idx in matches
                        if gt_idx is not None and not frame_gts[gt_idx].ignore
                    )
            if num_gt[c] == 0:
                ap[c].append(None)
            else:
                ap[c].append(average_precision(scored, num_gt[c]))
                recall_matrix[c].append(matched_limited / num_gt[c])
            tp_here = sum(1 for _, is_tp in scored if is_tp)
            t_matched += tp_here
            t_fp += sum(1 for _, is_tp in scored if not is_tp)
            t_fn += num_gt[c] - tp_here
        counts.append(MatchCounts(matched=t_matched, fp=t_fp, fn=t_fn))

    evaluated = [c for c in range(classes) if num_gt[c] > 0]
    if evaluated:
        map_5095 = float(
            np.mean([v for c in evaluated for v in ap[c] if v is not None])
        )
        ar_100 = float(np.mean([np.mean(recall_matrix[c]) for c in evaluated]))
    else:
        map_5095 = 0.0
        ar_100 = 0.0

    return EvalReport(
        thresholds=IOU_THRESHOLDS,
        ap=ap,
        num_gt=num_gt,
        map_5095=map_5095,
        ar_100=ar_100,
        counts=counts,
    )
