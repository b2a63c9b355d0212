"""Score-decay suppression and multi-channel ensemble fusion.

``soft_nms`` decays the scores of boxes overlapping a higher-scored box
instead of deleting them, and records which kept box absorbed which decayed
box so that ``refine_confidence`` can restore scores for boxes corroborated
by several detector channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .geometry import Detection


@dataclass(frozen=True)
class SoftNmsConfig:
    method: str = "gaussian"  # "gaussian" or "linear"
    sigma: float = 0.5
    linear_iou_threshold: float = 0.3
    score_floor: float = 0.001

    def __post_init__(self) -> None:
        if self.method not in ("gaussian", "linear"):
            raise ValueError(f"unknown soft-nms method {self.method!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if not 0.0 < self.linear_iou_threshold < 1.0:
            raise ValueError("linear_iou_threshold must be in (0, 1)")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must be in [0, 1)")


@dataclass(frozen=True)
class ClusterMember:
    """A detection decayed by a cluster representative."""

    detection: Detection  # carries the pre-decay score
    pre_decay_score: float
    iou: float  # overlap with the representative
    index: int  # ordinal in the suppression input


@dataclass(frozen=True)
class FusionCluster:
    """A kept detection plus the boxes it decayed at iou >= support_iou."""

    representative: Detection
    representative_index: int
    members: tuple[ClusterMember, ...] = ()
    support_channels: frozenset = field(default_factory=frozenset)


def _sort_key(det: Detection, ordinal: int):
    return (-det.score, str(det.channel_id), ordinal)


def soft_nms(
    dets: Sequence[Detection],
    cfg: SoftNmsConfig,
    support_iou: float = 0.55,
) -> tuple[list[Detection], list[FusionCluster]]:
    """Suppress a single class of detections by score decay.

    Returns the surviving detections sorted by final score (ties broken by
    channel id then input order) and, aligned with them, one cluster per
    survivor listing the boxes it decayed at iou >= ``support_iou``.
    """
    if not dets:
        return [], []
    class_ids = {d.class_id for d in dets}
    if len(class_ids) != 1:
        raise ValueError(f"soft_nms expects a single class, got {sorted(class_ids)}")

    order = sorted(range(len(dets)), key=lambda i: _sort_key(dets[i], i))
    ordered = [dets[i] for i in order]
    boxes = np.array(
        [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in ordered], dtype=np.float64
    )
    scores = np.array([d.score for d in ordered], dtype=np.float64)
    method = kernels.GAUSSIAN if cfg.method == "gaussian" else kernels.LINEAR
    keep, final, parent, parent_iou = kernels.soft_nms_kernel(
        boxes, scores, method, cfg.sigma, cfg.linear_iou_threshold, cfg.score_floor
    )

    members: dict[int, list[ClusterMember]] = {int(k): [] for k in keep}
    for j in range(len(ordered)):
        p = int(parent[j])
        if p >= 0 and parent_iou[j] >= support_iou and p in members:
            members[p].append(
                ClusterMember(
                    detection=ordered[j],
                    pre_decay_score=ordered[j].score,
                    iou=float(parent_iou[j]),
                    index=j,
                )
            )

    kept: list[Detection] = []
    clusters: list[FusionCluster] = []
    for k in keep:
        k = int(k)
        rep = ordered[k].with_score(float(final[k]))
        mem = tuple(members[k])
        kept.append(rep)
        clusters.append(
            FusionCluster(
                representative=rep,
                representative_index=k,
                members=mem,
                support_channels=frozenset(
                    {ordered[k].channel_id} | {m.detection.channel_id for m in mem}
                ),
            )
        )
    return kept, clusters


def weight_detections(dets: Iterable[Detection], weight: float) -> list[Detection]:
    """Scale every score by ``weight`` in [0, 1]; ordering by score is preserved."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"channel weight {weight} outside [0, 1]")
    return [d.with_score(d.score * weight) for d in dets]


def refine_confidence(
    kept: Sequence[Detection],
    clusters: Sequence[FusionCluster],
    support_iou: float = 0.55,
    min_support: int = 2,
) -> list[Detection]:
    """Restore decayed scores for multi-channel consensus clusters.

    A kept detection whose cluster holds members from at least
    ``min_support`` distinct channels (counting its own) at iou >=
    ``support_iou`` gets its score raised to the cluster's pre-decay
    maximum; the absorbed members of such clusters are removed from the
    output, so a box duplicated across channels fuses to one detection.
    """
    if len(kept) != len(clusters):
        raise ValueError("kept detections and clusters must align")
    boosted: dict[int, float] = {}
    absorbed: set[int] = set()
    for det, cluster in zip(kept, clusters):
        qualifying = [m for m in cluster.members if m.iou >= support_iou]
        channels = {det.channel_id} | {m.detection.channel_id for m in qualifying}
        if qualifying and len(channels) >= min_support:
            best = max(m.pre_decay_score for m in qualifying)
            if best > det.score:
                boosted[cluster.representative_index] = best
            absorbed.update(m.index for m in qualifying)

    out: list[tuple[Detection, int]] = []
    for det, cluster in zip(kept, clusters):
        idx = cluster.representative_index
        if idx in absorbed:
            continue
        if idx in boosted:
            det = det.with_score(boosted[idx])
        out.append((det, idx))
    out.sort(key=lambda pair: _sort_key(pair[0], pair[1]))
    return [det for det, _ in out]


def fuse_ensemble(
    channels: Sequence[tuple[Sequence[Detection], float]],
    cfg: SoftNmsConfig,
    support_iou: float = 0.55,
    min_support: int = 2,
) -> list[Detection]:
    """Fuse weighted detection channels: weight, suppress per class, refine.

    Channel order fixes tie-breaking; the result is sorted by score
    descending.
    """
    pooled: list[Detection] = []
    for dets, weight in channels:
        pooled.extend(weight_detections(dets, weight))
    if not pooled:
        return []

    by_class: dict[int, list[Detection]] = {}
    for det in pooled:
        by_class.setdefault(det.class_id, []).append(det)

    fused: list[Detection] = []
    for class_id in sorted(by_class):
        kept, clusters = soft_nms(by_class[class_id], cfg, support_iou)
        fused.extend(refine_confidence(kept, clusters, support_iou, min_support))
    fused.sort(key=lambda d: (-d.score, str(d.channel_id)))
    return fused
