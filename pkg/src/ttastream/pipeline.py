"""Per-frame orchestration: visibility boost, domain routing, adaptation, fusion.

Each frame takes exactly one of two paths. Frames classified as night (when
night routing is enabled) are served by the night channel alone with no
adaptation step; all other frames run one adaptation step on the
multi-domain channel and fuse the ensemble under the scheduled source
weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .domain import DiscriminatorModel, DomainLabel, extract_features, predict_domain
from .evaluation import EvalReport, evaluate
from .formats import FrameManifest, load_channel_detections
from .fusion import SoftNmsConfig, fuse_ensemble
from .geometry import Detection
from .imaging import Image, VisibilityConfig, parse_ppm, visibility_boost
from .mean_teacher import AdaptState, MtConfig, ParamVector, adapt_step


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSchedule:
    initial_source_weight: float = 0.3
    ramp_frames: int = 1000

    def __post_init__(self) -> None:
        if not 0.0 <= self.initial_source_weight <= 1.0:
            raise ValueError("initial_source_weight must be in [0, 1]")
        if self.ramp_frames < 1:
            raise ValueError("ramp_frames must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    soft_nms: SoftNmsConfig = field(default_factory=SoftNmsConfig)
    visibility: VisibilityConfig = field(default_factory=VisibilityConfig)
    mt: MtConfig = field(default_factory=MtConfig)
    schedule: EnsembleSchedule = field(default_factory=EnsembleSchedule)
    support_iou: float = 0.55
    min_support: int = 2
    night_routing: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ChannelRoles:
    """Channel ids resolved by role from the manifest."""

    source: str
    multi_domain: str
    auxiliary: tuple[str, ...] = ()
    night: str | None = None

    @staticmethod
    def from_entries(entries, night_required: bool) -> "ChannelRoles":
        by_role: dict[str, list[str]] = {}
        for e in entries:
            by_role.setdefault(e.role, []).append(e.channel_id)
        for role in ("source", "multi_domain"):
            if len(by_role.get(role, [])) != 1:
                raise PipelineError(f"expected exactly one {role!r} channel")
        nights = by_role.get("night", [])
        if night_required and len(nights) != 1:
            raise PipelineError("night routing needs exactly one night channel")
        if len(nights) > 1:
            raise PipelineError("at most one night channel is allowed")
        return ChannelRoles(
            source=by_role["source"][0],
            multi_domain=by_role["multi_domain"][0],
            auxiliary=tuple(by_role.get("auxiliary", [])),
            night=nights[0] if nights else None,
        )


@dataclass
class FrameResult:
    frame_id: str
    route: str  # "night" or "ensemble"
    domain: DomainLabel
    domain_p: float
    visibility_applied: bool
    weights: dict[str, float]
    detections: list[Detection]
    adapt_loss: float | None

    def to_json_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "route": self.route,
            "domain": self.domain.value,
            "domain_p": self.domain_p,
            "visibility_applied": self.visibility_applied,
            "weights": {k: self.weights[k] for k in sorted(self.weights)},
            "adapt_loss": self.adapt_loss,
            "detections": [
                {
                    "channel_id": d.channel_id,
                    "class_id": d.class_id,
                    "score": d.score,
                    "x1": d.box.x1,
                    "y1": d.box.y1,
                    "x2": d.box.x2,
                    "y2": d.box.y2,
                }
                for d in self.detections
            ],
        }


def schedule_weights(frame_index: int, sched: EnsembleSchedule) -> dict[str, float]:
    """Per-role ensemble weights at one stream position.

    The source channel ramps linearly from its initial weight to exactly
    1.0 at ``ramp_frames``; every other non-night role carries weight 1.
    """
    if frame_index < 0:
        raise ValueError("frame_index must be >= 0")
    w0 = sched.initial_source_weight
    if frame_index >= sched.ramp_frames:
        source = 1.0
    else:
        source = min(1.0, w0 + (1.0 - w0) * (frame_index / sched.ramp_frames))
    return {"source": source, "multi_domain": 1.0, "auxiliary": 1.0}


def process_frame(
    img: Image,
    channel_dets: Mapping[str, Sequence[Detection]],
    frame_id: str,
    frame_index: int,
    roles: ChannelRoles,
    state: AdaptState,
    model: DiscriminatorModel,
    cfg: PipelineConfig,
) -> FrameResult:
    """Run one frame through the full decision sequence."""
    required = [roles.source, roles.multi_domain, *roles.auxiliary]
    if cfg.night_routing and roles.night is not None:
        required.append(roles.night)
    for chan in required:
        if chan not in channel_dets:
            raise PipelineError(f"channel {chan!r} has no detections for frame {frame_id!r}")

    boosted, applied = visibility_boost(img, cfg.visibility)
    label, p = predict_domain(model, extract_features(boosted))

    if cfg.night_routing and label is DomainLabel.NIGHT:
        assert roles.night is not None
        fused = fuse_ensemble(
            [(list(channel_dets[roles.night]), 1.0)],
            cfg.soft_nms,
            cfg.support_iou,
            cfg.min_support,
        )
        return FrameResult(
            frame_id=frame_id,
            route="night",
            domain=label,
            domain_p=p,
            visibility_applied=applied,
            weights={roles.night: 1.0},
            detections=fused,
            adapt_loss=None,
        )

    weights = schedule_weights(frame_index, cfg.schedule)
    frame_size = (float(img.width), float(img.height))
    state, student_out, loss = adapt_step(
        state, list(channel_dets[roles.multi_domain]), frame_size, cfg.mt
    )
    channels = [
        (list(channel_dets[roles.source]), weights["source"]),
        (student_out, weights["multi_domain"]),
    ]
    used = {roles.source: weights["source"], roles.multi_domain: weights["multi_domain"]}
    for aux in roles.auxiliary:
        channels.append((list(channel_dets[aux]), weights["auxiliary"]))
        used[aux] = weights["auxiliary"]
    fused = fuse_ensemble(channels, cfg.soft_nms, cfg.support_iou, cfg.min_support)
    return FrameResult(
        frame_id=frame_id,
        route="ensemble",
        domain=label,
        domain_p=p,
        visibility_applied=applied,
        weights=used,
        detections=fused,
        adapt_loss=loss,
    )


def run_stream(
    manifest: FrameManifest,
    cfg: PipelineConfig,
    model: DiscriminatorModel,
) -> tuple[list[FrameResult], EvalReport | None]:
    """Fold ``process_frame`` over the manifest in order.

    Adaptation is stateful, so frame order matters. When the manifest
    references ground truth, the fused outputs are evaluated against it.
    """
    roles = ChannelRoles.from_entries(manifest.channels, cfg.night_routing)
    state = AdaptState.fresh(ParamVector.identity(manifest.classes), cfg.seed)
    results: list[FrameResult] = []
    for index, frame in enumerate(manifest.frames):
        img = parse_ppm(manifest.resolve(frame.image).read_bytes())
        channel_dets = load_channel_detections(manifest, frame)
        results.append(
            process_frame(
                img, channel_dets, frame.frame_id, index, roles, state, model, cfg
            )
        )

    report = None
    if manifest.gt is not None:
        from .formats import parse_ground_truth

        gts = parse_ground_truth(manifest.resolve(manifest.gt))
        gts_by_frame = {f.frame_id: gts.get(f.frame_id, []) for f in manifest.frames}
        dets_by_frame = {r.frame_id: r.detections for r in results}
        report = evaluate(dets_by_frame, gts_by_frame, manifest.classes)
    return results, report
