"""Seeded synthetic domain-shift streams for end-to-end verification.

Scenes are deliberately abstract — a sky/ground gradient plus rectangles as
objects — because the pipeline consumes only image statistics and boxes.
Per-channel detections are produced by perturbing the ground truth with a
domain-conditioned error model, so channel quality under each domain is
controlled by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import GroundTruth
from .formats import (
    ChannelEntry,
    FrameEntry,
    FrameManifest,
    write_detections,
    write_ground_truth,
    write_manifest,
)
from .geometry import Box, Detection, clip_box
from .imaging import Image, augment_fog, augment_night, write_ppm

DOMAINS = ("day", "night", "fog")

NIGHT_GAMMA = 2.0
NIGHT_SCALE = 0.35
FOG_ALPHA = 0.65
FOG_LUMA = 0.8


@dataclass(frozen=True)
class ErrorModel:
    """Detector quality under one domain."""

    miss_rate: float
    loc_noise: float  # std of corner jitter, pixels
    score_noise: float
    fp_rate: float  # expected false positives per ground-truth object

    def __post_init__(self) -> None:
        for name in ("miss_rate", "fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.loc_noise < 0 or self.score_noise < 0:
            raise ValueError("noise levels must be >= 0")


@dataclass(frozen=True)
class ChannelProfile:
    channel_id: str
    role: str
    per_domain: dict[str, ErrorModel]

    def model_for(self, domain: str) -> ErrorModel:
        return self.per_domain[domain]


@dataclass
class SynthConfig:
    seed: int
    timeline: list[tuple[str, int]]  # (domain, frame count) segments
    channels: list[ChannelProfile]
    width: int = 96
    height: int = 64
    objects_per_frame: int = 6
    classes: int = 2
    frame_count: int | None = None  # validated against the timeline when set

    def __post_init__(self) -> None:
        for domain, count in self.timeline:
            if domain not in DOMAINS:
                raise ValueError(f"unknown domain {domain!r}")
            if count < 0:
                raise ValueError("segment length must be >= 0")
        total = sum(count for _, count in self.timeline)
        if self.frame_count is None:
            self.frame_count = total
        elif self.frame_count != total:
            raise ValueError(
                f"timeline covers {total} frames but frame_count is {self.frame_count}"
            )

    def domain_at(self, index: int) -> str:
        offset = 0
        for domain, count in self.timeline:
            offset += count
            if index < offset:
                return domain
        raise IndexError(f"frame index {index} beyond timeline")


def _day_channel_models() -> dict[str, ErrorModel]:
    return {
        "day": ErrorModel(miss_rate=0.05, loc_noise=1.0, score_noise=0.08, fp_rate=0.10),
        "fog": ErrorModel(miss_rate=0.15, loc_noise=1.5, score_noise=0.10, fp_rate=0.15),
        "night": ErrorModel(miss_rate=0.60, loc_noise=3.0, score_noise=0.25, fp_rate=0.20),
    }


def benchmark_channels() -> list[ChannelProfile]:
    """Three day-strong ensemble channels plus a night specialist."""
    return [
        ChannelProfile("source", "source", _day_channel_models()),
        ChannelProfile("multi_domain", "multi_domain", _day_channel_models()),
        ChannelProfile("auxiliary", "auxiliary", _day_channel_models()),
        ChannelProfile(
            "night",
            "night",
            {
                "day": ErrorModel(miss_rate=0.70, loc_noise=3.0, score_noise=0.30, fp_rate=0.25),
                "fog": ErrorModel(miss_rate=0.65, loc_noise=3.0, score_noise=0.30, fp_rate=0.25),
                "night": ErrorModel(miss_rate=0.05, loc_noise=1.0, score_noise=0.08, fp_rate=0.10),
            },
        ),
    ]


def clean_channels(channel_ids: tuple[str, ...] = ("source",)) -> list[ChannelProfile]:
    """Noise-free channels: detections reproduce the ground truth exactly."""
    perfect = {d: ErrorModel(0.0, 0.0, 0.0, 0.0) for d in DOMAINS}
    roles = {"source": "source", "multi_domain": "multi_domain", "night": "night"}
    return [
        ChannelProfile(cid, roles.get(cid, "auxiliary"), dict(perfect))
        for cid in channel_ids
    ]


def day_scene(
    rng: np.random.Generator,
    width: int,
    height: int,
    objects: int,
    classes: int,
) -> tuple[Image, list[tuple[int, Box]]]:
    """Render one clear daytime scene; returns the image and (class, box) objects."""
    horizon = int(height * 0.45)
    sky_top = rng.uniform(0.62, 0.80)
    sky_bottom = sky_top - rng.uniform(0.05, 0.12)
    ground = rng.uniform(0.34, 0.48)
    px = np.empty((height, width, 3), dtype=np.float64)
    rows = np.linspace(sky_top, sky_bottom, max(horizon, 1))
    for y in range(horizon):
        px[y, :, :] = rows[y]
    px[horizon:, :, :] = ground
    # mild warm cast so the warm-bias feature is informative
    cast = rng.uniform(0.0, 0.06)
    px[:, :, 0] = np.clip(px[:, :, 0] + cast, 0.0, 1.0)
    px[:, :, 2] = np.clip(px[:, :, 2] - cast / 2.0, 0.0, 1.0)

    gts: list[tuple[int, Box]] = []
    for _ in range(objects):
        class_id = int(rng.integers(0, classes))
        w = rng.uniform(0.08, 0.20) * width
        h = rng.uniform(0.10, 0.22) * height
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(height * 0.30, height - h)
        box = Box(x1, y1, x1 + w, y1 + h)
        if class_id == 0:
            color = rng.uniform(0.05, 0.30, size=3)
        else:
            color = rng.uniform(0.55, 0.90, size=3)
        xi1, yi1 = int(round(x1)), int(round(y1))
        xi2, yi2 = int(round(x1 + w)), int(round(y1 + h))
        px[yi1:yi2, xi1:xi2, :] = color
        gts.append((class_id, box))
    return Image(np.clip(px, 0.0, 1.0)), gts


def apply_domain(img: Image, domain: str) -> Image:
    if domain == "day":
        return img
    if domain == "night":
        return augment_night(img, NIGHT_GAMMA, NIGHT_SCALE)
    if domain == "fog":
        return augment_fog(img, FOG_ALPHA, FOG_LUMA)
    raise ValueError(f"unknown domain {domain!r}")


def perturb_ground_truth(
    objects: list[tuple[int, Box]],
    model: ErrorModel,
    rng: np.random.Generator,
    width: int,
    height: int,
    channel_id: str,
    classes: int,
) -> list[Detection]:
    """Simulate one channel's detections on a frame from its error model."""
    dets: list[Detection] = []
    for class_id, box in objects:
        if rng.random() < model.miss_rate:
            continue
        jitter = rng.normal(0.0, model.loc_noise, size=4) if model.loc_noise > 0 else np.zeros(4)
        noisy = Box(
            box.x1 + jitter[0], box.y1 + jitter[1], box.x2 + jitter[2], box.y2 + jitter[3]
        ).normalize()
        noisy = clip_box(noisy, width, height)
        score = 1.0 - abs(rng.normal(0.0, model.score_noise)) if model.score_noise > 0 else 1.0
        score = min(max(score, 0.01), 1.0)
        dets.append(Detection(box=noisy, score=score, class_id=class_id, channel_id=channel_id))
    n_fp = int(rng.binomial(len(objects), model.fp_rate)) if objects else 0
    for _ in range(n_fp):
        w = rng.uniform(0.05, 0.15) * width
        h = rng.uniform(0.05, 0.15) * height
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(0.0, height - h)
        dets.append(
            Detection(
                box=Box(x1, y1, x1 + w, y1 + h),
                score=float(rng.beta(2.0, 5.0)),
                class_id=int(rng.integers(0, classes)),
                channel_id=channel_id,
            )
        )
    return dets


@dataclass
class SynthStream:
    """In-memory synthetic stream (written to disk by ``generate_synthetic_stream``)."""

    config: SynthConfig
    frame_ids: list[str] = field(default_factory=list)
    images: list[Image] = field(default_factory=list)
    domains: list[str] = field(default_factory=list)
    gts: dict[str, list[GroundTruth]] = field(default_factory=dict)
    detections: dict[str, dict[str, list[Detection]]] = field(default_factory=dict)


def build_stream(cfg: SynthConfig) -> SynthStream:
    rng = np.random.default_rng(cfg.seed)
    stream = SynthStream(config=cfg)
    for chan in cfg.channels:
        stream.detections[chan.channel_id] = {}
    for index in range(cfg.frame_count or 0):
        frame_id = f"{index:06d}"
        domain = cfg.domain_at(index)
        base, objects = day_scene(rng, cfg.width, cfg.height, cfg.objects_per_frame, cfg.classes)
        img = apply_domain(base, domain)
        stream.frame_ids.append(frame_id)
        stream.images.append(img)
        stream.domains.append(domain)
        stream.gts[frame_id] = [
            GroundTruth(frame_id=frame_id, box=box, class_id=class_id)
            for class_id, box in objects
        ]
        for chan in cfg.channels:
            stream.detections[chan.channel_id][frame_id] = perturb_ground_truth(
                objects,
                chan.model_for(domain),
                rng,
                cfg.width,
                cfg.height,
                chan.channel_id,
                cfg.classes,
            )
    return stream


def generate_synthetic_stream(cfg: SynthConfig, out_dir: str | Path) -> FrameManifest:
    """Write a full corpus (frames, per-channel detections, GT, manifest)."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for chan in cfg.channels:
        (out / "dets" / chan.channel_id).mkdir(parents=True, exist_ok=True)

    stream = build_stream(cfg)
    frames: list[FrameEntry] = []
    all_gts: list[GroundTruth] = []
    for i, frame_id in enumerate(stream.frame_ids):
        image_rel = f"frames/{frame_id}.ppm"
        (out / image_rel).write_bytes(write_ppm(stream.images[i]))
        det_refs: dict[str, str] = {}
        for chan in cfg.channels:
            rel = f"dets/{chan.channel_id}/{frame_id}.jsonl"
            write_detections(
                out / rel,
                ((frame_id, d) for d in stream.detections[chan.channel_id][frame_id]),
            )
            det_refs[chan.channel_id] = rel
        all_gts.extend(stream.gts[frame_id])
        frames.append(
            FrameEntry(
                frame_id=frame_id,
                image=image_rel,
                detections=det_refs,
                domain=stream.domains[i],
            )
        )
    write_ground_truth(out / "gt.jsonl", all_gts)

    manifest = FrameManifest(
        classes=cfg.classes,
        channels=[ChannelEntry(c.channel_id, c.role) for c in cfg.channels],
        frames=frames,
        gt="gt.jsonl",
        root=out,
    )
    write_manifest(out / "manifest.json", manifest)
    return manifest
