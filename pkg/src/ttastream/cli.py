"""Command-line surface: synth, augment, train-discriminator, run, eval, fuse.

Every stochastic command takes ``--seed`` and all outputs are a pure
function of inputs and seed; failures exit 1 with a single ``error:`` line
on stderr, usage mistakes exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .domain import (
    DiscriminatorModel,
    DomainLabel,
    extract_features,
    predict_domain,
    train_discriminator,
)
from .evaluation import evaluate
from .formats import (
    FormatError,
    parse_detections,
    parse_ground_truth,
    parse_manifest,
    write_detections,
)
from .fusion import SoftNmsConfig, fuse_ensemble
from .imaging import (
    PpmParseError,
    VisibilityConfig,
    adjust_brightness,
    adjust_contrast,
    augment_fog,
    augment_night,
    augment_rain,
    color_temperature,
    parse_ppm,
    write_ppm,
)
from .mean_teacher import MtConfig
from .pipeline import (
    EnsembleSchedule,
    PipelineConfig,
    PipelineError,
    run_stream,
)
from .synth import SynthConfig, benchmark_channels, clean_channels, generate_synthetic_stream

_APP_ERRORS = (FormatError, PpmParseError, PipelineError, ValueError, OSError)


def _parse_timeline(text: str) -> list[tuple[str, int]]:
    segments = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            domain, count = part.split(":")
            segments.append((domain.strip(), int(count)))
        except ValueError:
            raise ValueError(f"bad timeline segment {part!r}, expected domain:count")
    if not segments:
        raise ValueError("timeline is empty")
    return segments


def _cmd_synth(args) -> int:
    channels = benchmark_channels() if args.profile == "benchmark" else clean_channels()
    cfg = SynthConfig(
        seed=args.seed,
        timeline=_parse_timeline(args.timeline),
        channels=channels,
        width=args.width,
        height=args.height,
        objects_per_frame=args.objects,
        classes=args.classes,
    )
    manifest = generate_synthetic_stream(cfg, args.out)
    print(f"wrote {len(manifest.frames)} frames to {args.out}")
    return 0


def _cmd_augment(args) -> int:
    img = parse_ppm(Path(args.input).read_bytes())
    if args.op == "night":
        out = augment_night(img, args.gamma, args.scale)
    elif args.op == "fog":
        out = augment_fog(img, args.alpha, args.fog_luma)
    elif args.op == "rain":
        out = augment_rain(img, args.streaks, args.seed)
    elif args.op == "brightness":
        out = adjust_brightness(img, args.delta)
    elif args.op == "contrast":
        out = adjust_contrast(img, args.gain, args.pivot)
    elif args.op == "temperature":
        out = color_temperature(img, args.r_gain, args.g_gain, args.b_gain)
    else:  # pragma: no cover - argparse enforces choices
        raise ValueError(f"unknown op {args.op!r}")
    Path(args.output).write_bytes(write_ppm(out))
    print(f"wrote {args.output}")
    return 0


def _load_corpus_images(corpus: Path, limit: int | None) -> tuple[list, list]:
    """Return (day images, night images); night may be empty."""
    day_dir, night_dir = corpus / "day", corpus / "night"
    if day_dir.is_dir():
        day_paths = sorted(day_dir.glob("*.ppm"))
        night_paths = sorted(night_dir.glob("*.ppm")) if night_dir.is_dir() else []
    else:
        day_paths = sorted(corpus.glob("*.ppm"))
        night_paths = []
    if limit is not None:
        day_paths = day_paths[:limit]
        night_paths = night_paths[:limit]
    if not day_paths:
        raise ValueError(f"no .ppm images found under {corpus}")
    days = [parse_ppm(p.read_bytes()) for p in day_paths]
    nights = [parse_ppm(p.read_bytes()) for p in night_paths]
    return days, nights


def _cmd_train_discriminator(args) -> int:
    corpus = Path(args.corpus)
    days, nights = _load_corpus_images(corpus, args.limit)
    rng = np.random.default_rng(args.seed)
    if not nights:
        # synthesize dusk-to-night variants of the day images
        nights = [
            augment_night(img, float(rng.uniform(1.5, 2.5)), float(rng.uniform(0.2, 0.6)))
            for img in days
        ]
    samples = [(extract_features(img), DomainLabel.DAY) for img in days]
    samples += [(extract_features(img), DomainLabel.NIGHT) for img in nights]

    order = rng.permutation(len(samples))
    n_holdout = max(1, int(len(samples) * args.holdout))
    holdout = [samples[i] for i in order[:n_holdout]]
    train = [samples[i] for i in order[n_holdout:]]
    model = train_discriminator(train, lr=args.lr, epochs=args.epochs, seed=args.seed)
    correct = sum(
        1 for feats, label in holdout if predict_domain(model, feats)[0] is label
    )
    accuracy = correct / len(holdout)
    model.save(args.out)
    print(
        f"trained on {len(train)} samples, holdout accuracy "
        f"{accuracy:.4f} ({correct}/{len(holdout)}), model -> {args.out}"
    )
    return 0


def load_run_config(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


_RUN_SECTIONS = {
    "soft_nms": SoftNmsConfig,
    "visibility": VisibilityConfig,
    "mean_teacher": MtConfig,
    "schedule": EnsembleSchedule,
}
_RUN_TOP_KEYS = {
    "manifest",
    "discriminator",
    "seed",
    "night_routing",
    "fusion",
} | set(_RUN_SECTIONS)


def build_pipeline_config(obj: dict, base: Path) -> tuple[PipelineConfig, Path, Path]:
    """Materialize a run config: returns (config, manifest path, model path)."""
    unknown = obj.keys() - _RUN_TOP_KEYS
    if unknown:
        raise ValueError(f"unknown run-config keys {sorted(unknown)}")
    if "manifest" not in obj:
        raise ValueError("run config must name a manifest")
    if "discriminator" not in obj:
        raise ValueError("run config must name a discriminator model")
    sections = {}
    for name, cls in _RUN_SECTIONS.items():
        try:
            sections[name] = cls(**obj.get(name, {}))
        except TypeError as exc:
            raise ValueError(f"bad {name} section: {exc}") from exc
    fusion = obj.get("fusion", {})
    unknown = fusion.keys() - {"support_iou", "min_support"}
    if unknown:
        raise ValueError(f"unknown fusion keys {sorted(unknown)}")
    cfg = PipelineConfig(
        soft_nms=sections["soft_nms"],
        visibility=sections["visibility"],
        mt=sections["mean_teacher"],
        schedule=sections["schedule"],
        support_iou=float(fusion.get("support_iou", 0.55)),
        min_support=int(fusion.get("min_support", 2)),
        night_routing=bool(obj.get("night_routing", True)),
        seed=int(obj.get("seed", 0)),
    )
    manifest_path = base / str(obj["manifest"])
    model_path = base / str(obj["discriminator"])
    if not model_path.is_file():
        raise ValueError(f"discriminator model not found: {model_path}")
    return cfg, manifest_path, model_path


def resolved_config_dict(cfg: PipelineConfig, manifest: Path, model: Path) -> dict:
    return {
        "manifest": str(manifest),
        "discriminator": str(model),
        "seed": cfg.seed,
        "night_routing": cfg.night_routing,
        "soft_nms": asdict(cfg.soft_nms),
        "fusion": {"support_iou": cfg.support_iou, "min_support": cfg.min_support},
        "visibility": asdict(cfg.visibility),
        "mean_teacher": asdict(cfg.mt),
        "schedule": asdict(cfg.schedule),
    }


def _cmd_run(args) -> int:
    config_path = Path(args.config)
    obj = load_run_config(config_path)
    cfg, manifest_path, model_path = build_pipeline_config(obj, config_path.parent)
    manifest = parse_manifest(manifest_path)
    model = DiscriminatorModel.load(model_path)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, report = run_stream(manifest, cfg, model)

    with open(out / "frames.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")
    (out / "config_resolved.json").write_text(
        json.dumps(resolved_config_dict(cfg, manifest_path, model_path), indent=1, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    if report is not None:
        (out / "eval.json").write_text(
            json.dumps(report.to_json_dict(), indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        print(
            f"processed {len(results)} frames, map_5095={report.map_5095:.6f} "
            f"ar_100={report.ar_100:.6f}"
        )
    else:
        print(f"processed {len(results)} frames (no ground truth, no eval)")
    return 0


def _cmd_eval(args) -> int:
    dets = parse_detections(args.dets)
    gts = parse_ground_truth(args.gt)
    classes = args.classes
    if classes is None:
        ids = [d.class_id for frame in dets.values() for d in frame]
        ids += [g.class_id for frame in gts.values() for g in frame]
        classes = max(ids) + 1 if ids else 1
    gts_by_frame = {fid: gts.get(fid, []) for fid in sorted(set(gts) | set(dets))}
    report = evaluate(dets, gts_by_frame, classes)
    print(report.to_text_table())
    print(f"map_5095={report.map_5095:.6f} ar_100={report.ar_100:.6f}")
    if args.json:
        Path(args.json).write_text(
            json.dumps(report.to_json_dict(), indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return 0


def _cmd_fuse(args) -> int:
    channel_paths = [p for p in args.channels.split(",") if p]
    weights = [float(w) for w in args.weights.split(",")] if args.weights else [1.0] * len(
        channel_paths
    )
    if len(weights) != len(channel_paths):
        raise ValueError(
            f"{len(channel_paths)} channel files but {len(weights)} weights"
        )
    per_channel = [parse_detections(p) for p in channel_paths]
    cfg = SoftNmsConfig(
        method=args.method,
        sigma=args.sigma,
        linear_iou_threshold=args.linear_iou,
        score_floor=args.floor,
    )
    frame_ids = sorted({fid for chan in per_channel for fid in chan})
    records = []
    for fid in frame_ids:
        channels = [(chan.get(fid, []), w) for chan, w in zip(per_channel, weights)]
        for det in fuse_ensemble(channels, cfg, args.support_iou, args.min_support):
            records.append((fid, det))
    if args.out:
        write_detections(args.out, records)
        print(f"wrote {len(records)} fused detections to {args.out}")
    else:
        for fid, det in records:
            sys.stdout.write(
                json.dumps(
                    {
                        "frame_id": fid,
                        "channel_id": det.channel_id,
                        "class_id": det.class_id,
                        "score": det.score,
                        "x1": det.box.x1,
                        "y1": det.box.y1,
                        "x2": det.box.x2,
                        "y2": det.box.y2,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttastream",
        description="Streaming test-time adaptation harness for detection channels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic domain-shift stream")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument(
        "--timeline",
        default="day:60,night:60,fog:30,day:50",
        help="comma-separated domain:count segments",
    )
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--objects", type=int, default=6, help="objects per frame")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--profile", choices=("benchmark", "clean"), default="benchmark")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("augment", help="apply one image transform to a PPM file")
    p.add_argument(
        "--op",
        required=True,
        choices=("night", "fog", "rain", "brightness", "contrast", "temperature"),
    )
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--scale", type=float, default=0.35)
    p.add_argument("--alpha", type=float, default=0.65)
    p.add_argument("--fog-luma", type=float, default=0.8, dest="fog_luma")
    p.add_argument("--streaks", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--gain", type=float, default=1.5)
    p.add_argument("--pivot", type=float, default=0.5)
    p.add_argument("--r-gain", type=float, default=1.0, dest="r_gain")
    p.add_argument("--g-gain", type=float, default=1.0, dest="g_gain")
    p.add_argument("--b-gain", type=float, default=1.0, dest="b_gain")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser(
        "train-discriminator",
        help="fit the day/night router on a PPM corpus (night synthesized if absent)",
    )
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--limit", type=int, default=None, help="cap images per label")
    p.set_defaults(func=_cmd_train_discriminator)

    p = sub.add_parser("run", help="process a manifest stream end to end")
    p.add_argument("--config", required=True, help="TOML or JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fuse", help="fuse detection channels with soft-nms")
    p.add_argument("--channels", required=True, help="comma-separated JSONL files")
    p.add_argument("--weights", default=None, help="comma-separated channel weights")
    p.add_argument("--out", default=None, help="output JSONL (stdout when omitted)")
    p.add_argument("--method", choices=("gaussian", "linear"), default="gaussian")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--linear-iou", type=float, default=0.3, dest="linear_iou")
    p.add_argument("--floor", type=float, default=0.001)
    p.add_argument("--support-iou", type=float, default=0.55, dest="support_iou")
    p.add_argument("--min-support", type=int, default=2, dest="min_support")
    p.set_defaults(func=_cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _APP_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
