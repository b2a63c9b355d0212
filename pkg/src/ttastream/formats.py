"""On-disk formats: detection/ground-truth JSONL and the stream manifest.

Parsers are strict — unknown fields, out-of-range values, and unordered
frames are rejected with the offending line or entry named — and every
format has a writer whose output round-trips through its parser.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .evaluation import GroundTruth
from .geometry import Box, Detection

DETECTION_FIELDS = {"frame_id", "channel_id", "class_id", "score", "x1", "y1", "x2", "y2"}
GT_REQUIRED_FIELDS = {"frame_id", "class_id", "x1", "y1", "x2", "y2"}
GT_FIELDS = GT_REQUIRED_FIELDS | {"ignore"}
CHANNEL_ROLES = ("source", "multi_domain", "auxiliary", "night")


class FormatError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line


def _check_fields(obj: dict, required: set, allowed: set, path, line: int) -> None:
    missing = required - obj.keys()
    if missing:
        raise FormatError(f"missing fields {sorted(missing)}", path, line)
    unknown = obj.keys() - allowed
    if unknown:
        raise FormatError(f"unknown fields {sorted(unknown)}", path, line)


def _iter_jsonl(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise FormatError(f"malformed JSON: {exc.msg}", path, line_no) from exc
            if not isinstance(obj, dict):
                raise FormatError("expected a JSON object", path, line_no)
            yield line_no, obj


def parse_detections(path: str | Path) -> dict[str, list[Detection]]:
    """Read detection records grouped by frame id, preserving file order."""
    path = Path(path)
    out: dict[str, list[Detection]] = {}
    for line_no, obj in _iter_jsonl(path):
        _check_fields(obj, DETECTION_FIELDS, DETECTION_FIELDS, path, line_no)
        score = obj["score"]
        if not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise FormatError(f"score {score!r} outside [0, 1]", path, line_no)
        if not isinstance(obj["class_id"], int) or obj["class_id"] < 0:
            raise FormatError(f"bad class_id {obj['class_id']!r}", path, line_no)
        det = Detection(
            box=Box(float(obj["x1"]), float(obj["y1"]), float(obj["x2"]), float(obj["y2"])),
            score=float(score),
            class_id=obj["class_id"],
            channel_id=str(obj["channel_id"]),
        )
        out.setdefault(str(obj["frame_id"]), []).append(det)
    return out


def write_detections(
    path: str | Path, records: Iterable[tuple[str, Detection]]
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for frame_id, det in records:
            fh.write(
                json.dumps(
                    {
                        "frame_id": frame_id,
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


def parse_ground_truth(path: str | Path) -> dict[str, list[GroundTruth]]:
    path = Path(path)
    out: dict[str, list[GroundTruth]] = {}
    for line_no, obj in _iter_jsonl(path):
        _check_fields(obj, GT_REQUIRED_FIELDS, GT_FIELDS, path, line_no)
        if not isinstance(obj["class_id"], int) or obj["class_id"] < 0:
            raise FormatError(f"bad class_id {obj['class_id']!r}", path, line_no)
        ignore = obj.get("ignore", False)
        if not isinstance(ignore, bool):
            raise FormatError(f"ignore must be boolean, got {ignore!r}", path, line_no)
        gt = GroundTruth(
            frame_id=str(obj["frame_id"]),
            box=Box(float(obj["x1"]), float(obj["y1"]), float(obj["x2"]), float(obj["y2"])),
            class_id=obj["class_id"],
            ignore=ignore,
        )
        out.setdefault(gt.frame_id, []).append(gt)
    return out


def write_ground_truth(path: str | Path, gts: Iterable[GroundTruth]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for gt in gts:
            rec = {
                "frame_id": gt.frame_id,
                "class_id": gt.class_id,
                "x1": gt.box.x1,
                "y1": gt.box.y1,
                "x2": gt.box.x2,
                "y2": gt.box.y2,
            }
            if gt.ignore:
                rec["ignore"] = True
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass(frozen=True)
class ChannelEntry:
    channel_id: str
    role: str

    def __post_init__(self) -> None:
        if self.role not in CHANNEL_ROLES:
            raise FormatError(f"unknown channel role {self.role!r}")


@dataclass(frozen=True)
class FrameEntry:
    frame_id: str
    image: str
    detections: Mapping[str, str]  # channel_id -> path, relative to manifest dir
    domain: str | None = None  # optional true label


@dataclass
class FrameManifest:
    classes: int
    channels: list[ChannelEntry]
    frames: list[FrameEntry]
    gt: str | None = None
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def parse_manifest(path: str | Path) -> FrameManifest:
    """Load and validate a manifest; all referenced files must exist."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON: {exc.msg}", path) from exc
    for key in ("classes", "channels", "frames"):
        if key not in obj:
            raise FormatError(f"missing top-level key {key!r}", path)
    unknown = obj.keys() - {"classes", "channels", "frames", "gt"}
    if unknown:
        raise FormatError(f"unknown top-level keys {sorted(unknown)}", path)

    channels = [ChannelEntry(str(c["channel_id"]), str(c["role"])) for c in obj["channels"]]
    channel_ids = [c.channel_id for c in channels]
    if len(set(channel_ids)) != len(channel_ids):
        raise FormatError("duplicate channel ids", path)

    root = path.parent
    frames: list[FrameEntry] = []
    prev_id: str | None = None
    for i, f in enumerate(obj["frames"]):
        unknown = f.keys() - {"frame_id", "image", "detections", "domain"}
        if unknown:
            raise FormatError(f"frame {i}: unknown keys {sorted(unknown)}", path)
        frame_id = str(f["frame_id"])
        if prev_id is not None and frame_id <= prev_id:
            raise FormatError(
                f"frame ids must be unique and ordered ({prev_id!r} then {frame_id!r})", path
            )
        prev_id = frame_id
        dets = {str(k): str(v) for k, v in f.get("detections", {}).items()}
        for chan in dets:
            if chan not in channel_ids:
                raise FormatError(f"frame {frame_id}: undeclared channel {chan!r}", path)
        entry = FrameEntry(
            frame_id=frame_id,
            image=str(f["image"]),
            detections=dets,
            domain=f.get("domain"),
        )
        if not (root / entry.image).is_file():
            raise FormatError(f"frame {frame_id}: missing image {entry.image!r}", path)
        for chan, rel in dets.items():
            if not (root / rel).is_file():
                raise FormatError(
                    f"frame {frame_id}: missing detections {rel!r} for channel {chan!r}", path
                )
        frames.append(entry)

    gt = obj.get("gt")
    if gt is not None and not (root / str(gt)).is_file():
        raise FormatError(f"missing ground-truth file {gt!r}", path)
    return FrameManifest(
        classes=int(obj["classes"]),
        channels=channels,
        frames=frames,
        gt=None if gt is None else str(gt),
        root=root,
    )


def write_manifest(path: str | Path, manifest: FrameManifest) -> None:
    obj = {
        "classes": manifest.classes,
        "channels": [
            {"channel_id": c.channel_id, "role": c.role} for c in manifest.channels
        ],
        "frames": [
            {
                "frame_id": f.frame_id,
                "image": f.image,
                "detections": dict(f.detections),
                **({"domain": f.domain} if f.domain is not None else {}),
            }
            for f in manifest.frames
        ],
    }
    if manifest.gt is not None:
        obj["gt"] = manifest.gt
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_channel_detections(
    manifest: FrameManifest, frame: FrameEntry
) -> dict[str, list[Detection]]:
    """Load every channel's detections for one frame, validating frame ids."""
    out: dict[str, list[Detection]] = {}
    for chan, rel in frame.detections.items():
        per_frame = parse_detections(manifest.resolve(rel))
        bad = [fid for fid in per_frame if fid != frame.frame_id]
        if bad:
            raise FormatError(
                f"detection file {rel!r} contains foreign frame ids {bad[:3]}",
                manifest.resolve(rel),
            )
        out[chan] = per_frame.get(frame.frame_id, [])
    return out
