"""Axis-aligned box arithmetic shared by fusion and evaluation.

Coordinates are continuous reals in corner form (x1, y1, x2, y2); there is
no +1 pixel convention, and a zero-area union defines iou = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in corner form."""

    x1: float
    y1: float
    x2: float
    y2: float

    def normalize(self) -> "Box":
        """Return a copy with x1 <= x2 and y1 <= y2."""
        x1, x2 = (self.x1, self.x2) if self.x1 <= self.x2 else (self.x2, self.x1)
        y1, y2 = (self.y1, self.y2) if self.y1 <= self.y2 else (self.y2, self.y1)
        return Box(x1, y1, x2, y2)

    def center_form(self) -> tuple[float, float, float, float]:
        """Return (cx, cy, w, h)."""
        return (
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        )

    @staticmethod
    def from_center_form(cx: float, cy: float, w: float, h: float) -> "Box":
        return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


@dataclass(frozen=True)
class Detection:
    """One scored, class-labeled box attributed to the detector channel that produced it."""

    box: Box
    score: float
    class_id: int
    channel_id: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class_id {self.class_id}")

    def with_score(self, score: float) -> "Detection":
        return replace(self, score=score)


def area(box: Box) -> float:
    """Area of a normalized box; degenerate boxes have area 0."""
    return (box.x2 - box.x1) * (box.y2 - box.y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two normalized boxes; 0 when the union is empty."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def clip_box(box: Box, width: float, height: float) -> Box:
    """Clamp box coordinates to [0, width] x [0, height]."""
    if width <= 0 or height <= 0:
        raise ValueError("frame dimensions must be positive")
    clamp = lambda v, hi: min(max(v, 0.0), hi)  # noqa: E731
    return Box(
        clamp(box.x1, width),
        clamp(box.y1, height),
        clamp(box.x2, width),
        clamp(box.y2, height),
    )
