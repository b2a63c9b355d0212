"""Image values, PPM I/O, pixel statistics, and the frame transforms.

Images are immutable float64 rasters with RGB channels in [0, 1]; every
transform returns a new image of the same dimensions. Luminance uses BT.601
weights, and statistics are population statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BT601 = (0.299, 0.587, 0.114)


class PpmParseError(ValueError):
    """Malformed PPM input; ``offset`` is the byte position, ``kind`` the defect."""

    def __init__(self, message: str, offset: int, kind: str):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset
        self.kind = kind


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # (height, width, 3) float64 in [0, 1]

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected (h, w, 3) pixel array, got {arr.shape}")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("pixel channels must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @staticmethod
    def full(width: int, height: int, rgb: tuple[float, float, float]) -> "Image":
        return Image(np.full((height, width, 3), rgb, dtype=np.float64))

    def luminance(self) -> np.ndarray:
        px = self.pixels
        return BT601[0] * px[:, :, 0] + BT601[1] * px[:, :, 1] + BT601[2] * px[:, :, 2]


@dataclass(frozen=True)
class LuminanceStats:
    mean: float
    std: float


@dataclass(frozen=True)
class VisibilityConfig:
    mean_threshold: float = 0.55
    std_threshold: float = 0.12
    target_std: float = 0.20
    max_gain: float = 3.0
    brightness_clip: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.std_threshold < self.target_std:
            raise ValueError("need 0 < std_threshold < target_std")
        if self.max_gain < 1.0:
            raise ValueError("max_gain must be >= 1")


def luminance_stats(img: Image) -> LuminanceStats:
    y = img.luminance()
    return LuminanceStats(mean=float(np.mean(y)), std=float(np.std(y)))


def _clamped(arr: np.ndarray) -> Image:
    return Image(np.clip(arr, 0.0, 1.0))


def adjust_brightness(img: Image, delta: float) -> Image:
    return _clamped(img.pixels + delta)


def adjust_contrast(img: Image, gain: float, pivot: float = 0.5) -> Image:
    if gain < 0:
        raise ValueError("contrast gain must be >= 0")
    return _clamped((img.pixels - pivot) * gain + pivot)


def color_temperature(img: Image, r_gain: float, g_gain: float, b_gain: float) -> Image:
    gains = np.array([r_gain, g_gain, b_gain], dtype=np.float64)
    if (gains < 0).any():
        raise ValueError("channel gains must be >= 0")
    return _clamped(img.pixels * gains)


def augment_night(img: Image, gamma: float, scale: float) -> Image:
    """Darken: per channel v -> scale * v**gamma."""
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    if not 0.0 < scale <= 1.0:
        raise ValueError("scale must be in (0, 1]")
    return _clamped(scale * np.power(img.pixels, gamma))


def augment_fog(img: Image, alpha: float, fog_luma: float = 0.8) -> Image:
    """Blend toward a flat fog tone: v -> (1 - alpha) * v + alpha * fog_luma."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return _clamped((1.0 - alpha) * img.pixels + alpha * fog_luma)


def augment_rain(img: Image, streak_count: int, rng_seed: int) -> Image:
    """Draw anti-aliased bright streaks; pixels already at or above the
    streak luma (0.85) are left untouched, so mean luminance never drops."""
    if streak_count < 0:
        raise ValueError("streak_count must be >= 0")
    if streak_count == 0:
        return img
    rng = np.random.default_rng(rng_seed)
    px = img.pixels.copy()
    h, w = px.shape[0], px.shape[1]
    for _ in range(streak_count):
        x0 = rng.uniform(0.0, w - 1.0)
        y0 = rng.uniform(0.0, h * 0.8)
        angle = rng.uniform(math.radians(75.0), math.radians(105.0))
        length = rng.uniform(0.15, 0.35) * h
        x1 = x0 + math.cos(angle) * length
        y1 = y0 + math.sin(angle) * length
        _draw_streak(px, x0, y0, x1, y1, luma=0.85)
    return Image(px)


def _blend_up(px: np.ndarray, x: int, y: int, cov: float, luma: float) -> None:
    h, w = px.shape[0], px.shape[1]
    if not (0 <= x < w and 0 <= y < h) or cov <= 0.0:
        return
    for c in range(3):
        v = px[y, x, c]
        if v < luma:
            px[y, x, c] = v + cov * (luma - v)


def _draw_streak(px, x0: float, y0: float, x1: float, y1: float, luma: float) -> None:
    """Xiaolin Wu style anti-aliased 1-px line from (x0, y0) to (x1, y1)."""
    steep = abs(y1 - y0) > abs(x1 - x0)
    if steep:
        x0, y0, x1, y1 = y0, x0, y1, x1
    if x0 > x1:
        x0, x1 = x1, x0
        y0, y1 = y1, y0
    dx = x1 - x0
    grad = (y1 - y0) / dx if dx > 0 else 0.0
    y = y0
    for xi in range(int(math.floor(x0)), int(math.floor(x1)) + 1):
        yf = y0 + grad * (xi - x0)
        base = int(math.floor(yf))
        frac = yf - base
        if steep:
            _blend_up(px, base, xi, 1.0 - frac, luma)
            _blend_up(px, base + 1, xi, frac, luma)
        else:
            _blend_up(px, xi, base, 1.0 - frac, luma)
            _blend_up(px, xi, base + 1, frac, luma)
        y += grad


def visibility_boost(img: Image, cfg: VisibilityConfig) -> tuple[Image, bool]:
    """Contrast-and-brightness rescue for bright, washed-out frames.

    Applies only when luminance mean exceeds ``mean_threshold`` while std
    is below ``std_threshold``: contrast is raised about the frame mean to
    push std toward ``target_std`` (gain capped at ``max_gain``), then
    brightness is re-centered toward 0.5 within ``brightness_clip``.
    """
    stats = luminance_stats(img)
    if not (stats.mean > cfg.mean_threshold and stats.std < cfg.std_threshold):
        return img, False
    gain = min(cfg.max_gain, cfg.target_std / max(stats.std, 1e-6))
    out = adjust_contrast(img, gain, pivot=stats.mean)
    delta = min(max(0.5 - stats.mean, -cfg.brightness_clip), cfg.brightness_clip)
    out = adjust_brightness(out, delta)
    return out, True


def parse_ppm(data: bytes) -> Image:
    """Parse a binary PPM (magic P6, maxval 255) into an image.

    Header tokens may be separated by any whitespace and ``#`` comments;
    errors carry the byte offset and a ``kind`` of ``magic``, ``header``,
    ``maxval``, or ``truncated``.
    """
    pos = 0

    def skip_space(p: int) -> int:
        while p < len(data):
            ch = data[p : p + 1]
            if ch.isspace():
                p += 1
            elif ch == b"#":
                while p < len(data) and data[p : p + 1] not in (b"\n", b"\r"):
                    p += 1
            else:
                break
        return p

    def read_token(p: int, what: str) -> tuple[bytes, int]:
        p = skip_space(p)
        start = p
        while p < len(data) and not data[p : p + 1].isspace():
            p += 1
        if start == p:
            raise PpmParseError(f"missing {what}", start, "header")
        return data[start:p], p

    magic, pos = read_token(pos, "magic number")
    if magic != b"P6":
        raise PpmParseError(f"unsupported magic {magic!r}, expected P6", 0, "magic")

    dims = []
    for what in ("width", "height", "maxval"):
        tok, pos = read_token(pos, what)
        try:
            val = int(tok)
        except ValueError:
            raise PpmParseError(f"non-numeric {what} {tok!r}", pos - len(tok), "header")
        dims.append(val)
    width, height, maxval = dims
    if width < 1 or height < 1:
        raise PpmParseError(f"bad dimensions {width}x{height}", pos, "header")
    if maxval != 255:
        raise PpmParseError(f"unsupported maxval {maxval}", pos, "maxval")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmParseError("expected whitespace after maxval", pos, "header")
    pos += 1

    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) < expected:
        raise PpmParseError(
            f"truncated raster: expected {expected} bytes, got {len(raster)}",
            pos + len(raster),
            "truncated",
        )
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return Image(arr.reshape(height, width, 3))


def write_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    quantized = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    return header + quantized.tobytes()
