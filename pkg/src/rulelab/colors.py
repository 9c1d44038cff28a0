"""HSV color bands and conversions shared by the generators and the evaluator.

Convention: OpenCV-style HSV with H in [0, 180), S and V in [0, 255].
The conversion to/from RGB8 is the standard hexcone model (colorsys),
rescaled to these ranges.  Background is white (255, 255, 255), which lies
outside every element band below: the dark band caps V at 150 and the two
chromatic bands require S >= 100.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HsvRange:
    """Inclusive HSV box, OpenCV scale (H 0-180, S/V 0-255)."""

    h_lo: int
    h_hi: int
    s_lo: int
    s_hi: int
    v_lo: int
    v_hi: int

    def __post_init__(self):
        if not (0 <= self.h_lo <= self.h_hi <= 180):
            raise ValueError(f"bad hue range [{self.h_lo}, {self.h_hi}]")
        for lo, hi in ((self.s_lo, self.s_hi), (self.v_lo, self.v_hi)):
            if not (0 <= lo <= hi <= 255):
                raise ValueError(f"bad S/V range [{lo}, {hi}]")

    def contains(self, h, s, v):
        return (
            (self.h_lo <= h) & (h <= self.h_hi)
            & (self.s_lo <= s) & (s <= self.s_hi)
            & (self.v_lo <= v) & (v <= self.v_hi)
        )

    def overlaps(self, other: "HsvRange") -> bool:
        def hit(a_lo, a_hi, b_lo, b_hi):
            return a_lo <= b_hi and b_lo <= a_hi

        return (
            hit(self.h_lo, self.h_hi, other.h_lo, other.h_hi)
            and hit(self.s_lo, self.s_hi, other.s_lo, other.s_hi)
            and hit(self.v_lo, self.v_hi, other.v_lo, other.v_hi)
        )


# Element bands: yellowish, blue-green and dark tones.
YELLOW = HsvRange(0, 30, 100, 255, 200, 255)
BLUEGREEN = HsvRange(90, 150, 100, 255, 100, 255)
DARK = HsvRange(0, 180, 0, 50, 50, 150)

# Which band each scene element is drawn from, per task.  Order matters:
# it fixes the element order in feature records and CSV columns.
ELEMENT_BANDS: dict[str, dict[str, HsvRange]] = {
    "A": {"sun": YELLOW, "pole": BLUEGREEN, "shadow": DARK},
    "B": {"rect1": YELLOW, "rect2": BLUEGREEN},
    "C": {"circle1": BLUEGREEN, "circle2": YELLOW},
    "D": {"square_small": YELLOW, "square_large": BLUEGREEN},
}


def hsv_to_rgb8(h: float, s: float, v: float) -> tuple[int, int, int]:
    """OpenCV-scale HSV -> 8-bit RGB."""
    r, g, b = colorsys.hsv_to_rgb((h % 180) / 180.0, s / 255.0, v / 255.0)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def rgb8_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized 8-bit RGB -> OpenCV-scale HSV for an (..., 3) array."""
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    # Hue in [0, 1); 0 where the color is achromatic.
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h * 180.0, s * 255.0, v * 255.0


def sample_color(rng: np.random.Generator, band: HsvRange,
                 margin: int = 4, max_tries: int = 100) -> tuple[int, int, int]:
    """Sample an integer HSV triple whose RGB8 round trip stays inside `band`.

    Sampling is restricted `margin` units inside the box (where the box is
    wide enough) so that 8-bit quantization cannot push the measured HSV out.
    """
    def shrink(lo, hi, cap):
        m = min(margin, (hi - lo) // 3)
        return max(lo + m, 0), min(hi - m, cap)

    h_lo, h_hi = shrink(band.h_lo, band.h_hi, 180)
    s_lo, s_hi = shrink(band.s_lo, band.s_hi, 255)
    v_lo, v_hi = shrink(band.v_lo, band.v_hi, 255)
    for _ in range(max_tries):
        h = int(rng.integers(h_lo, h_hi + 1))
        s = int(rng.integers(s_lo, s_hi + 1))
        v = int(rng.integers(v_lo, v_hi + 1))
        rgb = np.array(hsv_to_rgb8(h, s, v), dtype=np.uint8)
        hh, ss, vv = rgb8_to_hsv(rgb)
        if bool(band.contains(float(hh), float(ss), float(vv))):
            return (h, s, v)
    raise RuntimeError(f"could not sample a round-trip-stable color in {band}")
