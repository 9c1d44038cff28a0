"""Pixel-level evaluation pipeline: mask, count, extract, judge.

The pipeline mirrors a three-step recipe: segment each scene element by its
HSV color band, check that every element appears with the expected number of
connected components, then read off geometric features from the masks and
test the coarse and fine rules.  It runs equally on images produced by the
local generators and on arbitrary externally supplied PNG directories.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .colors import ELEMENT_BANDS, HsvRange, rgb8_to_hsv
from .scenegen import RHO_TARGET, TASKS

EXPECTED_COMPONENTS = {
    "A": {"sun": 1, "pole": 1, "shadow": 1},
    "B": {"rect1": 1, "rect2": 1},
    "C": {"circle1": 1, "circle2": 1},
    "D": {"square_small": 1, "square_large": 1},
}

# 8-connectivity structuring element for component labeling.
_STRUCT8 = np.ones((3, 3), dtype=bool)


@dataclass
class ElementMask:
    """Binary mask of one scene element plus its connected components."""

    name: str
    mask: np.ndarray                      # bool (H, W)
    n_components: int
    areas: list[int]
    centroids: list[tuple[float, float]]  # (row, col)
    bboxes: list[tuple[int, int, int, int]]  # (r0, r1, c0, c1) inclusive


@dataclass
class FeatureRecord:
    """Extracted per-image features; `valid` is false with a reason if the
    element census fails or the geometry degenerates."""

    task: str
    valid: bool
    reason: str = ""
    features: dict[str, float] = field(default_factory=dict)  # scaled to [0,1]
    mean_rgb: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    ratio: float = float("nan")
    flags: list[str] = field(default_factory=list)
    filename: str = ""
    image_size: int = 0


@dataclass
class RuleVerdict:
    coarse_ok: bool
    fine_ratio: float
    fine_ok: bool
    flags: list[str] = field(default_factory=list)


def segment(image: np.ndarray,
            ranges: dict[str, HsvRange] | None = None,
            task: str | None = None) -> dict[str, ElementMask]:
    """Assign pixels to elements by HSV band and label 8-connected blobs.

    Either `ranges` or `task` (to use the default band table) must be given.
    """
    if ranges is None:
        if task is None:
            raise ValueError("segment needs either explicit ranges or a task")
        ranges = ELEMENT_BANDS[task]
    h, s, v = rgb8_to_hsv(np.asarray(image))
    out = {}
    for name, band in ranges.items():
        mask = band.contains(h, s, v)
        labels, n = ndimage.label(mask, structure=_STRUCT8)
        areas, cents, boxes = [], [], []
        for k in range(1, n + 1):
            rows, cols = np.nonzero(labels == k)
            areas.append(int(rows.size))
            cents.append((float(rows.mean()), float(cols.mean())))
            boxes.append((int(rows.min()), int(rows.max()),
                          int(cols.min()), int(cols.max())))
        out[name] = ElementMask(name=name, mask=mask, n_components=n,
                                areas=areas, centroids=cents, bboxes=boxes)
    return out


def count_elements(masks: dict[str, ElementMask],
                   task: str) -> tuple[bool, str]:
    """Census check: (True, "") if every element has its expected count."""
    for name, expected in EXPECTED_COMPONENTS[task].items():
        got = masks[name].n_components if name in masks else 0
        if got != expected:
            return False, f"{name}: {got} components (expected {expected})"
    return True, ""


def _mean_rgb(image: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    px = np.asarray(image, dtype=np.float64)[mask] / 255.0
    return tuple(float(c) for c in px.mean(axis=0))


def _upscale(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)


def extract_features(image: np.ndarray, task: str,
                     upscale_factor: int = 1) -> FeatureRecord:
    """Measure the task's geometric features from element masks.

    All lengths are normalized by the (upscaled) image size.  Radii and
    square sides are area-based (sqrt(area/pi), sqrt(area)), which is robust
    to one-pixel boundary jitter.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if upscale_factor not in (1, 4):
        raise ValueError("upscale_factor must be 1 or 4")
    image = _upscale(np.asarray(image), upscale_factor)
    size = image.shape[0]
    masks = segment(image, task=task)
    ok, reason = count_elements(masks, task)
    rec = FeatureRecord(task=task, valid=False, reason=reason,
                        image_size=size)
    for name, m in masks.items():
        if m.n_components >= 1:
            rec.mean_rgb[name] = _mean_rgb(image, m.mask)
    if not ok:
        return rec

    try:
        if task == "A":
            _features_a(rec, masks, size)
        elif task == "B":
            _features_b(rec, masks, size)
        elif task == "C":
            _features_c(rec, masks, size)
        else:
            _features_d(rec, masks, size)
    except _Degenerate as e:
        rec.valid = False
        rec.reason = str(e)
        return rec
    rec.valid = True
    return rec


class _Degenerate(Exception):
    """Raised when a mask is present but geometrically unusable."""


def _features_a(rec, masks, size):
    sun, pole, shadow = masks["sun"], masks["pole"], masks["shadow"]
    sun_cy, sun_cx = sun.centroids[0]
    pr0, pr1, pc0, pc1 = pole.bboxes[0]
    pole_cx = (pc0 + pc1) / 2.0
    ground_y = pr1
    h2 = pr1 - pr0 + 1                       # pole height in rows
    if h2 <= 0:
        raise _Degenerate("pole: zero height")
    h1 = ground_y - sun_cy - h2              # sun center above the pole top
    if h1 <= 0:
        raise _Degenerate("sun: not above the pole top")
    l1 = abs(sun_cx - pole_cx)
    rows, cols = np.nonzero(shadow.mask)
    offsets = cols - pole_cx
    tip = offsets[np.argmax(np.abs(offsets))]
    l2 = abs(tip)
    sun_side = float(np.sign(sun_cx - pole_cx))
    shadow_side = float(np.sign(tip))
    if l2 == 0:
        rec.flags.append("shadow touches the pole base")
    rec.features = {
        "l1": l1 / size, "h1": h1 / size, "h2": h2 / size, "l2": l2 / size,
        "sun_side": sun_side, "shadow_side": shadow_side,
    }
    if l1 == 0 or h2 == 0:
        raise _Degenerate("degenerate sun/pole placement")
    rec.ratio = (l2 * h1) / (l1 * h2)


def _features_b(rec, masks, size):
    feats = {}
    for i, name in enumerate(("rect1", "rect2"), start=1):
        r0, r1, c0, c1 = masks[name].bboxes[0]
        feats[f"l{i}"] = c0 / size            # distance from the left border
        feats[f"h{i}"] = (r1 - r0 + 1) / size
    rec.features = feats
    if feats["l1"] == 0 or feats["h1"] == 0:
        raise _Degenerate("rect1: zero distance or height")
    rec.ratio = (feats["l2"] * feats["h2"]) / (feats["l1"] * feats["h1"])


def _features_c(rec, masks, size):
    r = {}
    cents = {}
    for i, name in enumerate(("circle1", "circle2"), start=1):
        area = masks[name].areas[0]
        if area == 0:
            raise _Degenerate(f"{name}: zero area")
        r[i] = float(np.sqrt(area / np.pi))
        cents[i] = masks[name].centroids[0]
    gap = float(np.hypot(cents[1][0] - cents[2][0],
                         cents[1][1] - cents[2][1])) - (r[1] + r[2])
    rec.features = {"r1": r[1] / size, "r2": r[2] / size,
                    "tangency_gap": gap / size}
    rec.ratio = r[2] / r[1]


def _features_d(rec, masks, size):
    feats = {}
    half = size / 2.0
    for key, name in (("1", "square_small"), ("2", "square_large")):
        area = masks[name].areas[0]
        if area == 0:
            raise _Degenerate(f"{name}: zero area")
        feats[f"l{key}"] = float(np.sqrt(area)) / size
    r0s, r1s, _, _ = masks["square_small"].bboxes[0]
    r0l, r1l, _, _ = masks["square_large"].bboxes[0]
    feats["small_in_top"] = float(r1s < half)
    feats["large_in_bottom"] = float(r0l >= half)
    rec.features = feats
    if feats["l1"] == 0:
        raise _Degenerate("square_small: zero side")
    rec.ratio = feats["l2"] / feats["l1"]


def verdict(record: FeatureRecord, task: str, eps: float = 0.01) -> RuleVerdict:
    """Coarse and fine rule checks on a Valid feature record."""
    if not record.valid:
        raise ValueError("verdict on invalid record")
    f = record.features
    flags = list(record.flags)
    if task == "A":
        if f["l2"] == 0:
            # Shadow collapsed onto the pole base: the side test is
            # undefined, report coarse compliance but flag it.
            coarse = True
        else:
            coarse = f["sun_side"] != f["shadow_side"]
    elif task == "B":
        coarse = f["h1"] > f["h2"]
    elif task == "C":
        floor = 0.5 / max(record.image_size, 1)  # half a pixel, normalized
        coarse = abs(f["r1"] - f["r2"]) > floor
    else:
        coarse = (f["l1"] < f["l2"]
                  and f["small_in_top"] == 1.0 and f["large_in_bottom"] == 1.0)
    rho_star = RHO_TARGET[task]
    fine = rho_star * (1 - eps) <= record.ratio <= rho_star * (1 + eps)
    return RuleVerdict(coarse_ok=bool(coarse), fine_ratio=record.ratio,
                       fine_ok=bool(fine), flags=flags)


_CSV_FEATURES = {
    "A": ["l1", "h1", "h2", "l2", "sun_side", "shadow_side"],
    "B": ["l1", "l2", "h1", "h2"],
    "C": ["r1", "r2", "tangency_gap"],
    "D": ["l1", "l2", "small_in_top", "large_in_bottom"],
}


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def evaluate_image(path: Path, task: str, size: int,
                   eps: float = 0.01) -> FeatureRecord:
    rec_name = Path(path).name
    try:
        img = load_image(path)
    except Exception as e:
        return FeatureRecord(task=task, valid=False,
                             reason=f"unreadable: {e}", filename=rec_name)
    if img.shape[0] != size or img.shape[1] != size:
        return FeatureRecord(task=task, valid=False,
                             reason=f"wrong size {img.shape[1]}x{img.shape[0]}",
                             filename=rec_name)
    rec = extract_features(img, task)
    rec.filename = rec_name
    return rec


def evaluate_directory(path: Path, task: str, size: int = 32,
                       eps: float = 0.01,
                       csv_out: Path | None = None,
                       summary_out: Path | None = None
                       ) -> tuple[list[FeatureRecord], dict]:
    """Evaluate every PNG in a directory, ordered by filename.

    Returns the record list and a summary dict; optionally streams a CSV row
    per image and writes the summary as JSON.
    """
    files = sorted(Path(path).glob("*.png"))
    records = []
    counts = {"n_images": len(files), "invalid": 0,
              "coarse_violations": 0, "fine_conforming": 0}
    feat_names = _CSV_FEATURES[task]
    writer = fh = None
    if csv_out is not None:
        fh = open(csv_out, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(["filename", "valid", "reason"] + feat_names
                        + ["ratio", "coarse_ok", "fine_ok"])
    try:
        for fp in files:
            rec = evaluate_image(fp, task, size, eps)
            records.append(rec)
            if not rec.valid:
                counts["invalid"] += 1
                row_tail = [""] * len(feat_names) + ["", "", ""]
            else:
                v = verdict(rec, task, eps)
                counts["coarse_violations"] += 0 if v.coarse_ok else 1
                counts["fine_conforming"] += 1 if v.fine_ok else 0
                row_tail = ([f"{rec.features[k]:.8g}" for k in feat_names]
                            + [f"{rec.ratio:.10g}", int(v.coarse_ok),
                               int(v.fine_ok)])
            if writer is not None:
                writer.writerow([rec.filename, int(rec.valid), rec.reason]
                                + row_tail)
    finally:
        if fh is not None:
            fh.close()
    summary = {"task": task, "eps": eps, **counts}
    if summary_out is not None:
        Path(summary_out).write_text(json.dumps(summary, indent=2, sort_keys=True),
                                     encoding="utf-8")
    return records, summary
