"""Deterministic generators for the four rule-governed synthetic tasks.

Every task draws a small number of colored elements on a white canvas and
couples two of their geometric features through an exact quantitative rule:

  A  sun / pole / shadow, collinearity of sun center, pole top and shadow
     tip: l1*h2 = l2*h1 (target ratio 1)
  B  two rectangles, distance x height constant: l1*h1 = l2*h2 (ratio 1)
  C  two tangent circles, r2 = sqrt(2) * r1
  D  two squares in opposite half-planes, l2 = 1.5 * l1

Geometry is sampled on grids that rasterize without loss (integer or
half-integer pixel coordinates; area-faithful disks for task C), so the
recorded SceneParams are exactly what a pixel-level evaluator can recover.

The perturbed and contrastive generators reuse the same samplers but push
the realized fine-rule ratio away from its target while keeping the coarse
rule intact; the realized (post-snapping) ratio is recorded per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .colors import ELEMENT_BANDS, hsv_to_rgb8, sample_color

TASKS = ("A", "B", "C", "D")
RHO_TARGET = {"A": 1.0, "B": 1.0, "C": float(np.sqrt(2.0)), "D": 1.5}
GENERATOR_VERSION = "rulelab-scenegen-1"
VALID_SIZES = (32, 64)
RETRY_BUDGET = 1000
BACKGROUND = (255, 255, 255)

# Default sample counts used for the four training sets.
DEFAULT_COUNTS = {"A": 4000, "B": 2000, "C": 2000, "D": 2000}


class ConfigError(ValueError):
    """Invalid generator configuration (task, size, counts, offsets)."""


class GeometryError(RuntimeError):
    """Rejection sampling exhausted its retry budget for one sample."""


@dataclass
class SceneParams:
    """Ground-truth description of one synthetic image."""

    task: str
    image_size: int
    index: int
    rng_seed: int
    geometry: dict[str, float]
    colors: dict[str, tuple[int, int, int]]
    ratio: float            # realized fine-rule ratio (target for clean sets)
    label: int | None = None   # contrastive class, if any
    clamped: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        d["colors"] = {k: list(v) for k, v in self.colors.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SceneParams":
        d = json.loads(line)
        d["colors"] = {k: tuple(v) for k, v in d["colors"].items()}
        return cls(**d)


@dataclass
class DatasetManifest:
    task: str
    n_samples: int
    image_size: int
    seed: int
    version: str = GENERATOR_VERSION
    rho_target: float = 0.0
    kind: str = "train"      # train | perturbed | contrastive
    bias: float = 0.0
    noise_sd: float = 0.0
    clamp_rate: float = 0.0
    warning: str = ""
    samples: list[SceneParams] = field(default_factory=list)

    def header_json(self) -> str:
        d = {k: getattr(self, k) for k in
             ("task", "n_samples", "image_size", "seed", "version",
              "rho_target", "kind", "bias", "noise_sd", "clamp_rate",
              "warning")}
        return json.dumps(d, sort_keys=True)

    def write(self, path: Path) -> None:
        lines = [self.header_json()] + [p.to_json() for p in self.samples]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        m = cls(**head)
        m.samples = [SceneParams.from_json(ln) for ln in lines[1:] if ln]
        return m


def _check_config(task: str, n: int, image_size: int) -> None:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if image_size not in VALID_SIZES:
        raise ConfigError(f"image_size must be one of {VALID_SIZES}")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # Per-index stream: generation is pure given (seed, index).
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _sround(rng, x: float) -> int:
    """Stochastic rounding: floor or ceil with probability equal to the
    fractional part, so E[_sround(x)] = x.  Deterministic rounding of
    quantized geometry to integers would systematically pull small perturbed
    ratios back onto the exact rule; unbiased rounding avoids that.
    Values within 1e-9 of an integer round deterministically.
    """
    r = round(x)
    if abs(x - r) < 1e-9:
        return int(r)
    f = np.floor(x)
    return int(f) + int(rng.random() < (x - f))


# ---------------------------------------------------------------------------
# Task A: sun, pole, shadow
# ---------------------------------------------------------------------------

def _scene_a(rng, size, rho):
    scale = size // 32
    ground = size - 1
    pole_w = 2 * scale
    pole_x = size / 2 - 0.5          # pole bar centered on a pixel boundary
    sun_r = 2 * scale
    min_sep = (sun_r + pole_w // 2 + 1)

    for _ in range(RETRY_BUDGET):
        pole_h = int(rng.integers(int(np.ceil(0.2 * size)), int(0.4 * size) + 1))
        sun_h = float(np.clip(2 * pole_h, 0.3 * size, 0.8 * size))
        h1 = sun_h - pole_h
        # Sun x from the far/near interval families, scaled with the canvas.
        lo, hi = [(0, 6), (10, 16), (16, 22), (26, 32)][rng.integers(0, 4)]
        sun_x = int(rng.integers(lo * scale, hi * scale + 1))
        sun_x = int(np.clip(sun_x, sun_r, size - 1 - sun_r))
        d = sun_x - pole_x
        if abs(d) < min_sep:
            continue
        l1 = abs(d)
        l2 = rho * l1 * pole_h / h1
        side = -np.sign(d)
        tip_f = pole_x + side * l2
        # Shadow must clear the pole base and stay inside the frame for
        # either rounding outcome, so acceptance is rounding-independent.
        if not (1 <= tip_f <= size - 2) or l2 < pole_w / 2 + 2.5:
            continue
        tip = _sround(rng, tip_f)
        l2_real = abs(tip - pole_x)
        geom = {
            "pole_height": float(pole_h), "sun_distance": float(d),
            "sun_height": sun_h, "shadow_length": float(l2_real),
            "pole_x": pole_x, "sun_x": float(sun_x),
            "sun_y": float(ground - sun_h), "ground_y": float(ground),
            "sun_radius": float(sun_r), "pole_width": float(pole_w),
            "shadow_side": float(side), "shadow_tip_x": float(tip),
        }
        ratio = l2_real * h1 / (l1 * pole_h)
        return geom, ratio
    raise GeometryError("task A: geometry rejection budget exhausted")


def _raster_a(canvas, geom, colors):
    size = canvas.shape[0]
    ground = int(geom["ground_y"])
    scale = size // 32
    # Sun disk.
    cx, cy, r = int(geom["sun_x"]), int(geom["sun_y"]), geom["sun_radius"]
    yy, xx = np.mgrid[0:size, 0:size]
    canvas[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = hsv_to_rgb8(*colors["sun"])
    # Pole bar.
    w = int(geom["pole_width"])
    c0 = int(geom["pole_x"] - w / 2 + 0.5)
    top = ground - int(geom["pole_height"]) + 1
    canvas[top:ground + 1, c0:c0 + w] = hsv_to_rgb8(*colors["pole"])
    # Shadow bar on the ground rows, from the pole edge to the tip.
    tip = int(geom["shadow_tip_x"])
    rows = slice(ground - (2 * scale - 1), ground + 1)
    if geom["shadow_side"] > 0:
        canvas[rows, c0 + w:tip + 1] = hsv_to_rgb8(*colors["shadow"])
    else:
        canvas[rows, tip:c0] = hsv_to_rgb8(*colors["shadow"])


# ---------------------------------------------------------------------------
# Task B: two rectangles, distance x height constant
# ---------------------------------------------------------------------------

def _scene_b(rng, size, rho):
    scale = size // 32
    rect_w = 3 * scale
    min_h2 = 2 * scale
    gap = int(np.ceil(0.2 * size))
    exact = abs(rho - 1.0) < 1e-12
    for _ in range(RETRY_BUDGET):
        l1 = int(rng.integers(2 * scale, int(0.3 * size) + 1))
        h1 = int(rng.integers(int(np.ceil(0.2 * size)), int(0.6 * size) + 1))
        l2_lo, l2_hi = l1 + gap, int(0.8 * size)
        if l2_lo > l2_hi:
            continue
        if exact:
            # Need integer h2 = l1*h1/l2 for a rule-exact rasterization.
            cands = [l2 for l2 in range(l2_lo, l2_hi + 1)
                     if (l1 * h1) % l2 == 0 and min_h2 <= (l1 * h1) // l2 < h1]
            if not cands:
                continue
            l2 = int(cands[rng.integers(0, len(cands))])
            h2 = (l1 * h1) // l2
        else:
            l2 = int(rng.integers(l2_lo, l2_hi + 1))
            target = rho * l1 * h1 / l2
            # Accept only when both rounding outcomes are legal, so the
            # accept/reject decision is independent of the rounding draw.
            if not (min_h2 + 1 <= target <= h1 - 2):
                continue
            h2 = _sround(rng, target)
        geom = {
            "l1": float(l1), "l2": float(l2), "h1": float(h1), "h2": float(h2),
            "rect_width": float(rect_w), "ground_y": float(size - 1),
        }
        return geom, l2 * h2 / (l1 * h1)
    raise GeometryError("task B: geometry rejection budget exhausted")


def _raster_b(canvas, geom, colors):
    ground = int(geom["ground_y"])
    w = int(geom["rect_width"])
    for name, l, h in (("rect1", geom["l1"], geom["h1"]),
                       ("rect2", geom["l2"], geom["h2"])):
        l, h = int(l), int(h)
        canvas[ground - h + 1:ground + 1, l:l + w] = hsv_to_rgb8(*colors[name])


# ---------------------------------------------------------------------------
# Task C: two tangent circles, r2 = sqrt(2) * r1
# ---------------------------------------------------------------------------

def _disk_pixels(size, cx, cy, n_target, exclude=None):
    """Area-faithful disk: the n_target pixels nearest to the center.

    Pixel count is matched to the continuous area so that the evaluator's
    sqrt(area/pi) estimate recovers the recorded radius exactly.
    """
    r = np.sqrt(n_target / np.pi)
    box = int(np.ceil(r)) + 3
    y0, y1 = max(0, int(cy) - box), min(size, int(cy) + box + 1)
    x0, x1 = max(0, int(cx) - box), min(size, int(cx) + box + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    ys, xs = yy.ravel(), xx.ravel()
    order = np.lexsort((xs, ys, d2.ravel()))
    if exclude is not None:
        free = ~exclude[ys[order], xs[order]]
        order = order[free]
    if len(order) < n_target:
        return None
    sel = order[:n_target]
    return ys[sel], xs[sel]


def _scene_c(rng, size, rho):
    lo_d, hi_d = 0.1 * size, 0.3 * size
    for _ in range(RETRY_BUDGET):
        r1 = float(rng.uniform(lo_d / 2, hi_d / 2))
        # Snap both disks to pixel counts with n2 = round(rho^2 * n1), so the
        # realized radius ratio sqrt(n2/n1) is exactly rho when rho^2 * n1 is
        # an integer (always true for the exact rule, where rho^2 = 2).
        n1 = max(1, int(round(np.pi * r1 * r1)))
        n2 = max(n1 + 1, _sround(rng, rho * rho * n1))
        r1_real = float(np.sqrt(n1 / np.pi))
        r2_real = float(np.sqrt(n2 / np.pi))
        side = ["left", "right", "top", "bottom"][rng.integers(0, 4)]
        dx, dy = {"left": (-1, 0), "right": (1, 0),
                  "top": (0, -1), "bottom": (0, 1)}[side]
        dist = r1_real + r2_real
        m1, m2 = r1_real + 1.0, r2_real + 1.0
        c1x = float(rng.uniform(m1, size - 1 - m1))
        c1y = float(rng.uniform(m1, size - 1 - m1))
        c2x, c2y = c1x + dx * dist, c1y + dy * dist
        if not (m2 <= c2x <= size - 1 - m2 and m2 <= c2y <= size - 1 - m2):
            continue
        geom = {
            "r1": r1_real, "r2": r2_real,
            "r1_nominal": r1, "r2_nominal": rho * r1,
            "n1": float(n1), "n2": float(n2),
            "c1x": c1x, "c1y": c1y, "c2x": c2x, "c2y": c2y,
            "tangency_side": {"left": 0.0, "right": 1.0,
                              "top": 2.0, "bottom": 3.0}[side],
            "center_distance": dist,
        }
        return geom, float(np.sqrt(n2 / n1))
    raise GeometryError("task C: geometry rejection budget exhausted")


def _raster_c(canvas, geom, colors):
    size = canvas.shape[0]
    drawn = np.zeros((size, size), dtype=bool)
    px1 = _disk_pixels(size, geom["c1x"], geom["c1y"], int(geom["n1"]))
    if px1 is None:
        raise GeometryError("task C: circle 1 does not fit")
    canvas[px1] = hsv_to_rgb8(*colors["circle1"])
    drawn[px1] = True
    px2 = _disk_pixels(size, geom["c2x"], geom["c2y"], int(geom["n2"]),
                       exclude=drawn)
    if px2 is None:
        raise GeometryError("task C: circle 2 does not fit")
    canvas[px2] = hsv_to_rgb8(*colors["circle2"])


# ---------------------------------------------------------------------------
# Task D: two squares in opposite half-planes
# ---------------------------------------------------------------------------

def _scene_d(rng, size, rho):
    half = size // 2
    lo = int(np.ceil(0.3 * half))
    hi = int(0.7 * half)
    exact = abs(rho - 1.5) < 1e-12
    for _ in range(RETRY_BUDGET):
        if exact:
            evens = [k for k in range(lo + lo % 2, hi + 1, 2)
                     if int(1.5 * k) <= half]
            l1 = int(evens[rng.integers(0, len(evens))])
            l2 = int(1.5 * l1)
        else:
            l1 = int(rng.integers(lo, hi + 1))
            target = rho * l1
            if not (l1 + 1 <= target <= half):
                continue
            l2 = _sround(rng, target)
        x1 = int(rng.integers(0, size - l1 + 1))
        y1 = int(rng.integers(0, half - l1 + 1))
        x2 = int(rng.integers(0, size - l2 + 1))
        y2 = int(rng.integers(half, size - l2 + 1))
        geom = {
            "l1": float(l1), "l2": float(l2),
            "x1": float(x1), "y1": float(y1),
            "x2": float(x2), "y2": float(y2),
        }
        return geom, l2 / l1
    raise GeometryError("task D: geometry rejection budget exhausted")


def _raster_d(canvas, geom, colors):
    l1, l2 = int(geom["l1"]), int(geom["l2"])
    x1, y1 = int(geom["x1"]), int(geom["y1"])
    x2, y2 = int(geom["x2"]), int(geom["y2"])
    canvas[y1:y1 + l1, x1:x1 + l1] = hsv_to_rgb8(*colors["square_small"])
    canvas[y2:y2 + l2, x2:x2 + l2] = hsv_to_rgb8(*colors["square_large"])


_SCENE = {"A": _scene_a, "B": _scene_b, "C": _scene_c, "D": _scene_d}
_RASTER = {"A": _raster_a, "B": _raster_b, "C": _raster_c, "D": _raster_d}


def render(params: SceneParams) -> np.ndarray:
    """Rasterize one scene to an RGB8 array (white background)."""
    size = params.image_size
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND
    _RASTER[params.task](canvas, params.geometry, params.colors)
    return canvas


def _make_sample(task, size, seed, index, rho, label=None, clamped=False):
    rng = _sample_rng(seed, index)
    geom, ratio = _SCENE[task](rng, size, rho)
    colors = {name: sample_color(rng, band)
              for name, band in ELEMENT_BANDS[task].items()}
    return SceneParams(task=task, image_size=size, index=index, rng_seed=seed,
                       geometry=geom, colors=colors, ratio=float(ratio),
                       label=label, clamped=clamped)


def generate_dataset(task: str, n: int, image_size: int,
                     seed: int) -> tuple[DatasetManifest, list[np.ndarray]]:
    """Exact-rule training set: every sample satisfies coarse and fine rules."""
    _check_config(task, n, image_size)
    rho = RHO_TARGET[task]
    manifest = DatasetManifest(task=task, n_samples=n, image_size=image_size,
                               seed=seed, rho_target=rho, kind="train")
    images = []
    for i in range(n):
        p = _make_sample(task, image_size, seed, i, rho)
        manifest.samples.append(p)
        images.append(render(p))
    return manifest, images


def _clamp_rho(task, rho_raw, image_size):
    """Pull a perturbed ratio back into coarse-rule-compatible territory."""
    lo, hi = {
        # A's coarse rule (opposite sides) holds by construction; bound the
        # shadow so it stays drawable inside the frame.
        "A": (0.25, 2.0),
        "B": (0.25, 2.0),          # fine bounds; h1 > h2 enforced by sampler
        "C": (1.05, 2.0),          # coarse: radii stay distinct
        "D": (1.10, 2.0),          # coarse: l2 > l1 with integer headroom
    }[task]
    rho = float(np.clip(rho_raw, lo, hi))
    return rho, rho != rho_raw


def generate_perturbed(task: str, n: int, image_size: int, seed: int,
                       bias: float, noise_sd: float
                       ) -> tuple[DatasetManifest, list[np.ndarray]]:
    """Rule-perturbed set: realized ratio ~ rho* (1 + bias + noise), coarse-safe."""
    _check_config(task, n, image_size)
    if bias == 0.0 and noise_sd == 0.0:
        manifest, images = generate_dataset(task, n, image_size, seed)
        manifest.kind = "perturbed"
        return manifest, images
    rho_star = RHO_TARGET[task]
    manifest = DatasetManifest(task=task, n_samples=n, image_size=image_size,
                               seed=seed, rho_target=rho_star, kind="perturbed",
                               bias=bias, noise_sd=noise_sd)
    noise_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(seed, spawn_key=(0xFEED,))))
    images, n_clamped = [], 0
    for i in range(n):
        eta = float(noise_rng.normal(0.0, noise_sd)) if noise_sd > 0 else 0.0
        rho_raw = rho_star * (1.0 + bias + eta)
        rho, clamped = _clamp_rho(task, rho_raw, image_size)
        n_clamped += clamped
        p = _make_sample(task, image_size, seed, i, rho, clamped=clamped)
        manifest.samples.append(p)
        images.append(render(p))
    manifest.clamp_rate = n_clamped / n
    if manifest.clamp_rate > 0.20:
        manifest.warning = (f"clamp rate {manifest.clamp_rate:.1%} exceeds 20%:"
                            " perturbation largely outside the coarse-safe band")
    return manifest, images


def generate_contrastive(task: str, n_per_class: int, image_size: int,
                         seed: int, offsets: tuple[float, float] = (0.8, 1.25)
                         ) -> list[tuple[DatasetManifest, list[np.ndarray]]]:
    """Three-class contrastive sets: class 1 on-rule, classes 0/2 off-rule.

    Returns [(manifest, images)] for classes 0, 1, 2 in order.
    """
    _check_config(task, n_per_class, image_size)
    low, high = offsets
    if not (low < 1.0 < high):
        raise ConfigError(f"offsets must bracket 1, got {offsets}")
    rho_star = RHO_TARGET[task]
    out = []
    for label, off in ((0, low), (1, 1.0), (2, high)):
        rho = rho_star * off
        if label != 1:
            rho_c, clamped = _clamp_rho(task, rho, image_size)
            if clamped:
                raise ConfigError(
                    f"offset {off} violates the coarse-safe band for task {task}")
        manifest = DatasetManifest(task=task, n_samples=n_per_class,
                                   image_size=image_size, seed=seed + label,
                                   rho_target=rho_star, kind="contrastive")
        images = []
        for i in range(n_per_class):
            p = _make_sample(task, image_size, seed + label, i, rho, label=label)
            manifest.samples.append(p)
            images.append(render(p))
        out.append((manifest, images))
    return out


def write_dataset(out_dir: Path, manifest: DatasetManifest,
                  images: list[np.ndarray]) -> None:
    """Write PNGs named {task}_{index:06}.png plus a JSON-lines manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p, img in zip(manifest.samples, images):
        Image.fromarray(img, mode="RGB").save(
            out_dir / f"{p.task}_{p.index:06}.png")
    manifest.write(out_dir / "manifest.jsonl")
