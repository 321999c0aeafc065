"""Procedural fluorescent-bacteria scenes with exact count labels.

Each bacterium is an anisotropic Gaussian blob added to a float accumulation
buffer; the buffer is scaled to 8 bits over a dark background plate. Every
image is a pure function of its seed, so datasets can be generated in any
order or in parallel.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import DatasetManifest, Record, read_image, resize_bilinear, write_png

MAX_COUNT = 1855
CELL_JITTER = 0.49
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class SceneConfigError(ValueError):
    pass


class BackgroundError(OSError):
    pass


class GenerationError(RuntimeError):
    def __init__(self, message, written=()):
        super().__init__(message)
        self.written = list(written)


@dataclass(frozen=True)
class ParameterRanges:
    """Closed ranges [min, max] the bacterium parameters are drawn from."""

    sigma: tuple = (1.5, 6.0)
    rotation: tuple = (0.0, math.pi)
    peak_dominant: tuple = (0.5, 1.0)
    peak_other: tuple = (0.0, 0.3)
    dominant_channel: int = 1

    def validate(self) -> None:
        for name in ("sigma", "rotation", "peak_dominant", "peak_other"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise SceneConfigError(f"range {name} has min {lo} > max {hi}")
        if self.sigma[0] <= 0:
            raise SceneConfigError("sigma range must be positive")
        if self.rotation[0] < 0 or self.rotation[1] > math.pi:
            raise SceneConfigError("rotation range must lie in [0, pi]")
        for name in ("peak_dominant", "peak_other"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi > 1:
                raise SceneConfigError(f"{name} range must lie in [0, 1]")
        if self.dominant_channel not in (0, 1, 2):
            raise SceneConfigError("dominant_channel must be 0, 1 or 2")


@dataclass(frozen=True)
class SceneConfig:
    width: int = 3280
    height: int = 2464
    target_count: int = 0
    background: str = "synthetic"   # or a directory of background plates
    ranges: ParameterRanges = field(default_factory=ParameterRanges)
    seed: int = 0

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise SceneConfigError("image size must be positive")
        if self.target_count < 0:
            raise SceneConfigError("target_count must be >= 0")
        if self.target_count > self.width * self.height:
            raise SceneConfigError(f"target_count {self.target_count} exceeds the "
                                   f"{self.width * self.height} pixel cells available")
        self.ranges.validate()

    def replace(self, **changes) -> "SceneConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ranges"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["ranges"].items()}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SceneConfigError(f"unknown scene keys: {sorted(unknown)}")
        ranges = data.pop("ranges", {})
        rknown = {f.name for f in dataclasses.fields(ParameterRanges)}
        if set(ranges) - rknown:
            raise SceneConfigError(f"unknown range keys: {sorted(set(ranges) - rknown)}")
        ranges = {k: tuple(v) if isinstance(v, list) else v for k, v in ranges.items()}
        return cls(ranges=ParameterRanges(**ranges), **data)


@dataclass(frozen=True)
class BacteriumSpec:
    center: tuple           # (x, y); x is the column, pixel centres at integers
    sigma_major: float
    sigma_minor: float
    rotation: float         # radians in [0, pi)
    peak_intensity: tuple   # per RGB channel in [0, 1]


@dataclass
class AnnotatedImage:
    pixels: np.ndarray          # (H, W, 3) uint8
    centroids: np.ndarray       # (count, 2) float64, (x, y)
    background: np.ndarray      # (H, W, 3) uint8, the quantised plate alone

    @property
    def count(self) -> int:
        return len(self.centroids)


# -- sampling ------------------------------------------------------------------

def _draw(rng, ranges: ParameterRanges, n: int):
    sig = rng.uniform(*ranges.sigma, size=(n, 2))
    theta = rng.uniform(*ranges.rotation, size=n)
    dominant = rng.uniform(*ranges.peak_dominant, size=n)
    other = rng.uniform(*ranges.peak_other, size=(n, 2))
    peaks = np.insert(other, ranges.dominant_channel, dominant, axis=1)
    if ranges.rotation[1] >= math.pi:
        theta = np.where(theta >= math.pi, 0.0, theta)
    return sig.max(axis=1), sig.min(axis=1), theta, peaks


def sample_bacterium(rng: np.random.Generator, scene: SceneConfig, center=None) -> BacteriumSpec:
    """Draw one bacterium; the centre is uniform over the image unless given."""
    scene.ranges.validate()
    if center is None:
        center = (rng.uniform(-0.5, scene.width - 0.5), rng.uniform(-0.5, scene.height - 0.5))
    major, minor, theta, peaks = _draw(rng, scene.ranges, 1)
    return BacteriumSpec((float(center[0]), float(center[1])), float(major[0]), float(minor[0]),
                         float(theta[0]), tuple(float(p) for p in peaks[0]))


# -- rendering -----------------------------------------------------------------

def _splat(shape, centers, major, minor, theta, peaks):
    """Flat pixel indices and Gaussian weights of many blobs, each evaluated
    on its own box of half-width 4 * sigma_major (zero weight outside it or
    outside the image), plus the owning blob of every entry."""
    h, w = shape
    reach = 4.0 * major
    radius = np.ceil(reach).astype(np.int64)
    # quadratic form a dx^2 + b dx dy + c dy^2 of the rotated ellipse
    cos, sin = np.cos(theta), np.sin(theta)
    i1, i2 = 1.0 / major ** 2, 1.0 / minor ** 2
    qa = cos * cos * i1 + sin * sin * i2
    qb = 2.0 * cos * sin * (i1 - i2)
    qc = sin * sin * i1 + cos * cos * i2
    idx_parts, w_parts, owner_parts = [], [], []
    for r in np.unique(radius):
        sel = np.flatnonzero(radius == r)
        off = np.arange(-r, r + 1)
        px = np.floor(centers[sel, 0])[:, None] + off          # (m, k) columns
        py = np.floor(centers[sel, 1])[:, None] + off          # (m, k) rows
        dx = px - centers[sel, 0][:, None]
        dy = py - centers[sel, 1][:, None]
        rr = reach[sel][:, None]
        ax = (-0.5 * qa[sel])[:, None] * dx * dx
        cy = (-0.5 * qc[sel])[:, None] * dy * dy
        okx = (np.abs(dx) <= rr) & (px >= 0) & (px < w)
        oky = (np.abs(dy) <= rr) & (py >= 0) & (py < h)
        q = (-0.5 * qb[sel])[:, None, None] * dy[:, :, None] * dx[:, None, :]
        q += cy[:, :, None]
        q += ax[:, None, :]
        g = np.exp(q, out=q)                                   # (m, rows, cols)
        g *= oky[:, :, None] & okx[:, None, :]
        flat = (np.clip(py, 0, h - 1).astype(np.int64) * w)[:, :, None] \
            + np.clip(px, 0, w - 1).astype(np.int64)[:, None, :]
        idx_parts.append(flat.ravel())
        w_parts.append(g.ravel())
        owner_parts.append(np.repeat(sel, g[0].size))
    if not idx_parts:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64)
    return np.concatenate(idx_parts), np.concatenate(w_parts), np.concatenate(owner_parts)


def _accumulate(canvas, centers, major, minor, theta, peaks):
    h, w = canvas.shape[:2]
    idx, g, owner = _splat((h, w), centers, major, minor, theta, peaks)
    for ch in range(3):
        canvas[..., ch] += np.bincount(idx, weights=g * peaks[owner, ch], minlength=h * w).reshape(h, w)
    return canvas


def render_bacterium(canvas: np.ndarray, spec: BacteriumSpec) -> np.ndarray:
    """Add one Gaussian ellipse to a float (H, W, 3) buffer in place."""
    return _accumulate(canvas, np.array([spec.center], dtype=np.float64), np.array([spec.sigma_major]),
                       np.array([spec.sigma_minor]), np.array([spec.rotation]),
                       np.array([spec.peak_intensity], dtype=np.float64))


def quantize(background: np.ndarray, accumulation: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(background + 255.0 * accumulation), 0, 255).astype(np.uint8)


# -- backgrounds ---------------------------------------------------------------

def synthetic_background(rng: np.random.Generator, height: int, width: int,
                         level=(5.0, 20.0), amplitude: float = 10.0, cells: int = 4) -> np.ndarray:
    """Dark plate: a per-channel base level plus smooth illumination noise
    from a bilinearly interpolated coarse random grid."""
    base = rng.uniform(*level, size=3)
    coarse = rng.uniform(0.0, amplitude, size=(cells + 1, cells + 1))
    noise = resize_bilinear(coarse, height, width)
    return base[None, None, :] + noise[:, :, None]


def list_backgrounds(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise BackgroundError(f"background directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise BackgroundError(f"no background images in {d}")
    return files


def load_background(rng, config: SceneConfig) -> np.ndarray:
    if config.background == "synthetic":
        return synthetic_background(rng, config.height, config.width)
    files = list_backgrounds(config.background)
    plate = read_image(files[int(rng.integers(len(files)))])
    return resize_bilinear(plate, config.height, config.width)


# -- scenes and datasets -------------------------------------------------------

def _layout(config: SceneConfig):
    config.validate()
    bg_ss, obj_ss = np.random.SeedSequence(config.seed).spawn(2)
    background = load_background(np.random.default_rng(bg_ss), config)
    rng = np.random.default_rng(obj_ss)
    k, w, h = config.target_count, config.width, config.height
    cells = rng.choice(w * h, size=k, replace=False) if k else np.zeros(0, np.int64)
    # pixel centres sit at integer coordinates; staying within 0.49 of a
    # distinct cell makes rint(centroid) a one-to-one point annotation
    centers = np.stack([cells % w, cells // w], axis=1) + rng.uniform(-CELL_JITTER, CELL_JITTER, size=(k, 2))
    return background, (centers,) + _draw(rng, config.ranges, k)


def scene_bacteria(config: SceneConfig) -> list:
    """The BacteriumSpecs ``compose_scene`` renders for ``config``."""
    _, (centers, major, minor, theta, peaks) = _layout(config)
    return [BacteriumSpec((float(c[0]), float(c[1])), float(a), float(b), float(t), tuple(map(float, p)))
            for c, a, b, t, p in zip(centers, major, minor, theta, peaks)]


def compose_scene(config: SceneConfig) -> AnnotatedImage:
    """Background plate plus ``target_count`` bacteria, fully determined by
    ``config.seed``. Centres occupy distinct pixel cells, so rounding them
    to the nearest pixel gives a one-to-one point annotation."""
    background, blobs = _layout(config)
    acc = np.zeros((config.height, config.width, 3))
    if config.target_count:
        _accumulate(acc, *blobs)
    return AnnotatedImage(quantize(background, acc), blobs[0], quantize(background, 0.0))


class UniformCounts:
    """Integer counts uniform on [low, high]."""

    def __init__(self, low: int = 0, high: int = MAX_COUNT):
        if not 0 <= low <= high:
            raise SceneConfigError(f"bad count range [{low}, {high}]")
        self.low, self.high = low, high

    def __call__(self, rng) -> int:
        return int(rng.integers(self.low, self.high + 1))


def image_seeds(master_seed: int, index: int) -> tuple:
    """(count seed, scene seed) for one image, derived from (master, index) only."""
    a, b = np.random.SeedSequence([master_seed, index]).generate_state(2, np.uint64)
    return int(a), int(b)


def _make_one(args):
    index, template, distribution, master_seed, out_dir = args
    count_seed, scene_seed = image_seeds(master_seed, index)
    count = distribution(np.random.default_rng(count_seed))
    scene = compose_scene(template.replace(target_count=count, seed=scene_seed))
    name = f"img_{index:05d}.png"
    write_png(Path(out_dir) / name, scene.pixels)
    return Record(name, scene.count, scene.centroids.tolist(), seed=scene_seed)


def generate_dataset(n_images: int, template: SceneConfig, output_dir, count_distribution=None,
                     master_seed: int | None = None, workers: int = 1) -> DatasetManifest:
    """Write ``n_images`` PNGs and a manifest into ``output_dir``."""
    if n_images < 0:
        raise SceneConfigError("n_images must be >= 0")
    template.validate()
    distribution = count_distribution or UniformCounts()
    master = template.seed if master_seed is None else master_seed
    out = Path(output_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        jobs = [(i, template, distribution, master, out) for i in range(n_images)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                for rec in pool.map(_make_one, jobs, chunksize=8):
                    written.append(rec)
        else:
            for job in jobs:
                written.append(_make_one(job))
        manifest = DatasetManifest(written, out)
        manifest.save()
    except OSError as exc:
        raise GenerationError(f"generation aborted after {len(written)} of {n_images} images: {exc}",
                              [r.image for r in written]) from exc
    return manifest


def count_statistics(manifest: DatasetManifest) -> dict:
    c = manifest.counts()
    if c.size == 0:
        return {"images": 0, "total": 0, "min": None, "ave": None, "max": None}
    return {"images": int(c.size), "total": int(c.sum()), "min": int(c.min()),
            "ave": float(c.mean()), "max": int(c.max())}
