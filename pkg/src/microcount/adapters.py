"""Turn masks, dot annotations and global counts into count-labelled records.

Coordinates follow the generator: (x, y) with x the column and pixel centres
at integer positions, so a centroid belongs to pixel rint(x), rint(y).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.morphology import h_maxima
from skimage.segmentation import watershed

from .io import DatasetManifest, Record, read_gray, read_image, resize_bilinear, write_png
from .synthgen import IMAGE_SUFFIXES

INPUT_SIZE = 384
EIGHT = np.ones((3, 3), dtype=bool)


class AdapterError(ValueError):
    pass


class LayoutError(AdapterError):
    pass


# -- counting ------------------------------------------------------------------

def _merge_close(markers, labels, min_separation):
    """Relabel marker regions so markers of one component closer than
    ``min_separation`` pixels share a label."""
    ys, xs = np.nonzero(markers)
    if ys.size == 0:
        return markers
    region = markers[ys, xs] - 1
    n = int(region.max()) + 1
    pts = np.stack([ys, xs], axis=1).astype(float)
    pairs = cKDTree(pts).query_pairs(min_separation - 1e-9, output_type="ndarray")
    same = labels[ys[pairs[:, 0]], xs[pairs[:, 0]]] == labels[ys[pairs[:, 1]], xs[pairs[:, 1]]]
    pairs = pairs[same]
    graph = coo_matrix((np.ones(len(pairs)), (region[pairs[:, 0]], region[pairs[:, 1]])), shape=(n, n))
    _, merged = connected_components(graph, directed=False)
    out = np.zeros_like(markers)
    out[ys, xs] = merged[region] + 1
    return out


def segment_mask(mask: np.ndarray, min_separation: float = 5.0, min_depth: float = 1.0) -> np.ndarray:
    """Instance labels for a binary mask.

    8-connected components are split by a marker-based watershed on the
    negated Euclidean distance transform. Markers are the regional maxima of
    the distance transform that rise at least ``min_depth`` above their
    surroundings; markers of one component closer than ``min_separation``
    pixels are merged.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise AdapterError(f"mask must be 2-D, got shape {mask.shape}")
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise AdapterError(f"mask is not binary: values {values[:5]}")
    mask = mask.astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return labels
    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    peaks = h_maxima(dist, min_depth).astype(bool) & mask
    markers, _ = ndimage.label(peaks, structure=EIGHT)
    markers = _merge_close(markers, labels, min_separation)
    # a component whose maximum is flatter than min_depth still gets one marker
    seeded = np.unique(labels[markers > 0])
    top = markers.max()
    for comp in np.setdiff1d(np.arange(1, n + 1), seeded):
        where = labels == comp
        y, x = np.unravel_index(np.argmax(np.where(where, dist, -1)), dist.shape)
        top += 1
        markers[y, x] = top
    return watershed(-dist, markers, mask=mask, connectivity=2)


def count_from_mask(mask: np.ndarray, min_separation: float = 5.0, min_depth: float = 1.0) -> int:
    seg = segment_mask(mask, min_separation, min_depth)
    return int(np.count_nonzero(np.unique(seg)))


def count_from_points(annotation: np.ndarray):
    """Number of nonzero pixels and their (x, y) coordinates."""
    annotation = np.asarray(annotation)
    if annotation.ndim == 3:
        annotation = annotation.max(axis=-1)
    ys, xs = np.nonzero(annotation)
    return int(ys.size), np.stack([xs, ys], axis=1).astype(np.float64)


def points_to_annotation(centroids, height: int, width: int) -> np.ndarray:
    """Dot map with one nonzero pixel per centroid (rounded to the nearest pixel)."""
    ann = np.zeros((height, width), dtype=np.uint8)
    pts = np.rint(np.asarray(centroids, dtype=np.float64).reshape(-1, 2)).astype(np.int64)
    if pts.size:
        if (pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() >= width
                or pts[:, 1].max() >= height):
            raise AdapterError("centroid outside the image")
        ann[pts[:, 1], pts[:, 0]] = 1
    return ann


# -- record transforms ---------------------------------------------------------

def _grid_edges(n: int, parts: int) -> np.ndarray:
    step = n // parts
    edges = np.arange(parts + 1) * step
    edges[-1] = n
    return edges


def _derived_name(image: str, tag: str) -> str:
    p = Path(image)
    return str(p.with_name(f"{p.stem}_{tag}.png"))


def patch_image(pixels: np.ndarray, record: Record, rows: int, cols: int) -> list:
    """Split an image into a rows x cols grid (remainder to the last row and
    column). Each centroid goes to exactly one patch by half-open intervals
    on its pixel position. Returns (patch pixels, Record) pairs, row-major."""
    if record.centroids is None:
        raise AdapterError(f"{record.image}: patching needs centroids, record has a global count only")
    h, w = pixels.shape[:2]
    if rows < 1 or cols < 1 or rows > h or cols > w:
        raise AdapterError(f"grid {rows}x{cols} does not fit a {h}x{w} image")
    ys, xs = _grid_edges(h, rows), _grid_edges(w, cols)
    pts = np.asarray(record.centroids, dtype=np.float64).reshape(-1, 2)
    pix = np.rint(pts)
    out = []
    for i in range(rows):
        for j in range(cols):
            x0, x1, y0, y1 = xs[j], xs[j + 1], ys[i], ys[i + 1]
            inside = (pix[:, 0] >= x0) & (pix[:, 0] < x1) & (pix[:, 1] >= y0) & (pix[:, 1] < y1)
            cents = (pts[inside] - [x0, y0]).tolist()
            tag = f"r{i}c{j}"
            lineage = f"{record.lineage}/patch:{tag}" if record.lineage else f"patch:{tag}"
            rec = Record(_derived_name(record.image, tag), len(cents), cents, record.seed, record.source, lineage)
            out.append((pixels[y0:y1, x0:x1].copy(), rec))
    return out


# name -> (pixel transform, centroid transform given (x, y, W, H))
DIHEDRAL = {
    "orig": (lambda a: a, lambda x, y, w, h: (x, y)),
    "hflip": (lambda a: a[:, ::-1], lambda x, y, w, h: (w - 1 - x, y)),
    "vflip": (lambda a: a[::-1], lambda x, y, w, h: (x, h - 1 - y)),
    "rot90": (lambda a: np.rot90(a, 1), lambda x, y, w, h: (y, w - 1 - x)),
    "rot180": (lambda a: np.rot90(a, 2), lambda x, y, w, h: (w - 1 - x, h - 1 - y)),
    "rot270": (lambda a: np.rot90(a, 3), lambda x, y, w, h: (h - 1 - y, x)),
}


def augment(pixels: np.ndarray, record: Record) -> list:
    """The original plus five count-preserving flips and rotations
    (rotations are counter-clockwise). Returns (pixels, Record) pairs."""
    h, w = pixels.shape[:2]
    pts = None if record.centroids is None else np.asarray(record.centroids, np.float64).reshape(-1, 2)
    out = []
    for name, (move, remap) in DIHEDRAL.items():
        cents = None
        if pts is not None:
            x, y = remap(pts[:, 0], pts[:, 1], w, h)
            cents = np.stack([x, y], axis=1).tolist()
        image = record.image if name == "orig" else _derived_name(record.image, name)
        lineage = f"{record.lineage}/{name}" if record.lineage else name
        rec = Record(image, record.count, cents, record.seed, record.source, lineage)
        out.append((np.ascontiguousarray(move(pixels)), rec))
    return out


# -- normalisation -------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise AdapterError("stats need three channels")
        if min(self.std) <= 0:
            raise AdapterError(f"channel std must be > 0, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(tuple(d["mean"]), tuple(d["std"]))


def preprocess(pixels: np.ndarray, stats: NormalizationStats, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resize to size x size, then (value / 255 - mean) / std per
    channel, as a float32 (3, size, size) array."""
    if min(stats.std) <= 0:
        raise AdapterError("channel std must be > 0")
    img = resize_bilinear(pixels, size, size) / 255.0
    mean = np.asarray(stats.mean, np.float64)
    std = np.asarray(stats.std, np.float64)
    return ((img - mean) / std).transpose(2, 0, 1).astype(np.float32)


def unnormalize(tensor: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of the normalisation step: a (3, S, S) array back to 0-255 values."""
    t = np.asarray(tensor, np.float64).transpose(1, 2, 0)
    return (t * np.asarray(stats.std) + np.asarray(stats.mean)) * 255.0


def pixel_sums(pixels: np.ndarray) -> tuple:
    """Exact per-channel (count, sum, sum of squares) as Python integers."""
    p = np.asarray(pixels, dtype=np.int64).reshape(-1, 3)
    return p.shape[0], [int(v) for v in p.sum(axis=0)], [int(v) for v in (p * p).sum(axis=0)]


def stats_from_sums(n: int, sums, squares) -> NormalizationStats:
    """Mean and std of the scaled pixels from exact integer sums, so the result
    does not depend on the order the images were visited in."""
    if n == 0:
        raise AdapterError("no pixels")
    mean = tuple(s / (255 * n) for s in sums)
    std = tuple(float(np.sqrt(n * q - s * s)) / (255 * n) for s, q in zip(sums, squares))
    if min(std) <= 0:
        raise AdapterError(f"zero channel std (mean {tuple(round(m, 4) for m in mean)})")
    return NormalizationStats(mean, std)


def compute_dataset_stats(manifest: DatasetManifest) -> NormalizationStats:
    """Per-channel mean/std of scaled pixels over every image in ``manifest``
    (pass the training split only)."""
    if len(manifest) == 0:
        raise AdapterError("empty manifest")
    n, sums, squares = 0, [0, 0, 0], [0, 0, 0]
    for rec in manifest:
        k, s, q = pixel_sums(read_image(manifest.path(rec)))
        n += k
        sums = [a + b for a, b in zip(sums, s)]
        squares = [a + b for a, b in zip(squares, q)]
    return stats_from_sums(n, sums, squares)


# -- dataset layouts -----------------------------------------------------------

def _images_in(d: Path) -> list:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_dir(root: Path, name: str):
    if (root / name).is_dir():
        return root / name
    hits = sorted(p for p in root.rglob(name) if p.is_dir())
    return hits[0] if hits else None


def _rel(path: Path, out_dir: Path) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    return os.path.relpath(path, out_dir)


def adapt_fnc(source, out_dir, min_separation: float = 5.0) -> DatasetManifest:
    """Binary-mask layout: ``images/`` and ``masks/`` folders with matching stems."""
    source, out_dir = Path(source), Path(out_dir)
    images, masks = _find_dir(source, "images"), _find_dir(source, "masks")
    if images is None or masks is None:
        raise LayoutError(f"{source}: expected images/ and masks/ folders with matching file names")
    by_stem = {p.stem: p for p in _images_in(masks)}
    records = []
    for img in _images_in(images):
        if img.stem not in by_stem:
            raise LayoutError(f"{img.name}: no mask with the same name in {masks}")
        mask = read_gray(by_stem[img.stem]) > 0
        records.append(Record(_rel(img, out_dir), count_from_mask(mask, min_separation), source="fnc"))
    if not records:
        raise LayoutError(f"{images}: no images")
    return DatasetManifest(records, out_dir)


def adapt_vgg(source, out_dir) -> DatasetManifest:
    """Dot-annotation layout: ``NNNcell.png`` images beside ``NNNdots.png`` maps."""
    source, out_dir = Path(source), Path(out_dir)
    cells = sorted(source.glob("*cell.png"))
    if not cells:
        raise LayoutError(f"{source}: expected *cell.png images with matching *dots.png annotations")
    records = []
    for cell in cells:
        dots = cell.with_name(cell.name[: -len("cell.png")] + "dots.png")
        if not dots.exists():
            raise LayoutError(f"{cell.name}: missing {dots.name}")
        ann = read_image(dots)
        # annotations are coloured dots on black; a pixel counts if any channel is lit
        count, coords = count_from_points(ann.max(axis=-1) > 0)
        records.append(Record(_rel(cell, out_dir), count, coords.tolist(), source="vgg"))
    return DatasetManifest(records, out_dir)


def adapt_cancer(source, out_dir) -> DatasetManifest:
    """Global-count layout: ``images/`` plus ``counts.csv`` with columns image,count."""
    source, out_dir = Path(source), Path(out_dir)
    table = source / "counts.csv"
    images = source / "images"
    if not table.exists() or not images.is_dir():
        raise LayoutError(f"{source}: expected images/ and counts.csv (columns image,count)")
    records = []
    with open(table, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image", "count"} <= set(reader.fieldnames):
            raise LayoutError(f"{table}: header must contain image,count")
        for row in reader:
            img = images / row["image"]
            if not img.exists():
                raise LayoutError(f"{table}: {row['image']} not found in {images}")
            count = int(row["count"])
            records.append(Record(_rel(img, out_dir), count, source="cancer"))
    return DatasetManifest(records, out_dir)


def adapt_synthetic(source, out_dir) -> DatasetManifest:
    """Generator output: recount each image from a dot map of its centroids."""
    source, out_dir = Path(source), Path(out_dir)
    try:
        manifest = DatasetManifest.load(source)
    except FileNotFoundError:
        raise LayoutError(f"{source}: expected a generator manifest.jsonl") from None
    records = []
    for rec in manifest:
        if rec.centroids is None:
            raise LayoutError(f"{rec.image}: synthetic records need centroids")
        h, w = read_image(manifest.path(rec)).shape[:2]
        count, _ = count_from_points(points_to_annotation(rec.centroids, h, w))
        records.append(Record(_rel(manifest.path(rec), out_dir), count, rec.centroids, rec.seed, "synthetic"))
    return DatasetManifest(records, out_dir)


ADAPTERS = {"fnc": adapt_fnc, "vgg": adapt_vgg, "cancer": adapt_cancer, "synthetic": adapt_synthetic}


def expand(manifest: DatasetManifest, out_dir, patch=None, do_augment=False) -> DatasetManifest:
    """Apply patching (a (rows, cols) grid) and/or augmentation, writing every
    resulting image as a PNG under ``out_dir``."""
    out_dir = Path(out_dir)
    if patch is None and not do_augment:
        return DatasetManifest([Record(_rel(manifest.path(r), out_dir), r.count, r.centroids, r.seed,
                                       r.source, r.lineage) for r in manifest], out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for rec in manifest:
        items = [(read_image(manifest.path(rec)), rec)]
        if patch is not None:
            items = [pr for px, r in items for pr in patch_image(px, r, *patch)]
        if do_augment:
            items = [pr for px, r in items for pr in augment(px, r)]
        for px, r in items:
            name = Path(r.image).stem + ".png"
            write_png(out_dir / name, np.ascontiguousarray(px))
            records.append(Record(name, r.count, r.centroids, r.seed, r.source, r.lineage))
    return DatasetManifest(records, out_dir)
