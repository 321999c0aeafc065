"""Image files, bilinear resizing and the JSON-lines dataset manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.jsonl"


class ManifestError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    """Load any Pillow-readable image as an (H, W, 3) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_gray(path) -> np.ndarray:
    """Load an image as a 2-D array without colour conversion (masks, dot maps)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].max(axis=-1)
    return arr.copy()


def write_png(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {pixels.dtype}")
    Image.fromarray(pixels).save(path, format="PNG")


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (H, W) or (H, W, C) array with half-pixel centres
    and edge clamping. Returns float64; a same-size resize is exact."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    if img.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


@dataclass
class Record:
    """One manifest line: an image reference and its integer count label."""

    image: str
    count: int
    centroids: list | None = None
    seed: int | None = None
    source: str | None = None
    lineage: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 0:
            raise ManifestError(f"{self.image}: count must be a non-negative integer, got {self.count}")
        self.count = int(self.count)
        if self.centroids is not None and len(self.centroids) != self.count:
            raise ManifestError(f"{self.image}: count {self.count} != {len(self.centroids)} centroids")

    def to_dict(self) -> dict:
        out = {"image": self.image, "count": self.count}
        if self.centroids is not None:
            out["centroids"] = [[float(x), float(y)] for x, y in self.centroids]
        for key in ("seed", "source", "lineage"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Record":
        d = dict(d)
        try:
            image, count = d.pop("image"), d.pop("count")
        except KeyError as exc:
            raise ManifestError(f"manifest record missing {exc}") from None
        known = {k: d.pop(k) for k in ("centroids", "seed", "source", "lineage") if k in d}
        return cls(image=image, count=count, extra=d, **known)


@dataclass
class DatasetManifest:
    """Ordered records; image paths are relative to ``root``."""

    records: list
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def path(self, record: Record) -> Path:
        return Path(self.root) / record.image

    def counts(self) -> np.ndarray:
        return np.array([r.count for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], self.root)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(Record.from_dict(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from None
        return cls(records, path.parent)
