"""Load a manifest into model-ready arrays."""

from __future__ import annotations

import numpy as np

from .adapters import NormalizationStats, preprocess
from .io import DatasetManifest, read_image


def load_arrays(manifest: DatasetManifest, stats: NormalizationStats, size: int, skip_unreadable: bool = False):
    """Return ``(images (N, 3, size, size) float32, counts (N,) float64, skipped)``.

    With ``skip_unreadable`` images that fail to load are listed in
    ``skipped`` as (image, reason) instead of raising.
    """
    xs, ys, skipped = [], [], []
    for rec in manifest:
        try:
            pixels = read_image(manifest.path(rec))
        except (OSError, ValueError) as exc:
            if not skip_unreadable:
                raise
            skipped.append((rec.image, str(exc)))
            continue
        xs.append(preprocess(pixels, stats, size))
        ys.append(rec.count)
    x = np.stack(xs) if xs else np.zeros((0, 3, size, size), np.float32)
    return x, np.asarray(ys, dtype=np.float64), skipped


def split_indices(n: int, val_fraction: float, seed: int):
    """Seeded disjoint (train, val) index split."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_manifest(manifest: DatasetManifest, val_fraction: float = 0.2, seed: int = 0):
    train, val = split_indices(len(manifest), val_fraction, seed)
    return manifest.subset(train), manifest.subset(val)

