"""HR image sources for training: a seeded synthetic-texture generator and
a netpbm directory loader.

The synthetic images mix smooth random fields with hard edges, disks and
oriented stripes, then apply a strong per-image contrast/brightness jitter.
The edges/stripes make blur width observable; the per-image jitter keeps
content variation dominant over degradation for untrained features, so
clustering by degradation is something a model has to earn.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .ppm import ImageIOError, read_image


def _coarse_field(rng, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsample a cells x cells random grid to size x size."""
    grid = rng.random((cells, cells))
    xs = np.linspace(0.0, cells - 1.0, size)
    i0 = np.minimum(xs.astype(int), cells - 2)
    frac = xs - i0
    rows = grid[:, i0] * (1 - frac) + grid[:, i0 + 1] * frac
    return rows[i0] * (1 - frac)[:, None] + rows[i0 + 1] * frac[:, None]


def _synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = _coarse_field(rng, size, int(rng.integers(3, 9)))
    img += (rng.random() - 0.5) * (xx + yy) / size

    for _ in range(int(rng.integers(3, 8))):
        kind = rng.integers(3)
        amp = rng.uniform(0.25, 0.7) * rng.choice([-1.0, 1.0])
        if kind == 0:
            y0, x0 = rng.integers(0, size, 2)
            h, w = rng.integers(size // 8, size // 2, 2)
            img[y0 : y0 + h, x0 : x0 + w] += amp
        elif kind == 1:
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(size / 12, size / 3)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] += amp
        else:
            phi = rng.uniform(0, np.pi)
            off = rng.uniform(0.25, 0.75) * size
            img[np.cos(phi) * (xx - size / 2) + np.sin(phi) * (yy - size / 2) > off - size / 2] += amp

    # oriented stripes: high-frequency content that blur widths act on
    for _ in range(int(rng.integers(1, 4))):
        freq = rng.uniform(0.05, 0.45)
        phi = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.05, 0.25) * np.sin(
            2 * np.pi * freq * (np.cos(phi) * xx + np.sin(phi) * yy) + phase
        )

    img = (img - img.mean()) / max(img.std(), 1e-9)
    contrast = rng.uniform(0.08, 0.3)
    brightness = rng.uniform(0.35, 0.65)
    base = np.clip(img * contrast + brightness, 0.0, 1.0)

    tint = rng.uniform(0.85, 1.15, 3)
    shift = rng.uniform(-0.05, 0.05, 3)
    return np.clip(base[:, :, None] * tint + shift, 0.0, 1.0)


def synthetic_textures(count: int, size: int = 128, seed: int = 0) -> list[np.ndarray]:
    """Generate `count` HR images of shape (size, size, 3), reproducible from
    (seed, index)."""
    return [
        _synthetic_image(np.random.default_rng([seed, i]), size) for i in range(count)
    ]


def load_hr_dir(path) -> list[np.ndarray]:
    """Load every .ppm/.pgm in a directory (sorted by name) as (H, W, 3)
    float images; grayscale inputs are replicated across channels."""
    path = Path(path)
    if not path.is_dir():
        raise ImageIOError(f"HR directory not found: {path}")
    names = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not names:
        raise ImageIOError(f"no .ppm/.pgm images in {path}")
    images = []
    for p in names:
        img = read_image(p)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        images.append(img)
    return images
