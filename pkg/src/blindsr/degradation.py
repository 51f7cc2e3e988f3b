"""Synthetic degradation pipeline: rotated anisotropic Gaussian blur,
s-fold decimation and additive Gaussian noise.

The blur kernel lives on a fixed 21x21 grid. Noise levels are expressed on
the 8-bit 0..255 intensity scale and divided by 255 for [0,1] images.
Everything is a pure function of (inputs, seed), so datasets regenerate
bit-exactly from their manifest.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .ppm import ImageIOError, read_image
from .tensorio import read_tensor, write_tensor
from .autodiff import DimensionError, ParameterError

logger = logging.getLogger(__name__)

KERNEL_SIZE = 21
KERNEL_CENTER = KERNEL_SIZE // 2

SIGMA_RANGE = (0.2, 4.0)
NOISE_RANGE = (0.0, 25.0)

MODES = ("isotropic", "anisotropic", "anisotropic-noise")


@dataclass(frozen=True)
class DegradationSpec:
    """Parameters of one degradation instance.

    sigma1/sigma2 are the Gaussian widths along the rotated axes (pixels),
    theta the rotation angle in radians, noise_level the noise standard
    deviation on the 0..255 scale, and scale the decimation factor.
    """

    sigma1: float
    sigma2: float
    theta: float = 0.0
    noise_level: float = 0.0
    scale: int = 2

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ParameterError(
                f"kernel widths must be positive, got ({self.sigma1}, {self.sigma2})"
            )
        if self.noise_level < 0:
            raise ParameterError(f"noise level must be >= 0, got {self.noise_level}")
        if int(self.scale) != self.scale or self.scale < 1:
            raise ParameterError(f"scale must be a positive integer, got {self.scale}")

    def to_dict(self) -> dict:
        return {
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "theta": self.theta,
            "noise": self.noise_level,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(
            sigma1=d["sigma1"],
            sigma2=d["sigma2"],
            theta=d["theta"],
            noise_level=d["noise"],
            scale=int(d["scale"]),
        )


def make_kernel(spec: DegradationSpec) -> np.ndarray:
    """Realize the 21x21 blur kernel of a spec, normalized to sum 1.

    The covariance is R(theta) diag(sigma1^2, sigma2^2) R(theta)^T and the
    density is evaluated on the integer grid centred at (10, 10).
    """
    c, s = math.cos(spec.theta), math.sin(spec.theta)
    i1 = 1.0 / (spec.sigma1 * spec.sigma1)
    i2 = 1.0 / (spec.sigma2 * spec.sigma2)
    # inverse covariance, expanded analytically
    qa = c * c * i1 + s * s * i2
    qb = c * s * (i1 - i2)
    qc = s * s * i1 + c * c * i2
    ax = np.arange(KERNEL_SIZE, dtype=np.float64) - KERNEL_CENTER
    x = ax[None, :]
    y = ax[:, None]
    q = qa * x * x + 2.0 * qb * x * y + qc * y * y
    k = np.exp(-0.5 * q)
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve with reflective (edge-inclusive) boundary handling."""
    pad = KERNEL_CENTER
    if img.ndim == 2:
        p = np.pad(img, pad, mode="symmetric")
        return fftconvolve(p, kernel, mode="valid")
    p = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")
    return fftconvolve(p, kernel[:, :, None], mode="valid", axes=(0, 1))


def degrade(hr: np.ndarray, spec: DegradationSpec, noise_seed=0) -> np.ndarray:
    """Apply blur, s-fold decimation and seeded Gaussian noise to an HR image.

    Args:
        hr: (H, W) or (H, W, C) float image; H and W must be divisible by
            spec.scale.
        spec: degradation parameters.
        noise_seed: seed (int or int sequence) for the noise draw.

    Returns:
        (H/s, W/s[, C]) float image, unclamped; clamping happens only at
        file I/O boundaries.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim not in (2, 3):
        raise DimensionError(f"degrade expects an HxW or HxWxC image, got {hr.shape}")
    h, w = hr.shape[:2]
    s = int(spec.scale)
    if h % s or w % s:
        raise DimensionError(f"image dims ({h},{w}) not divisible by scale {s}")
    out = _blur(hr, make_kernel(spec))[::s, ::s]
    if spec.noise_level > 0:
        rng = np.random.default_rng(noise_seed)
        out = out + rng.standard_normal(out.shape) * (spec.noise_level / 255.0)
    return out


def sample_spec(rng: np.random.Generator, mode: str, scale: int = 2) -> DegradationSpec:
    """Draw a degradation spec from the training ranges of the given mode.

    isotropic: sigma1 == sigma2 ~ U(0.2, 4), theta = 0, no noise.
    anisotropic: independent widths, theta ~ U(0, pi), no noise.
    anisotropic-noise: as above plus noise level ~ U(0, 25).
    """
    if mode not in MODES:
        raise ParameterError(f"unknown degradation mode {mode!r}, want one of {MODES}")
    lo, hi = SIGMA_RANGE
    if mode == "isotropic":
        sigma = rng.uniform(lo, hi)
        return DegradationSpec(sigma, sigma, 0.0, 0.0, scale)
    sigma1 = rng.uniform(lo, hi)
    sigma2 = rng.uniform(lo, hi)
    theta = rng.uniform(0.0, math.pi)
    noise = rng.uniform(*NOISE_RANGE) if mode == "anisotropic-noise" else 0.0
    return DegradationSpec(sigma1, sigma2, theta, noise, scale)


def _usable_images(hr_dir: Path, min_side: int) -> list[tuple[str, np.ndarray]]:
    hr_dir = Path(hr_dir)
    if not hr_dir.is_dir():
        raise ImageIOError(f"HR directory not found: {hr_dir}")
    names = sorted(
        p.name for p in hr_dir.iterdir() if p.suffix.lower() in (".ppm", ".pgm")
    )
    if not names:
        raise ImageIOError(f"no .ppm/.pgm images in {hr_dir}")
    images = []
    for name in names:
        img = read_image(hr_dir / name)
        if min(img.shape[:2]) < min_side:
            logger.warning("skipping %s: smaller than %dpx patch", name, min_side)
            continue
        images.append((name, img))
    if not images:
        raise ImageIOError(f"no image in {hr_dir} is at least {min_side}px on a side")
    return images


def gen_dataset(hr_dir, count: int, mode: str, seed: int, out_dir,
                patch_size: int = 32, scale: int = 2, distinct_specs: int = 0) -> list:
    """Write `count` degraded LR/HR patch pairs plus a JSON manifest.

    Each item gets its own RNG stream derived from (seed, index), so the
    dataset is reproducible from (seed, hr_dir) alone and items can be
    regenerated independently. With distinct_specs > 0, specs are drawn
    from a fixed pool of that size and reused round-robin, which gives the
    repeated labels needed for representation clustering.

    Returns:
        the manifest: a list of {id, spec, hr_file, lr_file, noise_seed}.
    """
    if count < 0:
        raise ParameterError(f"count must be >= 0, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    if count > 0:
        hr_patch = patch_size * scale
        images = _usable_images(hr_dir, hr_patch)
        pool = None
        if distinct_specs > 0:
            pool_rng = np.random.default_rng([seed, 2**31])
            pool = [sample_spec(pool_rng, mode, scale) for _ in range(distinct_specs)]
        (out_dir / "hr").mkdir(exist_ok=True)
        (out_dir / "lr").mkdir(exist_ok=True)
        for i in range(count):
            rng = np.random.default_rng([seed, i])
            name, img = images[rng.integers(len(images))]
            spec = pool[i % len(pool)] if pool else sample_spec(rng, mode, scale)
            y = rng.integers(img.shape[0] - hr_patch + 1)
            x = rng.integers(img.shape[1] - hr_patch + 1)
            hr = np.ascontiguousarray(img[y : y + hr_patch, x : x + hr_patch])
            noise_seed = int(rng.integers(2**63))
            lr = degrade(hr, spec, noise_seed)
            hr_file = f"hr/{i:06d}.rdt"
            lr_file = f"lr/{i:06d}.rdt"
            write_tensor(out_dir / hr_file, hr)
            write_tensor(out_dir / lr_file, lr)
            manifest.append(
                {
                    "id": i,
                    "spec": spec.to_dict(),
                    "hr_file": hr_file,
                    "lr_file": lr_file,
                    "noise_seed": noise_seed,
                }
            )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(dataset_dir) -> list:
    """Read manifest.json and return its entries with parsed specs attached."""
    dataset_dir = Path(dataset_dir)
    path = dataset_dir / "manifest.json"
    if not path.is_file():
        raise ImageIOError(f"manifest not found: {path}")
    entries = json.loads(path.read_text())
    for e in entries:
        e["spec_obj"] = DegradationSpec.from_dict(e["spec"])
    return entries


def load_pair(dataset_dir, entry) -> tuple[np.ndarray, np.ndarray]:
    """Load the (hr, lr) arrays referenced by one manifest entry."""
    dataset_dir = Path(dataset_dir)
    return (
        read_tensor(dataset_dir / entry["hr_file"]),
        read_tensor(dataset_dir / entry["lr_file"]),
    )
