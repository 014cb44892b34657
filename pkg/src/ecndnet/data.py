"""Grayscale image I/O, patch extraction, augmentation and synthetic AWGN.

Images are 2-D float32 arrays in [0, 1]; ``img[None, None]`` is the
matching 1x1xHxW tensor.  All randomness is drawn from
``numpy.random.default_rng`` seeded with ``[seed, domain, index]`` so each
patch, image and epoch owns an independent, reproducible stream.  Gaussian
samples come from numpy's ziggurat transform of that stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ShapeError
from .tensor import DTYPE

# Stream domains for SeedSequence entropy.
NOISE_PATCH = 1
NOISE_IMAGE = 2
SHUFFLE = 3
AUGMENT = 4


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode in ("L", "LA"):
                arr = np.asarray(im.getchannel(0), dtype=np.float64) / 255.0
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.clip(arr, 0.0, 1.0).astype(DTYPE)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] pixels to uint8 with round-half-up; out-of-range values are clipped."""
    scaled = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    if img.ndim == 4:
        img = img[0, 0]
    try:
        Image.fromarray(to_bytes(img), mode="L").save(Path(path), format="PNG")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def list_pngs(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png" and p.is_file())
    if not files:
        raise DataError(f"no .png files in {directory}")
    return files


def load_dataset(directory) -> list[tuple[str, np.ndarray]]:
    return [(p.name, load_image(p)) for p in list_pngs(directory)]


def patch_offsets(h: int, w: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    if patch_size < 1 or stride < 1:
        raise ConfigError("patch size and stride must be positive")
    if patch_size > min(h, w):
        raise ConfigError(f"patch size {patch_size} exceeds image size {h}x{w}")
    return [(r, c) for r in range(0, h - patch_size + 1, stride) for c in range(0, w - patch_size + 1, stride)]


def extract_patches(img: np.ndarray, patch_size: int = 40, stride: int = 10) -> np.ndarray:
    """All fully contained patch_size windows on a stride grid, row-major, as (k, p, p)."""
    offsets = patch_offsets(*img.shape, patch_size, stride)
    return np.stack([img[r:r + patch_size, c:c + patch_size] for r, c in offsets]).astype(DTYPE)


def augment(patch: np.ndarray, mode: int) -> np.ndarray:
    """Dihedral symmetry: rotate by 90*(mode % 4) degrees, then mirror left-right if mode >= 4."""
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ShapeError(f"augmentation needs a square 2-D patch, got {patch.shape}")
    if not 0 <= mode < 8:
        raise ConfigError(f"augmentation mode must be in 0..7, got {mode}")
    out = np.rot90(patch, mode % 4)
    if mode >= 4:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


def gaussian_noise(shape, sigma: float, seed: int, domain: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, domain, index])
    return (rng.standard_normal(shape) * (sigma / 255.0)).astype(DTYPE)


def add_gaussian_noise(clean: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    """Unclipped ``clean + N(0, (sigma/255)^2)``, reproducible per (seed, stream)."""
    return clean + gaussian_noise(clean.shape, cfg.sigma, cfg.seed, NOISE_IMAGE, cfg.stream)


@dataclass
class PatchSet:
    clean: np.ndarray  # (k, p, p)
    noisy: np.ndarray  # (k, p, p), unclipped
    sigma: float
    seed: int
    # (image id, row, col, augmentation mode) per patch
    sources: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape or self.clean.ndim != 3:
            raise ShapeError(f"clean {self.clean.shape} and noisy {self.noisy.shape} patches must align")

    def __len__(self) -> int:
        return self.clean.shape[0]

    def noise(self, index: int) -> np.ndarray:
        """Regenerate the noise realization added to patch ``index``."""
        return gaussian_noise(self.clean.shape[1:], self.sigma, self.seed, NOISE_PATCH, index)


def build_patch_set(images, sigma: float, seed: int = 0, patch_size: int = 40, stride: int = 10,
                    augment_patches: bool = False) -> PatchSet:
    clean, sources = [], []
    for image_id, img in enumerate(images):
        offsets = patch_offsets(*img.shape, patch_size, stride)
        patches = extract_patches(img, patch_size, stride)
        for (r, c), patch in zip(offsets, patches):
            mode = 0
            if augment_patches:
                mode = int(np.random.default_rng([seed, AUGMENT, len(clean)]).integers(8))
                patch = augment(patch, mode)
            clean.append(patch)
            sources.append((image_id, r, c, mode))
    if not clean:
        raise DataError("no patches extracted")
    clean = np.stack(clean).astype(DTYPE)
    noisy = np.empty_like(clean)
    for i in range(len(clean)):
        noisy[i] = clean[i] + gaussian_noise(clean.shape[1:], sigma, seed, NOISE_PATCH, i)
    return PatchSet(clean, noisy, float(sigma), seed, sources)


def make_batches(patches: PatchSet, batch_size: int, seed: int, epoch: int):
    """Seeded shuffle then consecutive chunks as ``(clean, noisy)`` pairs of shape (b, 1, p, p).

    The final chunk may be short.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    if len(patches) == 0:
        raise DataError("empty patch set")
    order = np.random.default_rng([seed, SHUFFLE, epoch]).permutation(len(patches))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batches.append((patches.clean[idx][:, None], patches.noisy[idx][:, None]))
    return batches
