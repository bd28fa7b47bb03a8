"""Synthetic degradations for blind SR: blur -> bicubic downsampling -> noise.

Images are float arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

# (3, H, W) float array in [0, 1], RGB as stored.
ImagePatch = np.ndarray

POLICIES = ("bicubic", "blind", "blur", "noise", "blur+noise")


@dataclass(frozen=True)
class DegradationSpec:
    use_blur: bool = False
    blur_sigma: float = 2.0
    kernel_size: int = 21
    use_noise: bool = False
    noise_sigma: float = 0.1
    scale: int = 2

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.use_blur:
            if self.blur_sigma <= 0:
                raise ValueError(f"blur_sigma must be > 0, got {self.blur_sigma}")
            if self.kernel_size % 2 != 1:
                raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
            if self.kernel_size < 3 * math.ceil(self.blur_sigma):
                raise ValueError(
                    f"kernel_size {self.kernel_size} too small for sigma {self.blur_sigma}")

    @property
    def tag(self) -> str:
        kinds = [k for k, on in (("blur", self.use_blur), ("noise", self.use_noise)) if on]
        return "+".join(kinds) if kinds else "clean"


def spec_for(tag: str, scale: int = 2, blur_sigma: float = 2.0, noise_sigma: float = 0.1,
             kernel_size: int = 21) -> DegradationSpec:
    """Build the spec for a degradation tag: clean, blur, noise or blur+noise."""
    kinds = set() if tag in ("clean", "bicubic") else set(tag.split("+"))
    if not kinds <= {"blur", "noise"}:
        raise ValueError(f"unknown degradation tag {tag!r}")
    return DegradationSpec(use_blur="blur" in kinds, blur_sigma=blur_sigma,
                           kernel_size=kernel_size, use_noise="noise" in kinds,
                           noise_sigma=noise_sigma, scale=scale)


@dataclass(frozen=True)
class PairedSample:
    lr: ImagePatch
    hr: ImagePatch
    spec: DegradationSpec

    def __post_init__(self):
        s = self.spec.scale
        if self.hr.shape[1:] != (self.lr.shape[1] * s, self.lr.shape[2] * s):
            raise ValueError(f"hr {self.hr.shape} is not {s}x lr {self.lr.shape}")


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    if size < 1 or size % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k1 = _gaussian_kernel_1d(sigma, size)
    return np.outer(k1, k1)


def _gaussian_kernel_1d(sigma: float, size: int) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def blur(img: ImagePatch, sigma: float, size: int) -> np.ndarray:
    """Isotropic Gaussian blur with reflection padding.

    The 2-D Gaussian is separable, so two 1-D passes with the normalized
    1-D kernel give exactly the 2-D kernel of :func:`gaussian_kernel`.
    """
    k1 = _gaussian_kernel_1d(sigma, size)
    out = ndimage.correlate1d(np.asarray(img, dtype=np.float64), k1, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k1, axis=-2, mode="reflect")


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


@lru_cache(maxsize=64)
def _resample_matrix(n: int, scale: int) -> np.ndarray:
    # Antialiased bicubic weights: kernel stretched by `scale`, rows sum to 1,
    # out-of-range taps folded back symmetrically.
    m = n // scale
    centers = (np.arange(m) + 0.5) * scale - 0.5
    support = 2 * scale
    taps = np.arange(-support, support + 1)
    idx = np.floor(centers)[:, None].astype(int) + taps[None, :]
    w = _cubic((centers[:, None] - idx) / scale)
    w /= w.sum(axis=1, keepdims=True)
    period = 2 * n
    folded = np.mod(idx, period)
    folded = np.where(folded >= n, period - 1 - folded, folded)
    mat = np.zeros((m, n))
    np.add.at(mat, (np.repeat(np.arange(m), len(taps)), folded.ravel()), w.ravel())
    mat.flags.writeable = False
    return mat


def downsample_bicubic(img: ImagePatch, scale: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return img.copy()
    rows, cols = _resample_matrix(h, scale), _resample_matrix(w, scale)
    return np.einsum("ih,chw,jw->cij", rows, img, cols, optimize=True)


def degrade(hr: ImagePatch, spec: DegradationSpec, rng: np.random.Generator) -> PairedSample:
    """Apply ``x = (hr * k) downsample_r + n`` followed by clipping to [0, 1]."""
    hr = np.asarray(hr)
    if hr.ndim != 3 or hr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {hr.shape}")
    h, w = hr.shape[1:]
    if h % spec.scale or w % spec.scale:
        raise ValueError(f"image {h}x{w} not divisible by scale {spec.scale}")
    x = hr.astype(np.float64)
    if spec.use_blur:
        x = blur(x, spec.blur_sigma, spec.kernel_size)
    x = downsample_bicubic(x, spec.scale)
    if spec.use_noise:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    lr = np.clip(x, 0.0, 1.0).astype(np.float32)
    return PairedSample(lr=lr, hr=hr.astype(np.float32), spec=spec)


def policy_spec(policy: str, rng: np.random.Generator, scale: int = 2,
                blur_sigma: float = 2.0, noise_sigma: float = 0.1) -> DegradationSpec:
    """Draw the degradation for one training sample under a named policy."""
    if policy == "blind":
        use_blur, use_noise = rng.random() < 0.5, rng.random() < 0.5
    elif policy in ("bicubic", "blur", "noise", "blur+noise"):
        use_blur, use_noise = "blur" in policy, "noise" in policy
    else:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    return DegradationSpec(use_blur=bool(use_blur), blur_sigma=blur_sigma,
                           use_noise=bool(use_noise), noise_sigma=noise_sigma, scale=scale)


def sample_training_batch(dataset: Sequence[ImagePatch], policy: str, rng: np.random.Generator,
                          batch_size: int = 16, patch_size: int = 128, scale: int = 2,
                          blur_sigma: float = 2.0, noise_sigma: float = 0.1) -> list[PairedSample]:
    usable = [img for img in dataset if min(img.shape[1:]) >= patch_size]
    if len(usable) < len(dataset):
        logger.warning("skipping %d images smaller than patch size %d",
                       len(dataset) - len(usable), patch_size)
    if not usable:
        raise ValueError(f"no images of at least {patch_size}x{patch_size} in dataset")
    batch = []
    for _ in range(batch_size):
        img = usable[rng.integers(len(usable))]
        top = rng.integers(img.shape[1] - patch_size + 1)
        left = rng.integers(img.shape[2] - patch_size + 1)
        crop = img[:, top:top + patch_size, left:left + patch_size]
        spec = policy_spec(policy, rng, scale, blur_sigma, noise_sigma)
        batch.append(degrade(crop, spec, rng))
    return batch


# ---------------------------------------------------------------------------
# datasets


def procedural_image(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    """Random gradient background with rectangles and sinusoidal patches."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    for _ in range(rng.integers(3, 9)):
        h, w = rng.integers(size // 10, size // 2, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        img[:, top:top + h, left:left + w] = rng.random(3)[:, None, None]

    for _ in range(rng.integers(2, 5)):
        freq = rng.uniform(2, size / 6)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        cy, cx = rng.random(2)
        radius = rng.uniform(0.15, 0.4)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius ** 2
        color = rng.random(3)[:, None, None]
        amp = rng.uniform(0.3, 1.0)
        img = np.where(mask[None], (1 - amp) * img + amp * wave[None] * color, img)
    return np.clip(img, 0, 1).astype(np.float32)


def procedural_dataset(n: int, size: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [procedural_image(rng, size) for _ in range(n)]


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path: str | Path, img: ImagePatch) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_manifest(path: str | Path) -> list[Path]:
    path = Path(path)
    entries = [ln.strip() for ln in path.read_text().splitlines()]
    return [(path.parent / e) if not Path(e).is_absolute() else Path(e) for e in entries if e]


def write_manifest(path: str | Path, images: Sequence[str | Path]) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in images))


def load_dataset(manifest: str | Path) -> list[np.ndarray]:
    return [read_png(p) for p in read_manifest(manifest)]


def crop_to_multiple(img: ImagePatch, scale: int) -> np.ndarray:
    h, w = img.shape[1:]
    return img[:, : h - h % scale, : w - w % scale]


def make_pairs(gts: Sequence[ImagePatch], tag: str, seed: int, scale: int = 2) -> list[PairedSample]:
    """Degrade every GT with the same tag; noise streams are seeded per image."""
    spec = spec_for(tag, scale=scale)
    return [degrade(crop_to_multiple(gt, scale), spec, np.random.default_rng([seed, i]))
            for i, gt in enumerate(gts)]

