"""Line augmentations ("Visual" and "All") and shifted view pairs.

Every operation is a pure function of its inputs and an integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .dataset import BACKGROUND, SUBSAMPLE, LineImage, normalize_height


@dataclass(frozen=True)
class AugmentConfig:
    """Strengths for each transform; a zero (or identity range) disables it.

    brightness/contrast are relative half-ranges, ``noise`` the maximum
    Gaussian sigma, blur values are maximum kernel sizes in pixels. Geometry
    (``skew`` as a horizontal shear factor, ``scale`` per axis) and masking
    only apply in :func:`apply_all`.
    """

    brightness: float = 0.2
    contrast: float = 0.2
    noise: float = 0.05
    gamma: tuple[float, float] = (0.5, 2.0)
    motion_blur: int = 5
    defocus_blur: int = 5
    skew: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    mask_rate: float = 0.0
    max_masks: int = 3
    max_mask_width: int = 48
    full_height: float = 0.5
    fill: float = BACKGROUND

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(brightness=0.0, contrast=0.0, noise=0.0, gamma=(1.0, 1.0), motion_blur=0, defocus_blur=0)

    @classmethod
    def visual(cls) -> "AugmentConfig":
        return cls()

    @classmethod
    def all(cls) -> "AugmentConfig":
        return cls(skew=0.25, scale=(0.85, 1.15), mask_rate=0.5)

    @classmethod
    def named(cls, kind: str) -> "AugmentConfig":
        kinds = {"none": cls.none, "visual": cls.visual, "all": cls.all}
        try:
            return kinds[kind.lower()]()
        except KeyError:
            raise ValueError(f"unknown augmentation kind {kind!r}; expected one of {sorted(kinds)}") from None

    def with_(self, **kw) -> "AugmentConfig":
        return replace(self, **kw)


def _motion_kernel(length: int, angle: float) -> np.ndarray:
    k = np.zeros((length, length), dtype=np.float32)
    c = (length - 1) / 2
    for t in np.linspace(-c, c, 4 * length):
        x = int(round(c + t * np.cos(angle)))
        y = int(round(c + t * np.sin(angle)))
        k[y, x] = 1.0
    return k / k.sum()


def _disk_kernel(size: int) -> np.ndarray:
    r = (size - 1) / 2
    yy, xx = np.mgrid[:size, :size] - r
    k = ((xx ** 2 + yy ** 2) <= r ** 2 + 0.5).astype(np.float32)
    return k / k.sum()


def _visual(px: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    x = px.astype(np.float32, copy=True)
    if cfg.contrast or cfg.brightness:
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        b = rng.uniform(-cfg.brightness, cfg.brightness)
        x = np.clip((x - 0.5) * c + 0.5 + b, 0.0, 1.0)
    lo, hi = cfg.gamma
    if (lo, hi) != (1.0, 1.0):
        g = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else lo
        x = np.power(x, g, dtype=np.float32)
    if cfg.motion_blur > 1:
        length = int(rng.integers(1, cfg.motion_blur + 1))
        if length > 1:
            x = ndimage.convolve(x, _motion_kernel(length, rng.uniform(0, np.pi)), mode="nearest")
    if cfg.defocus_blur > 1:
        size = int(rng.integers(1, cfg.defocus_blur + 1))
        if size > 1:
            x = ndimage.convolve(x, _disk_kernel(size), mode="nearest")
    if cfg.noise:
        sigma = rng.uniform(0.0, cfg.noise)
        x = x + rng.normal(0.0, sigma, size=x.shape).astype(np.float32)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def apply_visual(image: LineImage, seed: int, config: Optional[AugmentConfig] = None) -> LineImage:
    """Photometric augmentation: colour/intensity, gamma, blur, noise. Keeps geometry."""
    cfg = config or AugmentConfig.visual()
    out = _visual(image.pixels, np.random.default_rng(seed), cfg)
    return LineImage(image.id, out)


def _geometry(px: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    h, w = px.shape
    x = px
    lo, hi = cfg.scale
    if (lo, hi) != (1.0, 1.0):
        sx, sy = rng.uniform(lo, hi, size=2)
        x = ndimage.zoom(x, (sy, sx), order=1, mode="nearest")
    if cfg.skew:
        shear = rng.uniform(-cfg.skew, cfg.skew)
        hh, ww = x.shape
        pad = int(np.ceil(abs(shear) * hh / 2)) + 1
        wide = np.full((hh, ww + 2 * pad), cfg.fill, dtype=np.float32)
        wide[:, pad:pad + ww] = x
        # output (r, c) samples input (r, c + shear * (r - hh / 2)), shearing about the centre row
        matrix = np.array([[1.0, 0.0], [shear, 1.0]])
        x = ndimage.affine_transform(wide, matrix, offset=(0.0, -shear * hh / 2),
                                     order=1, mode="constant", cval=cfg.fill)
    return x


def _mask(px: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    x = px.copy()
    h, w = x.shape
    for _ in range(cfg.max_masks):
        if rng.random() >= cfg.mask_rate:
            continue
        mw = int(rng.integers(max(1, cfg.max_mask_width // 2), cfg.max_mask_width + 1))
        mw = min(mw, w)
        x0 = int(rng.integers(0, w - mw + 1))
        if rng.random() < cfg.full_height:
            y0, y1 = 0, h
        else:
            mh = int(rng.integers(h // 4, h // 2 + 1))
            y0 = int(rng.integers(0, h - mh + 1))
            y1 = y0 + mh
        x[y0:y1, x0:x0 + mw] = cfg.fill
    return x


def apply_all(image: LineImage, transcription=None, seed: int = 0, config: Optional[AugmentConfig] = None) -> LineImage:
    """Visual augmentation followed by geometry (skew, scale) and rectangular masking.

    The photometric part draws from the same stream as :func:`apply_visual`,
    so disabling geometry and masking reproduces it exactly. The
    transcription is accepted for interface symmetry; no transform here
    changes the text.
    """
    cfg = config or AugmentConfig.all()
    x = _visual(image.pixels, np.random.default_rng(seed), cfg)
    geometric = cfg.skew or cfg.scale != (1.0, 1.0)
    if geometric:
        x = _geometry(x, np.random.default_rng([seed, 1]), cfg)
        x = normalize_height(np.clip(x, 0, 1)).pixels
    if cfg.mask_rate > 0 and cfg.max_masks > 0:
        x = _mask(x, np.random.default_rng([seed, 2]), cfg)
    return LineImage(image.id, np.clip(x, 0.0, 1.0))


def augment(image: LineImage, kind: str, seed: int) -> LineImage:
    if kind == "none":
        return image
    if kind == "visual":
        return apply_visual(image, seed)
    if kind == "all":
        return apply_all(image, None, seed)
    raise ValueError(f"unknown augmentation kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ViewPair:
    """Two crops of one line, offset by ``shift_frames`` frames.

    Frame ``i`` of view A shows the same content as frame ``i - shift_frames``
    of view B for every ``i`` in ``range(*overlap)``.
    """

    view_a: LineImage
    view_b: LineImage
    shift_frames: int
    overlap: tuple[int, int]
    start_frame: int = 0

    @property
    def pixel_shift(self) -> int:
        return self.shift_frames * SUBSAMPLE

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Matching frame indices (in A, in B)."""
        a = np.arange(*self.overlap)
        return a, a - self.shift_frames


def make_view_pair(image: LineImage, crop_width: int, seed: int, config: Optional[AugmentConfig] = None,
                   shift: bool = True) -> ViewPair:
    """Crop two independently augmented views at frame-aligned, shifted positions.

    Lines shorter than ``crop_width`` are right-padded with background first.
    With ``shift=False`` both crops share one position (the degenerate
    setting that lets a model lean on positional encoding alone).
    """
    if crop_width <= 0 or crop_width % SUBSAMPLE:
        raise ValueError(f"crop width {crop_width} is not a positive multiple of {SUBSAMPLE}")
    if image.width < 2 * SUBSAMPLE:
        raise ValueError(f"line {image.id!r} is narrower than two frames")
    cfg = config or AugmentConfig.visual()
    rng = np.random.default_rng(seed)

    total = max(image.width, crop_width)
    total = -(-total // SUBSAMPLE) * SUBSAMPLE
    px = np.full((image.height, total), BACKGROUND, dtype=np.float32)
    px[:, : image.width] = image.pixels
    n_frames = total // SUBSAMPLE
    c = crop_width // SUBSAMPLE

    start_a = int(rng.integers(0, n_frames - c + 1))
    if shift:
        lo = max(-(c - 1), -start_a)
        hi = min(c - 1, n_frames - c - start_a)
        s = int(rng.integers(lo, hi + 1))
    else:
        s = 0
    start_b = start_a + s

    seed_a, seed_b = (int(v) for v in rng.integers(0, 2**31, size=2))
    full = LineImage(image.id, px)
    aug_a = _visual(full.pixels, np.random.default_rng(seed_a), cfg)
    aug_b = _visual(full.pixels, np.random.default_rng(seed_b), cfg)
    a0, b0 = start_a * SUBSAMPLE, start_b * SUBSAMPLE
    view_a = LineImage(image.id, aug_a[:, a0:a0 + crop_width])
    view_b = LineImage(image.id, aug_b[:, b0:b0 + crop_width])
    overlap = (max(0, s), min(c, c + s))
    return ViewPair(view_a, view_b, s, overlap, start_a)
