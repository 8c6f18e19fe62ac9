"""Label-preserving image augmentations for [3, H, W] float images in [0, 1].

Every transform fires independently with its own probability; the order
is geometric, then photometric, then synthetic artifacts, then erasing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

__all__ = [
    "AugmentConfig",
    "augment",
    "augment_batch",
    "hflip",
    "vflip",
    "rotate",
    "random_resized_crop",
    "perspective",
    "color_jitter",
    "gaussian_blur",
    "autocontrast",
    "adjust_sharpness",
    "adjust_gamma",
    "posterize",
    "solarize",
    "random_erase",
]

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentConfig:
    p_crop: float = 0.3
    crop_scale: tuple[float, float] = (0.8, 1.0)
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    rotate_degrees: float = 180.0
    p_perspective: float = 0.2
    perspective_distortion: float = 0.1
    p_color_jitter: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    p_blur: float = 0.1
    blur_sigma: tuple[float, float] = (0.3, 0.8)
    p_autocontrast: float = 0.1
    p_sharpness: float = 0.2
    sharpness_factor: tuple[float, float] = (0.5, 1.5)
    p_gamma: float = 0.2
    gamma: tuple[float, float] = (0.8, 1.25)
    p_posterize: float = 0.1
    posterize_bits: tuple[int, int] = (5, 6)
    p_solarize: float = 0.05
    solarize_threshold: float = 0.9
    p_erase: float = 0.02
    erase_area: tuple[float, float] = (0.02, 0.05)
    erase_aspects: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("p_") and not 0.0 <= value <= 1.0:
                raise ValueError(f"{f.name} must lie in [0, 1], got {value}")
            if isinstance(value, (tuple, list)) and len(value) == 2 and value[0] > value[1]:
                raise ValueError(f"{f.name} range is inverted: {value}")

    @classmethod
    def disabled(cls) -> AugmentConfig:
        return cls(**{f.name: 0.0 for f in fields(cls) if f.name.startswith("p_")})

    def as_dict(self) -> dict:
        return asdict(self)


# -- geometric ----------------------------------------------------------------

def hflip(image):
    return image[:, :, ::-1].copy()


def vflip(image):
    return image[:, ::-1, :].copy()


def _warp(image, matrix, offset):
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="reflect") for ch in image
    ])


def rotate(image, degrees):
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    matrix = np.array([[c, -s], [s, c]])
    centre = (np.array(image.shape[1:]) - 1) / 2.0
    return _warp(image, matrix, centre - matrix @ centre)


def random_resized_crop(image, scale, rng):
    """Crop a random square covering ``scale`` of the area and resize it back."""
    h, w = image.shape[1:]
    side = np.sqrt(rng.uniform(*scale))
    ch, cw = side * h, side * w
    top = rng.uniform(0.0, h - ch)
    left = rng.uniform(0.0, w - cw)
    matrix = np.diag([ch / h, cw / w])
    return _warp(image, matrix, np.array([top, left]))


def perspective(image, distortion, rng):
    """Projective warp that moves each corner by up to ``distortion`` of the side."""
    h, w = image.shape[1:]
    dst = np.array([[0, 0], [0, w - 1], [h - 1, 0], [h - 1, w - 1]], dtype=np.float64)
    src = dst + rng.uniform(-distortion, distortion, (4, 2)) * np.array([h, w])
    # homography mapping output corners to input corners
    rows = []
    for (y, x), (v, u) in zip(dst, src):
        rows.append([y, x, 1, 0, 0, 0, -v * y, -v * x, v])
        rows.append([0, 0, 0, y, x, 1, -u * y, -u * x, u])
    A = np.array(rows)
    H = np.linalg.solve(A[:, :8], A[:, 8])
    H = np.append(H, 1.0).reshape(3, 3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = H @ np.stack([yy.ravel(), xx.ravel(), np.ones(h * w)])
    coords = (pts[:2] / pts[2]).reshape(2, h, w)
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="reflect") for ch in image])


# -- photometric --------------------------------------------------------------

def _gray(image):
    return np.tensordot(_LUMA, image, axes=1)


def color_jitter(image, brightness, contrast, saturation, rng):
    out = image * rng.uniform(1 - brightness, 1 + brightness)
    mean = _gray(out).mean()
    out = (out - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
    gray = _gray(out)[None]
    out = (out - gray) * rng.uniform(1 - saturation, 1 + saturation) + gray
    return out


def gaussian_blur(image, sigma):
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect")


def autocontrast(image):
    lo = image.min(axis=(1, 2), keepdims=True)
    hi = image.max(axis=(1, 2), keepdims=True)
    span = np.where(hi - lo > 1e-8, hi - lo, 1.0)
    return np.where(hi - lo > 1e-8, (image - lo) / span, image)


def adjust_sharpness(image, factor):
    """Blend with a smoothed copy: factor 0 gives the blurred image, 1 the original."""
    smooth = ndimage.uniform_filter(image, size=(1, 3, 3), mode="reflect")
    return smooth + factor * (image - smooth)


def adjust_gamma(image, gamma):
    return np.clip(image, 0.0, 1.0) ** gamma


def posterize(image, bits):
    levels = 2 ** int(bits)
    return np.floor(np.clip(image, 0.0, 1.0) * (levels - 1) + 0.5) / (levels - 1)


def solarize(image, threshold):
    return np.where(image >= threshold, 1.0 - image, image)


def random_erase(image, area, aspects, rng, fill=None):
    """Overwrite one rectangle with a constant; returns the image and the erased fraction."""
    h, w = image.shape[1:]
    target = rng.uniform(*area) * h * w
    aspect = aspects[rng.integers(len(aspects))]
    eh = int(np.clip(round(np.sqrt(target * aspect)), 1, h))
    ew = int(np.clip(round(np.sqrt(target / aspect)), 1, w))
    top = rng.integers(0, h - eh + 1)
    left = rng.integers(0, w - ew + 1)
    out = image.copy()
    out[:, top:top + eh, left:left + ew] = rng.uniform(0.0, 1.0) if fill is None else fill
    return out, eh * ew / (h * w)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = image
    if rng.random() < cfg.p_crop:
        out = random_resized_crop(out, cfg.crop_scale, rng)
    if rng.random() < cfg.p_hflip:
        out = hflip(out)
    if rng.random() < cfg.p_vflip:
        out = vflip(out)
    if rng.random() < cfg.p_rotate:
        out = rotate(out, rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees))
    if rng.random() < cfg.p_perspective:
        out = perspective(out, cfg.perspective_distortion, rng)
    if rng.random() < cfg.p_color_jitter:
        out = color_jitter(out, cfg.brightness, cfg.contrast, cfg.saturation, rng)
    if rng.random() < cfg.p_blur:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.p_autocontrast:
        out = autocontrast(out)
    if rng.random() < cfg.p_sharpness:
        out = adjust_sharpness(out, rng.uniform(*cfg.sharpness_factor))
    if rng.random() < cfg.p_gamma:
        out = adjust_gamma(out, rng.uniform(*cfg.gamma))
    if rng.random() < cfg.p_posterize:
        out = posterize(out, rng.integers(cfg.posterize_bits[0], cfg.posterize_bits[1] + 1))
    if rng.random() < cfg.p_solarize:
        out = solarize(out, cfg.solarize_threshold)
    if rng.random() < cfg.p_erase:
        out, _ = random_erase(out, cfg.erase_area, cfg.erase_aspects, rng)
    return np.clip(out, 0.0, 1.0)


def augment_batch(images: np.ndarray, cfg: AugmentConfig | None, rng: np.random.Generator) -> np.ndarray:
    if cfg is None:
        return images
    return np.stack([augment(img, cfg, rng) for img in images])
