"""Stochastic view generation for contrastive pretraining.

Operations run in a fixed order: color jitter, rotation, gaussian blur,
grayscale, horizontal flip. All randomness comes from the supplied
``numpy.random.Generator`` so a view is reproducible from the generator state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentationPolicy:
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue: tuple[float, float] = (-0.1, 0.1)
    jitter_p: float = 0.8
    rotation: tuple[float, float] = (0.0, 30.0)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    grayscale_p: float = 0.2
    hflip: bool = False
    hflip_p: float = 0.5

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue", "rotation", "blur_sigma"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise ConfigError(f"augmentation range {name} is not ordered: {lo} > {hi}")
            setattr(self, name, (lo, hi))
        for name in ("jitter_p", "grayscale_p", "hflip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.blur_sigma[0] < 0:
            raise ConfigError("blur_sigma must be non-negative")

    @classmethod
    def identity(cls) -> AugmentationPolicy:
        return cls(jitter_p=0.0, rotation=(0.0, 0.0), blur_sigma=(0.0, 0.0), grayscale_p=0.0, hflip=False)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _grayscale(img: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA.astype(img.dtype), img, axes=(0, 0))


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    choices = [
        np.stack([v, t, p]), np.stack([q, v, p]), np.stack([p, v, t]),
        np.stack([p, q, v]), np.stack([t, p, v]), np.stack([v, p, q]),
    ]
    out = np.zeros_like(hsv)
    for k, c in enumerate(choices):
        out = np.where(i == k, c, out)
    return out


def color_jitter(img: np.ndarray, b: float, c: float, s: float, h: float) -> np.ndarray:
    img = np.clip(img * b, 0.0, 1.0)
    gray_mean = (_grayscale(img) if img.shape[0] == 3 else img[0]).mean()
    img = np.clip((img - gray_mean) * c + gray_mean, 0.0, 1.0)
    if img.shape[0] == 3:
        gray = _grayscale(img)[None]
        img = np.clip(gray + s * (img - gray), 0.0, 1.0)
        if h != 0.0:
            hsv = _rgb_to_hsv(img)
            hsv[0] = (hsv[0] + h) % 1.0
            img = _hsv_to_rgb(hsv)
    return img


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Return one augmented view of a C×H×W image with values in [0, 1]."""
    img = np.asarray(image)
    dtype = img.dtype
    img = img.astype(np.float64)

    # every draw happens unconditionally so the stream position is policy-independent
    u_jitter = rng.random()
    factors = (
        rng.uniform(*policy.brightness), rng.uniform(*policy.contrast),
        rng.uniform(*policy.saturation), rng.uniform(*policy.hue),
    )
    angle = rng.uniform(*policy.rotation)
    sigma = rng.uniform(*policy.blur_sigma)
    u_gray = rng.random()
    u_flip = rng.random()

    if u_jitter < policy.jitter_p:
        img = color_jitter(img, *factors)
    if angle != 0.0 and img.shape[1] > 1 and img.shape[2] > 1:
        img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    if sigma > 0.0:
        img = ndimage.gaussian_filter(img, sigma=(0.0, sigma, sigma), mode="reflect")
    if u_gray < policy.grayscale_p and img.shape[0] == 3:
        img = np.broadcast_to(_grayscale(img), img.shape).copy()
    if policy.hflip and u_flip < policy.hflip_p:
        img = img[:, :, ::-1]
    return np.clip(img, 0.0, 1.0).astype(dtype, copy=False)


def augment_batch(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, policy, rng) for img in images])
