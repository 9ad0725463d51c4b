"""3D binary morphology and the core / rim / peritumoral zone split."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

CORE_RADIUS = 3
PERI_RADIUS = 5


@lru_cache(maxsize=None)
def ball_offsets(radius: int) -> np.ndarray:
    """Integer offsets ``o`` with ``|o|_2 <= radius``, shape (n, 3)."""
    if radius < 1 or int(radius) != radius:
        raise ValueError(f"radius must be a positive integer, got {radius}")
    r = int(radius)
    g = np.arange(-r, r + 1)
    o = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    o = o[(o**2).sum(axis=1) <= r * r]
    o.setflags(write=False)
    return o


def _shifted(mask: np.ndarray, off) -> np.ndarray:
    """``out[v] = mask[v + off]`` with out-of-volume reads as False."""
    out = np.zeros_like(mask)
    src, dst = [], []
    for o, n in zip(off, mask.shape):
        if abs(o) >= n:
            return out
        src.append(slice(max(o, 0), n + min(o, 0)))
        dst.append(slice(max(-o, 0), n - max(o, 0)))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _check(mask):
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a Euclidean ball; outside the volume counts as background."""
    mask = _check(mask)
    out = mask.copy()
    for off in ball_offsets(radius):
        if not out.any():
            break
        out &= _shifted(mask, off)
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean ball; no wraparound at the borders."""
    mask = _check(mask)
    out = mask.copy()
    for off in ball_offsets(radius):
        out |= _shifted(mask, off)
    return out


@dataclass(frozen=True)
class RoiZones:
    core: np.ndarray
    rim: np.ndarray
    peri: np.ndarray
    fallback: bool = False  # core was empty after erosion and was replaced by the mask

    def as_tuple(self):
        return self.core, self.rim, self.peri


def make_zones(mask: np.ndarray, core_radius: int = CORE_RADIUS, peri_radius: int = PERI_RADIUS) -> RoiZones:
    mask = _check(mask)
    if not mask.any():
        raise ValueError("cannot build zones from an empty tumor mask")
    core = erode(mask, core_radius)
    fallback = not core.any()
    if fallback:
        core = mask.copy()
    rim = mask & ~core
    peri = dilate(mask, peri_radius) & ~mask
    return RoiZones(core, rim, peri, fallback)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-wise OR over ``factor**3`` blocks."""
    mask = _check(mask)
    if factor < 1 or any(n % factor for n in mask.shape):
        raise ValueError(f"mask dims {mask.shape} not divisible by factor {factor}")
    if factor == 1:
        return mask.copy()
    h, w, d = (n // factor for n in mask.shape)
    return mask.reshape(h, factor, w, factor, d, factor).any(axis=(1, 3, 5))
