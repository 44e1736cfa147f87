"""Deterministic toy cloudy-scene generator with exact ground truth.

A scene is smoothed-noise terrain with a handful of bright Gaussian-profile
cloud blobs; every cloud casts a darkened shadow blob at one scene-wide
offset (sun geometry), except where a cloud occludes it. The mask labels
follow the painted geometry exactly, with cloud taking priority over
shadow, so these scenes support overfit runs and pipeline tests without
any satellite data.

Blobs have soft Gaussian fringes outside the labeled disc, so thin faint
edges exist and binarization thresholds actually change the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ArgumentError
from .pipeline import CLOUD, SHADOW, MaskRaster, RasterImage

# alpha >= ALPHA_EDGE defines the labeled disc of a blob
ALPHA_EDGE = 0.5


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    bands: int = 3
    cloud_count: tuple = (1, 4)
    cloud_radius: tuple = (4.0, 9.0)
    shadow_offset: tuple = (14, 14)
    cloud_brightness: tuple = (0.88, 1.0)
    background_range: tuple = (0.3, 0.6)
    texture_scale: float = 8.0
    shadow_depth: float = 0.28
    edge_sharpness: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.height % 8 or self.width % 8:
            raise ArgumentError("scene height and width must be divisible by 8")
        if self.bands < 1:
            raise ArgumentError("bands must be >= 1")
        lo, hi = self.cloud_count
        if lo < 0 or hi < lo:
            raise ArgumentError(f"bad cloud_count range {self.cloud_count}")
        rlo, rhi = self.cloud_radius
        if rlo < 2 or rhi < rlo:
            raise ArgumentError("cloud radii must be >= 2 and ordered")
        dy, dx = self.shadow_offset
        if max(abs(dy), abs(dx)) >= min(self.height, self.width) / 2:
            raise ArgumentError("shadow offset must be < half the scene size")
        blo, bhi = self.cloud_brightness
        if not (0.85 <= blo <= bhi <= 1.0):
            raise ArgumentError("cloud brightness must lie in [0.85, 1.0]")
        glo, ghi = self.background_range
        if not (0.1 <= glo < ghi <= 0.6):
            raise ArgumentError("background range must lie in [0.1, 0.6]")
        if not (0.0 < self.shadow_depth <= glo):
            raise ArgumentError("shadow depth must be positive and <= background floor")
        if self.texture_scale <= 0:
            raise ArgumentError("texture scale must be positive")
        if self.edge_sharpness < 0.5:
            raise ArgumentError("edge sharpness must be >= 0.5")


def _blob_alpha(h, w, cy, cx, radius, sharpness) -> np.ndarray:
    """Super-Gaussian blob profile: 1 at the center, ALPHA_EDGE exactly at
    ``radius``. Sharpness 1 is a plain Gaussian; larger values narrow the
    soft fringe outside the labeled disc."""
    yy = np.arange(h)[:, None] - cy
    xx = np.arange(w)[None, :] - cx
    d2 = (yy * yy + xx * xx) / (radius * radius)
    return ALPHA_EDGE ** (d2 ** sharpness)


def _shift(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift without wraparound, vacated area filled with zeros."""
    out = np.zeros_like(plane)
    h, w = plane.shape
    ys, yd = (0, dy) if dy >= 0 else (-dy, 0)
    xs, xd = (0, dx) if dx >= 0 else (-dx, 0)
    hh = h - abs(dy)
    ww = w - abs(dx)
    if hh > 0 and ww > 0:
        out[yd:yd + hh, xd:xd + ww] = plane[ys:ys + hh, xs:xs + ww]
    return out


def generate_scene(spec: SceneSpec):
    """One scene: returns (RasterImage in [0,1], MaskRaster ground truth)."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.height, spec.width
    glo, ghi = spec.background_range

    bands = np.empty((spec.bands, h, w), dtype=np.float32)
    for b in range(spec.bands):
        noise = gaussian_filter(rng.random((h, w)), sigma=spec.texture_scale)
        span = noise.max() - noise.min()
        if span < 1e-12:
            noise = np.full((h, w), 0.5)
        else:
            noise = (noise - noise.min()) / span
        bands[b] = glo + noise * (ghi - glo)

    count = int(rng.integers(spec.cloud_count[0], spec.cloud_count[1] + 1))
    alpha = np.zeros((h, w))
    brightness = np.zeros((h, w))
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(*spec.cloud_radius)
        level = rng.uniform(*spec.cloud_brightness)
        a = _blob_alpha(h, w, cy, cx, radius, spec.edge_sharpness)
        take = a > alpha
        brightness = np.where(take, level, brightness)
        alpha = np.maximum(alpha, a)

    dy, dx = spec.shadow_offset
    shadow_alpha = _shift(alpha, dy, dx)

    cloud_mask = alpha >= ALPHA_EDGE
    shadow_mask = (shadow_alpha >= ALPHA_EDGE) & ~cloud_mask

    # full shadow depth inside the labeled disc, soft linear fringe outside
    shade = spec.shadow_depth * np.minimum(shadow_alpha / ALPHA_EDGE, 1.0)
    paint = np.minimum(alpha / ALPHA_EDGE, 1.0)
    for b in range(spec.bands):
        v = bands[b] - shade
        v = v + (brightness - v) * paint
        bands[b] = np.clip(v, 0.0, 1.0)

    labels = np.zeros((h, w), dtype=np.uint8)
    labels[shadow_mask] = SHADOW
    labels[cloud_mask] = CLOUD
    image = RasterImage(bands=spec.bands, h=h, w=w, values=bands)
    return image, MaskRaster(labels=labels)


def scene_to_sample(image: RasterImage, mask: MaskRaster):
    """(1, C, h, w) input and (1, 2, h, w) binary target pair."""
    x = image.values[None].astype(np.float32)
    y = np.stack([mask.labels == CLOUD, mask.labels == SHADOW])
    return x, y[None].astype(np.float32)


def train_split(n: int) -> int:
    """How many of n scenes go to training under the 80/20 split."""
    if n < 2:
        raise ArgumentError("need at least 2 scenes to split train/val")
    return max(1, min(n - 1, int(n * 0.8)))


def iter_scenes(n: int, spec: SceneSpec, seed: int):
    """Yield (index, image, mask) for n scenes with disjoint seeds.

    Scene seeds are consecutive offsets from the master seed, so splits
    never share a seed and the whole dataset is reproducible.
    """
    for i in range(n):
        scene_spec = SceneSpec(**{**spec.__dict__, "seed": seed + i})
        yield i, *generate_scene(scene_spec)


def generate_dataset(n: int, spec: SceneSpec, seed: int):
    """n scenes split 80/20 into train and held-out sample lists."""
    n_train = train_split(n)
    samples = [scene_to_sample(img, mask) for _, img, mask in iter_scenes(n, spec, seed)]
    return samples[:n_train], samples[n_train:]
