"""Whole-scene inference: normalization, overlapped tiling, stitching,
binarization, and mask merging.

A scene is split into overlapping network-sized patches, each patch is
predicted in eval mode, and overlapping predictions are merged per pixel
with the maximum. Both continuous maps (cloud, shadow) are thresholded and
combined into a single mask where cloud outranks shadow. Because max is
order-independent, the mask is bitwise identical however the tiles are
scheduled, so tile inference may run on any number of threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ContractError, ShapeError
from .network import ModelParams, model_forward

CLEAR = 0
SHADOW = 128
CLOUD = 255


@dataclass
class RasterImage:
    """Band-planar multiband scene; values (bands, h, w)."""

    bands: int
    h: int
    w: int
    values: np.ndarray
    nodata_mask: np.ndarray | None = None  # True where pixels are invalid

    def __post_init__(self):
        if self.values.shape != (self.bands, self.h, self.w):
            raise ShapeError(
                f"values shape {self.values.shape} != ({self.bands},{self.h},{self.w})"
            )
        if self.nodata_mask is not None and self.nodata_mask.shape != (self.h, self.w):
            raise ShapeError("nodata mask must be one (h, w) plane")

    @classmethod
    def from_array(cls, values: np.ndarray, nodata_mask=None) -> "RasterImage":
        b, h, w = values.shape
        return cls(bands=b, h=h, w=w, values=values, nodata_mask=nodata_mask)


@dataclass
class MaskRaster:
    """Label plane with values {0 clear, 128 shadow, 255 cloud}."""

    labels: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        bad = ~np.isin(self.labels, (CLEAR, SHADOW, CLOUD))
        if bad.any():
            raise ArgumentError(
                f"mask contains {int(bad.sum())} pixels outside {{0,128,255}}"
            )

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class InferenceConfig:
    threshold: float = 0.5
    patch: int = 256
    min_overlap: int = 32

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ArgumentError(f"threshold must be in (0,1), got {self.threshold}")
        if self.patch < 8 or self.patch % 8:
            raise ArgumentError(f"patch must be a positive multiple of 8, got {self.patch}")
        if not (0 < self.min_overlap < self.patch):
            raise ArgumentError("min_overlap must be in (0, patch)")


@dataclass
class TileGrid:
    patch: int
    min_overlap: int
    origins: list  # row-major (row, col) tile corners


def normalize_max(img: RasterImage) -> RasterImage:
    """Divide each band by its own maximum over valid pixels.

    All-zero (or non-positive) bands map to all zeros; the result is
    clipped to [0, 1]. Idempotent for already-normalized imagery.
    """
    values = img.values.astype(np.float32, copy=True)
    for b in range(img.bands):
        band = values[b]
        sel = band if img.nodata_mask is None else band[~img.nodata_mask]
        peak = sel.max() if sel.size else 0.0
        if peak > 0:
            np.clip(band / peak, 0.0, 1.0, out=values[b])
        else:
            values[b] = 0.0
    return RasterImage(img.bands, img.h, img.w, values, img.nodata_mask)


def linear_stretch(img: RasterImage, gains, offsets) -> RasterImage:
    """Per-band affine stretch clamped to [0, 1]: v' = clip(gain*v + offset)."""
    gains = np.asarray(gains, dtype=np.float32)
    offsets = np.asarray(offsets, dtype=np.float32)
    if gains.shape != (img.bands,) or offsets.shape != (img.bands,):
        raise ArgumentError(
            f"need one gain and offset per band ({img.bands}), "
            f"got {gains.shape} and {offsets.shape}"
        )
    values = np.clip(
        img.values * gains[:, None, None] + offsets[:, None, None], 0.0, 1.0
    ).astype(np.float32)
    return RasterImage(img.bands, img.h, img.w, values, img.nodata_mask)


def _axis_origins(dim: int, patch: int, stride: int) -> list:
    if dim <= patch:
        return [0]
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def tile_plan(h: int, w: int, cfg: InferenceConfig) -> TileGrid:
    """Overlapping tile origins covering every pixel, row-major order.

    Origins advance by (patch - min_overlap); the final origin per axis is
    clamped to dim - patch so the last tile hugs the border. Images smaller
    than a patch yield a single origin (the caller pads).
    """
    if h < 8 or w < 8:
        raise ArgumentError(f"image must be at least 8x8, got {h}x{w}")
    stride = cfg.patch - cfg.min_overlap
    rows = _axis_origins(h, cfg.patch, stride)
    cols = _axis_origins(w, cfg.patch, stride)
    origins = [(r, c) for r in rows for c in cols]
    return TileGrid(patch=cfg.patch, min_overlap=cfg.min_overlap, origins=origins)


def stitch_max(tile_outputs, h: int, w: int) -> np.ndarray:
    """Per-pixel maximum over covering tiles.

    tile_outputs is a sequence of ((row, col), maps) with maps shaped
    (channels, patch, patch); returns (channels, h, w).
    """
    tile_outputs = list(tile_outputs)
    if not tile_outputs:
        raise ContractError("stitch_max received no tiles")
    channels = tile_outputs[0][1].shape[0]
    acc = np.full((channels, h, w), -np.inf, dtype=np.float32)
    for (r, c), maps in tile_outputs:
        p = maps.shape[-1]
        view = acc[:, r:r + p, c:c + p]
        np.maximum(view, maps[:, : view.shape[1], : view.shape[2]], out=view)
    if not np.isfinite(acc).all():
        raise ContractError("stitch_max left uncovered pixels")
    return acc


def binarize(plane: np.ndarray, t: float) -> np.ndarray:
    """Clamp to [0, 1] and threshold: positive iff value >= t."""
    if not (0.0 < t < 1.0):
        raise ArgumentError(f"threshold must be in (0,1), got {t}")
    return np.clip(plane, 0.0, 1.0) >= t


def merge_masks(cloud: np.ndarray, shadow: np.ndarray) -> MaskRaster:
    """Combine boolean planes; cloud wins where both are set."""
    cloud = np.asarray(cloud, dtype=bool)
    shadow = np.asarray(shadow, dtype=bool)
    if cloud.shape != shadow.shape:
        raise ShapeError(f"plane shapes differ: {cloud.shape} vs {shadow.shape}")
    labels = np.where(cloud, CLOUD, np.where(shadow, SHADOW, CLEAR)).astype(np.uint8)
    return MaskRaster(labels=labels)


def _reflect_pad_to(values: np.ndarray, ph: int, pw: int) -> np.ndarray:
    _, h, w = values.shape
    if h == ph and w == pw:
        return values
    return np.pad(values, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect")


def predict_image(params: ModelParams, img: RasterImage, icfg: InferenceConfig,
                  normalize: bool = True, threads: int = 1):
    """Full-scene prediction.

    Returns (MaskRaster, raw maps (2, h, w)). The raw stitched maps allow
    re-thresholding without re-running inference: binarizing them at a new
    t and merging reproduces a fresh prediction at that t exactly.
    """
    if img.bands != params.config.in_channels:
        raise ArgumentError(
            f"image has {img.bands} bands, model expects {params.config.in_channels}"
        )
    if normalize:
        img = normalize_max(img)
    ph = max(img.h, icfg.patch)
    pw = max(img.w, icfg.patch)
    values = _reflect_pad_to(img.values.astype(np.float32, copy=False), ph, pw)
    grid = tile_plan(ph, pw, icfg)

    def run_tile(origin):
        r, c = origin
        x = values[None, :, r:r + icfg.patch, c:c + icfg.patch]
        y, _ = model_forward(x, params, "eval")
        return origin, y[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run_tile, grid.origins))
    else:
        outputs = [run_tile(o) for o in grid.origins]

    raw = stitch_max(outputs, ph, pw)[:, : img.h, : img.w]
    cloud = binarize(raw[0], icfg.threshold)
    shadow = binarize(raw[1], icfg.threshold)
    mask = merge_masks(cloud, shadow)
    if img.nodata_mask is not None:
        mask.labels[img.nodata_mask] = CLEAR
        mask.valid = ~img.nodata_mask
    return mask, raw
