"""On-disk formats: the .rsb raster pair and binary PGM masks.

An .rsb raster is a JSON header file ``{bands, height, width, dtype,
nodata?}`` next to a raw band-planar little-endian binary file at
``<path>.bin``. Supported dtypes: ``u8``, ``u16``, ``f32``. Values are
returned as float32 in their original scale; a ``nodata`` value marks
pixels invalid where every band equals it.

Masks travel as binary (P5) PGM with maxval 255 and the three label
values 0 / 128 / 255.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError
from .pipeline import MaskRaster, RasterImage

_DTYPES = {"u8": "u1", "u16": "<u2", "f32": "<f4"}


def write_rsb(path, values: np.ndarray, dtype: str = "f32", nodata=None) -> None:
    """Write a (bands, h, w) array as an .rsb header + .bin raw pair."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported rsb dtype {dtype!r}")
    bands, h, w = values.shape
    header = {"bands": bands, "height": h, "width": w, "dtype": dtype}
    if nodata is not None:
        header["nodata"] = nodata
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(header, fh)
        fh.write("\n")
    np.ascontiguousarray(values, dtype=_DTYPES[dtype]).tofile(str(path) + ".bin")


def read_rsb(path) -> RasterImage:
    """Read an .rsb pair into a RasterImage (values float32)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    try:
        bands = int(header["bands"])
        h = int(header["height"])
        w = int(header["width"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: header missing bands/height/width/dtype") from exc
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    bin_path = str(path) + ".bin"
    if not os.path.exists(bin_path):
        raise FormatError(f"{path}: missing data file {bin_path}")
    raw = np.fromfile(bin_path, dtype=_DTYPES[dtype])
    if raw.size != bands * h * w:
        raise FormatError(
            f"{bin_path}: has {raw.size} values, header implies {bands * h * w}"
        )
    values = raw.reshape(bands, h, w).astype(np.float32)
    nodata_mask = None
    if "nodata" in header:
        nodata_mask = np.all(values == float(header["nodata"]), axis=0)
    return RasterImage(bands=bands, h=h, w=w, values=values, nodata_mask=nodata_mask)


def write_pgm(path, plane: np.ndarray) -> None:
    """Write a uint8 plane as binary PGM (P5, maxval 255)."""
    plane = np.asarray(plane, dtype=np.uint8)
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(plane.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval <= 255) into a uint8 plane."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if not (0 < maxval < 256):
        raise FormatError(f"{path}: unsupported PGM maxval {maxval}")
    body = data[pos:pos + h * w]
    if len(body) < h * w:
        raise FormatError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_mask(path, mask: MaskRaster) -> None:
    write_pgm(path, mask.labels)


def read_mask(path) -> MaskRaster:
    plane = read_pgm(path)
    try:
        return MaskRaster(labels=plane)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
