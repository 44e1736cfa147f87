"""Bit-exact model checkpoints.

Layout: magic bytes ``MSCF``, one format-version byte, a little-endian
uint32 length, a UTF-8 JSON manifest of that length (network config plus
the ordered tensor names and shapes), then the raw tensors as little-endian
float32 in manifest order. Saving and loading a float32 model round-trips
every bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ArgumentError, FormatError
from .network import ModelParams, NetworkConfig, build_model, named_tensors

MAGIC = b"MSCF"
VERSION = 1


def save_params(params: ModelParams, path) -> None:
    tensors = named_tensors(params)
    manifest = {
        "config": params.config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        head = fh.read(5)
        if len(head) < 5 or head[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic bytes")
        if head[4] != VERSION:
            raise FormatError(f"{path}: unsupported format version {head[4]}")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise FormatError(f"{path}: truncated manifest length")
        (mlen,) = struct.unpack("<I", raw_len)
        blob = fh.read(mlen)
        if len(blob) < mlen:
            raise FormatError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
            config = NetworkConfig.from_dict(manifest["config"])
            entries = manifest["tensors"]
        except (ValueError, KeyError, TypeError, ArgumentError) as exc:
            raise FormatError(f"{path}: unreadable manifest ({exc})") from exc

        params = build_model(config, seed=0)
        expected = named_tensors(params)
        if len(entries) != len(expected):
            raise FormatError(
                f"{path}: manifest lists {len(entries)} tensors, "
                f"config implies {len(expected)}"
            )
        for entry, (name, arr) in zip(entries, expected):
            if entry.get("name") != name or tuple(entry.get("shape", ())) != arr.shape:
                raise FormatError(
                    f"{path}: manifest entry {entry} does not match "
                    f"expected {name} {arr.shape}"
                )
            nbytes = arr.size * 4
            raw = fh.read(nbytes)
            if len(raw) < nbytes:
                raise FormatError(f"{path}: truncated tensor data for {name}")
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor data")
    return params
