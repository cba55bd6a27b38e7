"""Manifest + raw-buffer container files.

All on-disk formats in this package (rig, lattice cache, checkpoints,
exported assets) share one convention: a JSON manifest that names a sibling
binary file and describes every buffer in it (dtype, shape, byte offset),
plus format-specific metadata. Buffers are stored little-endian, packed
back to back in manifest order. Reading back and re-writing a container
reproduces the binary bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ALLOWED_DTYPES = {"<f4", "<f8", "<i4", "<i8", "<u1"}


class ContainerError(Exception):
    """Malformed or truncated container file."""


class VersionError(ContainerError):
    """Container format version does not match what this code writes."""


def write_container(
    json_path: str | Path,
    fmt: str,
    version: int,
    meta: dict,
    buffers: dict[str, np.ndarray],
    bin_name: str | None = None,
) -> None:
    json_path = Path(json_path)
    if bin_name is None:
        bin_name = json_path.stem + ".bin"
    table = {}
    offset = 0
    blobs = []
    for name, arr in buffers.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype.str not in ALLOWED_DTYPES:
            raise ContainerError(f"buffer {name!r} has unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table[name] = {
            "dtype": dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        }
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": fmt,
        "version": version,
        "binary": bin_name,
        "buffers": table,
    }
    manifest.update(meta)
    with open(json_path.parent / bin_name, "wb") as f:
        for b in blobs:
            f.write(b)
    with open(json_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=False)
        f.write("\n")


def read_container(
    json_path: str | Path, fmt: str, version: int
) -> tuple[dict, dict[str, np.ndarray]]:
    json_path = Path(json_path)
    try:
        with open(json_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ContainerError(f"{json_path}: malformed manifest at byte {e.pos}: {e.msg}") from e
    if manifest.get("format") != fmt:
        raise ContainerError(
            f"{json_path}: expected format {fmt!r}, found {manifest.get('format')!r}"
        )
    if manifest.get("version") != version:
        raise VersionError(
            f"{json_path}: format version {manifest.get('version')} not supported "
            f"(this build reads version {version})"
        )
    bin_path = json_path.parent / manifest["binary"]
    raw = bin_path.read_bytes()
    buffers = {}
    for name, entry in manifest["buffers"].items():
        off, nbytes = entry["offset"], entry["nbytes"]
        if off + nbytes > len(raw):
            raise ContainerError(
                f"{bin_path}: buffer {name!r} needs bytes [{off}, {off + nbytes}) "
                f"but file has only {len(raw)} bytes (truncated?)"
            )
        arr = np.frombuffer(raw[off : off + nbytes], dtype=np.dtype(entry["dtype"]))
        buffers[name] = arr.reshape(entry["shape"]).copy()
    return manifest, buffers
