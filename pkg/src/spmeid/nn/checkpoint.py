"""Checkpoint container: magic "NNCKPT01", structured text header, a
name+shape manifest, then float32 little-endian weight blobs in
declaration order."""

from __future__ import annotations

import struct

import numpy as np

from ..errors import ConfigError

MAGIC = b"NNCKPT01"


def save_checkpoint(path, kind: str, header: dict, params: dict) -> None:
    """``header`` values must render to single-line str(); ``params`` is an
    ordered name -> array mapping."""
    head_lines = [f"kind = {kind}"]
    for key, value in header.items():
        text = str(value)
        if "\n" in text:
            raise ConfigError(f"header value for {key!r} must be single-line")
        head_lines.append(f"{key} = {text}")
    head_blob = ("\n".join(head_lines) + "\n").encode("utf-8")

    manifest_lines = []
    blobs = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest_lines.append(name + " " + "x".join(str(s) for s in arr.shape))
        blobs.append(arr.tobytes())
    manifest_blob = ("\n".join(manifest_lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head_blob)))
        fh.write(head_blob)
        fh.write(struct.pack("<I", len(manifest_blob)))
        fh.write(manifest_blob)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (kind, header dict of strings, ordered name -> float32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    off = 8
    (head_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    head_text = blob[off:off + head_len].decode("utf-8")
    off += head_len
    (man_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    man_text = blob[off:off + man_len].decode("utf-8")
    off += man_len

    header = {}
    for line in head_text.strip().splitlines():
        key, _, value = line.partition(" = ")
        header[key] = value
    kind = header.pop("kind", "")

    params = {}
    for line in man_text.strip().splitlines():
        name, _, shape_text = line.rpartition(" ")
        shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params[name] = arr.reshape(shape).copy()
    return kind, header, params
