"""Flat binary tensor container with a JSON manifest.

Binary layout (``<name>.bin``), all integers little-endian::

    magic      8 bytes   b"HDASCKPT"
    version    u32       1
    count      u32       number of entries
    entries    count x { name_len u32, name utf-8 bytes,
                         ndim u32, dims ndim x u32,
                         nbytes u64, payload nbytes bytes of float32 <f4 }

The manifest (``<name>.json``) lists, per entry, ``name``, ``shape``,
``offset`` (byte offset of the payload in the .bin file), ``nbytes`` and the
sha256 of the payload, plus the sha256 of the whole .bin file.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HDASCKPT"
VERSION = 1


class IntegrityError(RuntimeError):
    """A checkpoint does not match its manifest."""


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    """Write ``path.bin`` and ``path.json``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = bytearray()
    buf += MAGIC + struct.pack("<II", VERSION, len(tensors))
    entries = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = arr.tobytes()
        buf += struct.pack("<Q", len(payload))
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(buf),
                        "nbytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()})
        buf += payload
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(bytes(buf))
    manifest = {"format": "hdas-ckpt", "version": VERSION, "file": bin_path.name,
                "sha256": hashlib.sha256(buf).hexdigest(), "entries": entries}
    man_path = path.with_suffix(".json")
    man_path.write_text(json.dumps(manifest, indent=1))
    return man_path


def load(path: str | Path, verify: bool = True) -> dict[str, np.ndarray]:
    path = Path(path)
    bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".json")
    try:
        raw = bin_path.read_bytes()
        manifest = json.loads(man_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if verify and hashlib.sha256(raw).hexdigest() != manifest.get("sha256"):
        raise IntegrityError(f"checkpoint {bin_path} does not match its manifest hash")
    if raw[:8] != MAGIC:
        raise IntegrityError(f"{bin_path} is not a checkpoint container")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float32)
        pos += nbytes
    if verify:
        listed = {e["name"]: e for e in manifest["entries"]}
        if set(listed) != set(out):
            raise IntegrityError("manifest entry names differ from container contents")
        for name, arr in out.items():
            if list(arr.shape) != listed[name]["shape"]:
                raise IntegrityError(f"shape mismatch for {name}")
    return out
