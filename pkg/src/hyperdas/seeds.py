"""Named sub-seeds derived from one master seed.

``sub_seed(master, name)`` is the first 8 bytes (little-endian) of
``sha256(f"{master}/{name}")``, masked to 63 bits. Components use the names
``data``, ``init``, ``shuffle`` and ``target``.
"""
from __future__ import annotations

import hashlib


def sub_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{master}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
