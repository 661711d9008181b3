"""Named sub-seeds derived from one master seed."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for the path ``names`` under ``seed``.

    Independent of call order and process, so any stage can be replayed alone.
    """
    key = "/".join([str(int(seed)), *map(str, names)])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big") >> 1
