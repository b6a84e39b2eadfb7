"""Single master seed, keyed-hash derived sub-seeds everywhere else."""
from __future__ import annotations

import hashlib


def derive_seed(master: int, *key: object) -> int:
    """Deterministic 63-bit sub-seed from a master seed and a string-able key."""
    tag = ":".join([str(master), *[str(k) for k in key]])
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
