"""Stable derivation of RNG seeds from structured labels.

Python's built-in ``hash`` is salted per process, so seeds derived from it
would break run-to-run determinism; this hashes the repr instead.
"""

import hashlib


def stable_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")
