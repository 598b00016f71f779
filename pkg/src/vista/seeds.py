"""Stable seed derivation.

Every random decision in the pipeline draws from a seed derived with
``stable_hash`` so that results are reproducible across processes,
platforms and worker schedules (Python's builtin ``hash`` is salted per
process and cannot be used here).
"""

from __future__ import annotations

import hashlib

_MASK63 = (1 << 63) - 1


def stable_hash(*parts: int | str | bytes) -> int:
    """Collapse a tuple of ints/strings into a stable 63-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):  # bool is an int subclass; be explicit
            raise TypeError("bool seed parts are ambiguous")
        if isinstance(part, int):
            h.update(b"i")
            h.update(part.to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            data = part.encode("utf-8")
            h.update(b"s" + len(data).to_bytes(4, "little"))
            h.update(data)
        elif isinstance(part, bytes):
            h.update(b"b" + len(part).to_bytes(4, "little"))
            h.update(part)
        else:
            raise TypeError(f"unsupported seed part type: {type(part)!r}")
    return int.from_bytes(h.digest(), "little") & _MASK63
