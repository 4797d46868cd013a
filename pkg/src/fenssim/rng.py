"""Deterministic random streams.

Every consumer of randomness asks for a named stream derived from the
experiment seed, e.g. ``stream(seed, "partition")`` or
``stream(seed, "local-train", client_id)``.  Streams are Philox generators
(counter based), so two streams never share state and the order in which
workers draw from them cannot change any result.
"""

from __future__ import annotations

import zlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key part {part!r}")


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_token(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))
