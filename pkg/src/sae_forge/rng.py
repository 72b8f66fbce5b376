"""Counter-based random streams keyed by (seed, purpose, index).

Every consumer of randomness asks for its own stream, so generation order and
parallel scheduling never change what a given sequence, mask or batch sees.
"""

import zlib

import numpy as np

ALGORITHM = "philox4x64"


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed, *keys):
    """Return an independent ``np.random.Generator`` for ``(seed, *keys)``.

    ``keys`` may mix strings (hashed with CRC32) and non-negative integers.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
