"""Named random substreams derived from one integer seed."""

import zlib

import numpy as np


def substream(seed, name, *keys):
    """Return a Generator for the named stream, e.g. ``substream(7, "synth", 3)``.

    Streams with different names or keys are statistically independent, and
    the mapping does not depend on Python's per-process string hashing.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
