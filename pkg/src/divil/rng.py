"""Named, counter-based random streams.

Each ``(seed, name, *keys)`` triple maps to its own Philox generator, so
drawing more numbers from one stream never shifts another.
"""

import hashlib

import numpy as np

STREAMS = ("data", "init", "augment", "mask", "shuffle")


def _name_words(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed, name, *keys):
    """Return a fresh ``numpy.random.Generator`` for a named stream.

    ``keys`` are extra non-negative integers (step index, environment index)
    folded into the entropy.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and keys must be non-negative")
    entropy = [int(seed), *_name_words(name), *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
