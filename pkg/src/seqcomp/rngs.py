"""Deterministic random-stream derivation.

All randomness in the package flows through counter-style streams derived
from a global seed and a tuple of string/int tags, e.g.
``stream(seed, "aug", epoch, sample_index, "key")``. Streams are
independent of evaluation order, so batches can be prepared in parallel
and runs can resume mid-stream without storing generator state.
"""

import hashlib

import numpy as np


def _digest(seed, tags):
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for t in tags:
        h.update(b"|")
        h.update(str(t).encode())
    return h.digest()


def stream(seed, *tags):
    """A numpy Generator keyed on (seed, *tags); stable across runs."""
    key = np.frombuffer(_digest(seed, tags)[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substream_seed(seed, *tags):
    """A derived 63-bit integer seed, for handing to other components."""
    return int.from_bytes(_digest(seed, tags)[:8], "little") >> 1
