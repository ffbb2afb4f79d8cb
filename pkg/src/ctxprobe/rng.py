"""Named, counter-based random streams.

Every stochastic draw in the simulator comes from a Philox stream keyed by
sha256(seed, *labels). Philox is counter-based, so streams are independent,
cross-platform bit-stable, and insensitive to the order in which work items
run; labelling makes each draw reproducible in isolation.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> int:
    """Derive a 128-bit Philox key from a seed and a sequence of labels."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:16], "little")


def named_stream(seed: int, *labels) -> np.random.Generator:
    """A fresh Generator for the (seed, labels) stream, starting at counter 0."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))
