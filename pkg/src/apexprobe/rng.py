"""Counter-based random streams.

Every noise draw in the toolkit comes from a stream keyed by
(seed, path...) where the path encodes trial index, perturbation site and
layer index. Streams are derived by hashing the key into a Philox counter
generator, so draws are independent of evaluation order and safe to use
from parallel workers without coordination.
"""

import hashlib

import numpy as np


def substream(seed: int, *path) -> np.random.Generator:
    """Derive an independent generator from a seed and a key path.

    The same (seed, path) always yields the same stream; distinct paths
    yield streams with independent Philox keys.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for part in path:
        # tag with type and length so ("a", 1) can never collide with ("a1",)
        data = str(part).encode()
        h.update(b"i" if isinstance(part, int) else b"s")
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))
