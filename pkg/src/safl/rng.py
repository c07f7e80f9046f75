"""Counter-based random streams keyed by (seed, purpose, round, client).

Every consumer of randomness asks for its own stream, so drawing more
numbers in one place never shifts the numbers seen anywhere else.  This is
what makes ``run_safari(q=1)`` and ``run_fedavg`` bit-identical: the coin
stream is disjoint from the participation and noise streams.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "coin": 0,
    "participation": 1,
    "client-noise": 2,
    "server-noise": 3,
    "init": 4,
    "data": 5,
    "trial": 6,
    "partition": 7,
}

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1


def stream(seed: int, purpose: str, round: int = 0, client: int = 0) -> np.random.Generator:
    """Return a Philox generator for one (seed, purpose, round, client) key.

    The seed and purpose/client pair form the 128-bit Philox key; the round
    index occupies the third counter word, so draws within a stream (which
    advance the low word) cannot run into the next round's block.
    """
    try:
        tag = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown stream purpose {purpose!r}") from None
    if round < 0 or client < 0:
        raise ValueError("round and client must be non-negative")
    key = [int(seed) & _MASK64, (tag << 32) | (int(client) & _MASK32)]
    counter = [0, 0, int(round) & _MASK64, 0]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
