"""Portable seeded random source (SplitMix64).

The generator is fully defined by its update function, so any
implementation reproduces the same stream bit-for-bit::

    state  <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z      <- state
    z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    output <- z ^ (z >> 31)

Floats in [0, 1) are ``(output >> 11) * 2**-53``. Because the k-th state is
``seed + k * GAMMA`` the stream can be produced in vectorised blocks.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar SplitMix64 finaliser on a Python int."""
    return int(_mix(np.array([value & MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent child seed from ``seed`` and integer keys."""
    s = mix64(seed ^ 0x5EED5EED5EED5EED)
    for k in keys:
        s = mix64((s + (int(k) + 1) * GAMMA) & MASK64)
    return s


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        states = steps + np.uint64(self.state)
        self.state = (self.state + n * GAMMA) & MASK64
        return _mix(states)

    def random(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, low: float, high: float, n: int | None = None):
        u = self.random(1 if n is None else n)
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def integers(self, high: int, n: int | None = None):
        """Integers in [0, high) by ``floor(u * high)``."""
        u = self.random(1 if n is None else n)
        out = np.minimum((u * high).astype(np.int64), high - 1)
        return int(out[0]) if n is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``, swapping i with floor(u*(i+1)) for i = n-1..1."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[step] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
