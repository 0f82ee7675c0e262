"""PCG32 (XSH-RR 64/32) generator with a fixed, documented draw protocol.

Every random quantity in the package comes from this stream so that data
sets, batches, dropout masks and random initializations are reproducible
from a single integer seed:

* seeding follows ``pcg32_srandom_r(seed, STREAM)``;
* ``next_u64`` is ``(first_u32 << 32) | second_u32``;
* ``next_double`` is ``(next_u64 >> 11) * 2**-53``, in ``[0, 1)``;
* Gaussians use Box-Muller on consecutive double pairs ``(a, b)``:
  ``r = sqrt(-2 ln(1 - a))``, emitting ``r cos(2 pi b)`` then
  ``r sin(2 pi b)``; an odd request discards the trailing sine;
* ``bounded(n)`` rejects draws below ``(2**32 - n) % n`` and returns ``r % n``.

The array methods advance the LCG with a closed-form jump so large draws stay
fast; they produce exactly the same values as repeated scalar calls.
"""

from __future__ import annotations

import numpy as np

MULTIPLIER = 6364136223846793005
STREAM = 54
MASK64 = (1 << 64) - 1

_M64 = np.uint64(MULTIPLIER)


class PCG32:
    def __init__(self, seed: int, stream: int = STREAM):
        self.inc = ((stream << 1) | 1) & MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (seed & MASK64)) & MASK64
        self._step()

    def _step(self):
        self.state = (self.state * MULTIPLIER + self.inc) & MASK64

    @staticmethod
    def _output(old: int) -> int:
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def next_u32(self) -> int:
        old = self.state
        self._step()
        return self._output(old)

    def next_u64(self) -> int:
        hi = self.next_u32()
        return (hi << 32) | self.next_u32()

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def bounded(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 32) - n) % n
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % n

    def getstate(self) -> tuple:
        return (self.state, self.inc)

    def setstate(self, st: tuple):
        self.state, self.inc = st

    # vectorized draws

    def u32_array(self, n: int) -> np.ndarray:
        """Next ``n`` 32-bit outputs, identical to ``n`` calls of next_u32."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint32)
        # state_k = A_k * s0 + C_k (mod 2**64), A_k = a**k, C_k = c * sum_{i<k} a**i
        with np.errstate(over="ignore"):
            powers = np.empty(n, dtype=np.uint64)
            powers[0] = 1
            if n > 1:
                powers[1:] = _M64
                powers = np.multiply.accumulate(powers, dtype=np.uint64)
            incs = np.cumsum(powers, dtype=np.uint64) - powers
            incs = incs * np.uint64(self.inc)
            states = powers * np.uint64(self.state) + incs
            xorshifted = (((states >> np.uint64(18)) ^ states) >> np.uint64(27)) & np.uint64(0xFFFFFFFF)
            rot = states >> np.uint64(59)
            out = (xorshifted >> rot) | (xorshifted << ((np.uint64(32) - rot) & np.uint64(31)))
            out &= np.uint64(0xFFFFFFFF)
        last = int(states[-1])
        self.state = (last * MULTIPLIER + self.inc) & MASK64
        return out.astype(np.uint32)

    def doubles(self, n: int) -> np.ndarray:
        raw = self.u32_array(2 * n).astype(np.uint64)
        u64 = (raw[0::2] << np.uint64(32)) | raw[1::2]
        return (u64 >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.doubles(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal(self) -> float:
        """One Gaussian draw; consumes a full Box-Muller pair."""
        return float(self.normals(1)[0])

    def permutation_prefix(self, n: int, k: int) -> list:
        """First ``k`` entries of a forward Fisher-Yates shuffle of ``range(n)``."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        idx = list(range(n))
        for i in range(k):
            j = i + self.bounded(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]
