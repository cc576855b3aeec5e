"""SplitMix64 pseudo-random generator.

The generator is counter based: the n-th output only depends on the seed and n,
which is what makes ``block`` able to produce the very same stream as repeated
``next_u64`` calls in one vectorized step.
"""
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_POW_MINUS_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    @classmethod
    def for_stream(cls, seed: int, stream: int) -> "SplitMix64":
        """Independent generator for a numbered stream (an epoch, a scene) of a seed."""
        return cls(mix64(seed & MASK64) ^ (stream & MASK64))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * _TWO_POW_MINUS_53)

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high], both ends included."""
        return low + self.next_u64() % (high - low + 1)

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(0, i)
            out[i], out[j] = out[j], out[i]
        return out

    def block(self, n: int) -> np.ndarray:
        """The next ``n`` raw outputs as uint64, same values as ``n`` calls of ``next_u64``."""
        counters = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + counters * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_block(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * ((self.block(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_MINUS_53)
