"""Deterministic, splittable random source.

Every random draw in this package flows through :class:`Rng`, so a whole run
is reproducible from one seed. Stream keys are derived by hashing a parent
key with a string label, and generation uses the counter-based Philox engine,
so sibling streams are independent and stable across platforms regardless of
the order they are consumed in.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DIGEST_SIZE = 16  # 128-bit keys


def _key_from_seed(seed) -> bytes:
    return hashlib.blake2b(
        f"actiondiff:{seed!r}".encode(), digest_size=_DIGEST_SIZE
    ).digest()


class Rng:
    """A named random stream that can be split into independent children."""

    __slots__ = ("_key", "_gen")

    def __init__(self, seed=0, *, _key: bytes | None = None):
        self._key = _key if _key is not None else _key_from_seed(seed)
        self._gen: np.random.Generator | None = None

    @property
    def key_hex(self) -> str:
        return self._key.hex()

    def split(self, label: str) -> "Rng":
        """Derive an independent child stream. Same (parent, label) pairs
        always yield the same stream; splitting does not advance the parent."""
        child = hashlib.blake2b(
            self._key + b"/" + label.encode(), digest_size=_DIGEST_SIZE
        ).digest()
        return Rng(_key=child)

    def derive_seed(self) -> int:
        """A stable 63-bit integer for APIs that want a plain seed."""
        return int.from_bytes(self._key[:8], "little") >> 1

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = int.from_bytes(self._key, "little")
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    # Convenience draws. These advance this stream's state, so call order
    # matters within one Rng; use split() for order-independence.

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(shape) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, items, p=None):
        idx = self.generator.choice(len(items), p=p)
        return items[int(idx)]

    def beta(self, a: float, b: float) -> float:
        return float(self.generator.beta(a, b))

    def dirichlet(self, alphas) -> np.ndarray:
        return self.generator.dirichlet(alphas)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng({self.key_hex[:12]}..)"
