"""
Fixed-capacity bitsets for path sets.

A Bitset wraps a numpy boolean vector whose length is the capacity of the
set it models (neurons, synapses or weights of one layer). Set algebra is
a linear scan; serialisation packs bits little-endian into bytes.
"""

from typing import Iterable, Iterator

import numpy as np

from pathprof.errors import DomainError, FormatError


class Bitset:
    """Immutable set of integers in ``[0, capacity)``."""

    __slots__ = ('_bits',)

    def __init__(self, bits: np.ndarray):
        bits = np.array(bits, dtype=bool).reshape(-1)
        bits.flags.writeable = False
        self._bits = bits

    @classmethod
    def empty(cls, capacity: int) -> 'Bitset':
        return cls(np.zeros(int(capacity), dtype=bool))

    @classmethod
    def full(cls, capacity: int) -> 'Bitset':
        return cls(np.ones(int(capacity), dtype=bool))

    @classmethod
    def from_indices(cls, capacity: int, indices: Iterable[int]) -> 'Bitset':
        bits = np.zeros(int(capacity), dtype=bool)
        idx = np.fromiter(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= capacity):
            raise DomainError(
                f'index outside bitset capacity {capacity}'
            )
        bits[idx] = True
        return cls(bits)

    @property
    def capacity(self) -> int:
        return int(self._bits.size)

    def to_array(self) -> np.ndarray:
        """Boolean vector view (read-only)."""
        return self._bits

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self._bits)

    def count(self) -> int:
        return int(np.count_nonzero(self._bits))

    def __len__(self) -> int:
        return self.count()

    def __iter__(self) -> Iterator[int]:
        return (int(i) for i in self.indices())

    def __contains__(self, index: int) -> bool:
        return 0 <= index < self.capacity and bool(self._bits[index])

    def _check(self, other: 'Bitset') -> None:
        if other.capacity != self.capacity:
            raise DomainError(
                f'bitset capacities differ: {self.capacity} vs {other.capacity}'
            )

    def union(self, other: 'Bitset') -> 'Bitset':
        self._check(other)
        return Bitset(self._bits | other._bits)

    def intersection(self, other: 'Bitset') -> 'Bitset':
        self._check(other)
        return Bitset(self._bits & other._bits)

    def intersection_count(self, other: 'Bitset') -> int:
        self._check(other)
        return int(np.count_nonzero(self._bits & other._bits))

    def union_count(self, other: 'Bitset') -> int:
        self._check(other)
        return int(np.count_nonzero(self._bits | other._bits))

    def issubset(self, other: 'Bitset') -> bool:
        self._check(other)
        return not np.any(self._bits & ~other._bits)

    __or__ = union
    __and__ = intersection
    __le__ = issubset

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Bitset)
            and other.capacity == self.capacity
            and bool(np.array_equal(self._bits, other._bits))
        )

    def __hash__(self) -> int:
        return hash((self.capacity, self.to_bytes()))

    def __repr__(self) -> str:
        return f'<Bitset {self.count()}/{self.capacity}>'

    def to_bytes(self) -> bytes:
        return np.packbits(self._bits, bitorder='little').tobytes()

    @classmethod
    def from_bytes(cls, capacity: int, payload: bytes) -> 'Bitset':
        """
        Rebuild a bitset from ``to_bytes`` output.

        Raises
        ------
        FormatError
            If the payload length does not match the capacity or padding
            bits past the capacity are set
        """
        expected = (capacity + 7) // 8
        if len(payload) != expected:
            raise FormatError(
                f'bitset payload is {len(payload)} bytes, expected {expected}'
            )
        raw = np.frombuffer(payload, dtype=np.uint8)
        bits = np.unpackbits(raw, bitorder='little')
        if np.any(bits[capacity:]):
            raise FormatError('bitset padding bits are set')
        return cls(bits[:capacity].astype(bool))
