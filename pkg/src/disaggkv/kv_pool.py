"""Fixed-size, reference-counted block pools for base and residual cache rows.

Each block holds up to ``capacity`` token rows laid out as ``[K | V]``; width is
2n for the base pool and 2r for the residual pool. Blocks are append-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import DTYPE, ShapeError

BYTES_PER_VALUE = 4


class PoolKind(str, Enum):
    BASE = "base"
    RESIDUAL = "residual"


class NeedsEviction(RuntimeError):
    def __init__(self, kind: PoolKind, needed: int):
        super().__init__(f"{kind.value} pool needs {needed} more free block(s)")
        self.kind = kind
        self.needed = needed


class StaleHandle(RuntimeError):
    """The handle's generation no longer matches its slot (use after free)."""


@dataclass(frozen=True, order=True)
class BlockHandle:
    kind: PoolKind
    index: int
    generation: int

    def __repr__(self) -> str:
        return f"{self.kind.value[0]}{self.index}@{self.generation}"


@dataclass
class CacheBlock:
    capacity: int
    width: int
    generation: int = 0
    filled: int = 0
    refcount: int = 0
    rows: np.ndarray | None = None


@dataclass
class PoolStats:
    total_blocks: int
    free_blocks: int
    base_bytes_used: int
    residual_bytes_used: int
    per_agent_bytes: dict[str, int] = field(default_factory=dict)


class BlockPool:
    def __init__(self, kind: PoolKind, num_blocks: int, capacity: int, width: int, store_rows: bool = True):
        if capacity < 1 or num_blocks < 0 or width < 0:
            raise ValueError("bad pool geometry")
        self.kind = PoolKind(kind)
        self.capacity = capacity
        self.width = width
        self.store_rows = store_rows
        # Slot records are created on first use so large pools are cheap to build.
        self._blocks: list[CacheBlock | None] = [None] * num_blocks
        # Lowest index first, so allocation order is deterministic.
        self._free = list(range(num_blocks - 1, -1, -1))
        self.reserved = 0

    def __repr__(self) -> str:
        return f"BlockPool({self.kind.value}, {self.free_blocks}/{self.total_blocks} free, width={self.width})"

    @property
    def total_blocks(self) -> int:
        return len(self._blocks)

    @property
    def free_blocks(self) -> int:
        return len(self._free)

    @property
    def allocated_blocks(self) -> int:
        return self.total_blocks - self.free_blocks

    @property
    def available(self) -> int:
        """Free blocks not promised to anyone."""
        return self.free_blocks - self.reserved

    @property
    def block_bytes(self) -> int:
        return self.capacity * self.width * BYTES_PER_VALUE

    @property
    def bytes_used(self) -> int:
        return self.allocated_blocks * self.block_bytes

    def _block(self, handle: BlockHandle) -> CacheBlock:
        if handle.kind is not self.kind:
            raise StaleHandle(f"{handle!r} belongs to the {handle.kind.value} pool")
        block = self._blocks[handle.index]
        if block is None or block.generation != handle.generation or block.refcount == 0:
            gen = 0 if block is None else block.generation
            raise StaleHandle(f"{handle!r} is stale (slot generation {gen})")
        return block

    def reserve(self, n: int) -> None:
        if n > self.available:
            raise NeedsEviction(self.kind, n - self.available)
        self.reserved += n

    def unreserve(self, n: int) -> None:
        if n > self.reserved:
            raise ValueError(f"unreserving {n} of {self.reserved} reserved blocks")
        self.reserved -= n

    def alloc(self, from_reservation: bool = False) -> BlockHandle:
        if from_reservation:
            self.unreserve(1)
        elif self.available < 1:
            raise NeedsEviction(self.kind, 1)
        index = self._free.pop()
        block = self._blocks[index]
        if block is None:
            block = self._blocks[index] = CacheBlock(self.capacity, self.width)
        block.generation += 1
        block.refcount = 1
        block.filled = 0
        if self.store_rows:
            block.rows = np.zeros((self.capacity, self.width), dtype=DTYPE)
        return BlockHandle(self.kind, index, block.generation)

    def alloc_many(self, n: int) -> list[BlockHandle]:
        if n > self.available:
            raise NeedsEviction(self.kind, n - self.available)
        return [self.alloc() for _ in range(n)]

    def retain(self, handle: BlockHandle) -> int:
        block = self._block(handle)
        block.refcount += 1
        return block.refcount

    def release(self, handle: BlockHandle) -> int:
        block = self._block(handle)
        block.refcount -= 1
        if block.refcount == 0:
            block.rows = None
            block.filled = 0
            self._free.append(handle.index)
        return block.refcount

    def refcount(self, handle: BlockHandle) -> int:
        return self._block(handle).refcount

    def filled(self, handle: BlockHandle) -> int:
        return self._block(handle).filled

    def is_live(self, handle: BlockHandle) -> bool:
        block = self._blocks[handle.index]
        return (
            block is not None
            and handle.kind is self.kind
            and block.generation == handle.generation
            and block.refcount > 0
        )

    def write_rows(self, handle: BlockHandle, rows) -> int:
        """Append rows to the block's unfilled tail; returns the new fill level."""
        block = self._block(handle)
        rows = np.asarray(rows, dtype=DTYPE)
        if rows.ndim != 2 or rows.shape[1] != self.width:
            raise ShapeError(f"{self.kind.value} block rows must be (k, {self.width}), got {rows.shape}")
        if block.filled + rows.shape[0] > self.capacity:
            raise OverflowError(
                f"{handle!r}: writing {rows.shape[0]} rows past fill {block.filled}/{self.capacity}"
            )
        if self.store_rows:
            block.rows[block.filled : block.filled + rows.shape[0]] = rows
        block.filled += rows.shape[0]
        return block.filled

    def advance(self, handle: BlockHandle, count: int) -> int:
        """Mark ``count`` rows filled without storing values (accounting-only pools)."""
        block = self._block(handle)
        if block.filled + count > self.capacity:
            raise OverflowError(f"{handle!r}: advancing past capacity")
        block.filled += count
        return block.filled

    def read_rows(self, handle: BlockHandle, start: int = 0, stop: int | None = None) -> np.ndarray:
        block = self._block(handle)
        stop = block.filled if stop is None else stop
        if not (0 <= start <= stop <= block.filled):
            raise IndexError(f"{handle!r}: rows [{start}, {stop}) outside filled range {block.filled}")
        if not self.store_rows:
            return np.zeros((stop - start, self.width), dtype=DTYPE)
        return block.rows[start:stop].copy()

    def live_handles(self) -> list[BlockHandle]:
        return [
            BlockHandle(self.kind, i, b.generation) for i, b in enumerate(self._blocks) if b is not None and b.refcount > 0
        ]


@dataclass
class PoolBudget:
    base_blocks: int
    residual_blocks: int


def split_budget(total_bytes: int, capacity: int, base_width: int, residual_width: int, residual_fraction: float) -> PoolBudget:
    """Carve one byte budget into whole blocks for the two pools."""
    if not 0.0 <= residual_fraction < 1.0:
        raise ValueError("residual_fraction must be in [0, 1)")
    res_bytes = int(total_bytes * residual_fraction) if residual_width else 0
    base_bytes = total_bytes - res_bytes
    base_block = capacity * base_width * BYTES_PER_VALUE
    res_block = capacity * residual_width * BYTES_PER_VALUE
    return PoolBudget(
        base_blocks=base_bytes // base_block,
        residual_blocks=res_bytes // res_block if res_block else 0,
    )


class KVPools:
    def __init__(self, base: BlockPool, residual: BlockPool):
        self.base = base
        self.residual = residual

    def __getitem__(self, kind: PoolKind) -> BlockPool:
        return self.base if PoolKind(kind) is PoolKind.BASE else self.residual

    def stats(self, per_agent_bytes: dict[str, int] | None = None) -> PoolStats:
        return PoolStats(
            total_blocks=self.base.total_blocks + self.residual.total_blocks,
            free_blocks=self.base.free_blocks + self.residual.free_blocks,
            base_bytes_used=self.base.bytes_used,
            residual_bytes_used=self.residual.bytes_used,
            per_agent_bytes=dict(per_agent_bytes or {}),
        )
