"""
Fixed-interval time blocks and bucketing.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Generic, Iterable, List, Optional, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class TimeBlockIndex:
    """
    Maps timestamps to block indices `floor((t - t0) / dt)` in `[0, count)`.
    """

    t0: int
    """Series start time, UTC seconds."""
    dt: int
    """Block length in seconds."""
    count: int
    """Total number of blocks T."""

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"Block length dt={self.dt} must be positive")
        if self.count < 0:
            raise ValueError(f"Block count {self.count} must be non-negative")

    @classmethod
    def covering(
        cls, timestamps: Iterable[int], dt: int, t0: Optional[int] = None
    ) -> "TimeBlockIndex":
        """
        Smallest index starting at `t0` (default: the earliest timestamp) that covers
        every timestamp.
        """
        stamps = np.fromiter(timestamps, dtype=np.int64)
        if len(stamps) == 0:
            return cls(t0=0 if t0 is None else t0, dt=dt, count=0)
        start = int(stamps.min()) if t0 is None else t0
        count = int((stamps.max() - start) // dt) + 1
        return cls(t0=start, dt=dt, count=max(count, 0))

    def block_of(self, timestamps: np.ndarray) -> np.ndarray:
        """
        Block index of each timestamp. Out-of-range results are not clipped.
        """
        stamps = np.asarray(timestamps, dtype=np.int64)
        return np.floor_divide(stamps - self.t0, self.dt)

    def contains(self, blocks: np.ndarray) -> np.ndarray:
        return (blocks >= 0) & (blocks < self.count)

    def start_of(self, block: int) -> int:
        return self.t0 + block * self.dt


@dataclass
class Buckets(Generic[T]):
    """
    Items grouped by block, plus the number of out-of-range items dropped.
    """

    items: Dict[int, List[T]] = field(default_factory=dict)
    dropped: int = 0

    @property
    def kept(self) -> int:
        return sum(len(v) for v in self.items.values())


def bucket(
    items: Iterable[T],
    index: TimeBlockIndex,
    key: Callable[[T], int] = lambda item: item.timestamp,  # type: ignore[attr-defined]
) -> Buckets[T]:
    """
    Group items by time block. Items outside `[0, T)` are counted and dropped.

    Args:
        items: metric samples, log lines or anything with a timestamp.
        index: block index.
        key: function returning an item's timestamp in UTC seconds.

    Returns:
        A `Buckets` with one list per non-empty block, in input order.
    """
    items = list(items)
    blocks = index.block_of(np.fromiter((key(it) for it in items), dtype=np.int64))
    inside = index.contains(blocks)

    out: Buckets[T] = Buckets()
    for item, block, ok in zip(items, blocks.tolist(), inside.tolist()):
        if ok:
            out.items.setdefault(block, []).append(item)
        else:
            out.dropped += 1

    if out.dropped:
        logger.warning(
            "Dropped %d of %d items outside blocks [0, %d)",
            out.dropped,
            len(items),
            index.count,
        )
    return out
