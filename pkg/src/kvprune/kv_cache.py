"""Per-head KV store with score accumulators and byte accounting.

Slots live in parallel column arrays (positions, keys, values, norms,
accumulated scores, a history ring) so that scoring and attention are
vectorised; :class:`TokenSlot` is a read-only snapshot of one row.
Handles are token positions: they are unique inside a head and never reused.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import NormOrder, lp_norm
from .errors import InvalidHandle, InvalidInput, SinkProtected

FLOAT_BYTES = 8
ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TokenSlot:
    position: int
    key: np.ndarray
    value: np.ndarray
    value_norm: float
    acc_score: float
    window_scores: tuple[float, ...]  # oldest first, at most w entries
    is_sink: bool


@dataclass(frozen=True)
class CacheBytes:
    kv_bytes: int
    aux_bytes: int  # one value-norm scalar per slot
    window_bytes: int  # history ring, reported separately

    def __add__(self, other: CacheBytes) -> CacheBytes:
        return CacheBytes(
            self.kv_bytes + other.kv_bytes,
            self.aux_bytes + other.aux_bytes,
            self.window_bytes + other.window_bytes,
        )


class HeadCache:
    """Ordered token slots for one attention head."""

    def __init__(
        self,
        d_head: int,
        *,
        norm_order: NormOrder = 1,
        history_window: int = 400,
        sink_count: int = 0,
        layer: int = 0,
        head: int = 0,
        capacity: int = 64,
    ):
        if d_head < 1:
            raise InvalidInput("d_head must be >= 1")
        if history_window < 1:
            raise InvalidInput("history window must be >= 1")
        self.d_head = d_head
        self.norm_order = norm_order
        self.history_window = history_window
        self.sink_count = sink_count
        self.layer = layer
        self.head = head
        self.budget: int | None = None
        self.seen = 0  # tokens ever appended
        self.rows_recorded = 0
        self._n = 0
        self._alloc(max(capacity, 1))

    def _alloc(self, cap: int) -> None:
        w = self.history_window
        self._pos = np.zeros(cap, dtype=np.int64)
        self._keys = np.zeros((cap, self.d_head))
        self._values = np.zeros((cap, self.d_head))
        self._norms = np.zeros(cap)
        self._acc = np.zeros(cap)
        self._win_sum = np.zeros(cap)
        self._ring = np.zeros((cap, w))
        self._rows_seen = np.zeros(cap, dtype=np.int64)

    def _columns(self):
        return ("_pos", "_keys", "_values", "_norms", "_acc", "_win_sum", "_ring", "_rows_seen")

    def _grow(self) -> None:
        old = {name: getattr(self, name) for name in self._columns()}
        self._alloc(2 * len(self._pos))
        for name, arr in old.items():
            getattr(self, name)[: self._n] = arr[: self._n]

    def copy(self) -> HeadCache:
        new = HeadCache.__new__(HeadCache)
        new.__dict__.update(self.__dict__)
        for name in self._columns():
            setattr(new, name, getattr(self, name).copy())
        return new

    # -- views (read-only by convention) ------------------------------------

    def __len__(self) -> int:
        return self._n

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self._n]

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self._n]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self._n]

    @property
    def value_norms(self) -> np.ndarray:
        return self._norms[: self._n]

    @property
    def acc_scores(self) -> np.ndarray:
        return self._acc[: self._n]

    @property
    def window_sums(self) -> np.ndarray:
        return self._win_sum[: self._n]

    @property
    def sink_mask(self) -> np.ndarray:
        return self.positions < self.sink_count

    def slot(self, index: int) -> TokenSlot:
        if not 0 <= index < self._n:
            raise IndexError(index)
        w = self.history_window
        m = min(int(self._rows_seen[index]), w)
        last = self.rows_recorded - 1
        cols = [(g % w) for g in range(last - m + 1, last + 1)]
        return TokenSlot(
            position=int(self._pos[index]),
            key=self._keys[index].copy(),
            value=self._values[index].copy(),
            value_norm=float(self._norms[index]),
            acc_score=float(self._acc[index]),
            window_scores=tuple(float(self._ring[index, c]) for c in cols),
            is_sink=bool(self._pos[index] < self.sink_count),
        )

    @property
    def slots(self) -> list[TokenSlot]:
        return [self.slot(i) for i in range(self._n)]

    def index_of(self, position: int) -> int:
        i = int(np.searchsorted(self.positions, position))
        if i >= self._n or self._pos[i] != position:
            raise InvalidHandle(position)
        return i

    # -- mutation ----------------------------------------------------------

    def append(self, position: int, key: np.ndarray, value: np.ndarray) -> int:
        """Store a new token; returns its handle (the position)."""
        if self._n and position <= self._pos[self._n - 1]:
            raise InvalidInput(
                f"position {position} not after last cached position {self._pos[self._n - 1]}"
            )
        if position < 0:
            raise InvalidInput("negative position")
        if key.shape != (self.d_head,) or value.shape != (self.d_head,):
            raise InvalidInput(f"key/value must have length {self.d_head}")
        if self._n == len(self._pos):
            self._grow()
        i = self._n
        self._pos[i] = position
        self._keys[i] = key
        self._values[i] = value
        self._norms[i] = lp_norm(value, self.norm_order)
        self._acc[i] = 0.0
        self._win_sum[i] = 0.0
        self._ring[i] = 0.0
        self._rows_seen[i] = 0
        self._n += 1
        self.seen += 1
        return position

    def record_attention(self, row: np.ndarray) -> None:
        """Add one attention row (aligned with current slot order) to the scores."""
        n = self._n
        if row.shape != (n,):
            raise InvalidInput(f"attention row has length {row.shape}, cache holds {n} slots")
        total = float(row.sum())
        if abs(total - 1.0) > ROW_SUM_TOL or (row < 0).any():
            raise InvalidInput(f"attention row is not a probability vector (sum={total!r})")
        col = self.rows_recorded % self.history_window
        self._acc[:n] += row
        self._win_sum[:n] = (self._win_sum[:n] - self._ring[:n, col]) + row
        self._ring[:n, col] = row
        self._rows_seen[:n] += 1
        self.rows_recorded += 1

    def evict(self, handles, *, protect_sinks: bool = False) -> None:
        handles = sorted(set(int(h) for h in handles))
        if not handles:
            return
        idx = [self.index_of(h) for h in handles]
        if protect_sinks:
            sinks = [h for h in handles if h < self.sink_count]
            if sinks:
                raise SinkProtected(f"refusing to evict sink positions {sinks}")
        n = self._n
        keep = np.ones(n, dtype=bool)
        keep[idx] = False
        m = n - len(idx)
        for name in self._columns():
            arr = getattr(self, name)
            arr[:m] = arr[:n][keep]
        self._n = m

    def memory(self) -> CacheBytes:
        n = self._n
        return CacheBytes(
            kv_bytes=n * 2 * self.d_head * FLOAT_BYTES,
            aux_bytes=n * FLOAT_BYTES,
            window_bytes=n * self.history_window * FLOAT_BYTES,
        )


def memory_accounting(cache: HeadCache) -> CacheBytes:
    return cache.memory()
