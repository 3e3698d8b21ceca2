"""Key-value memory of (sequence representation, next item) pairs and its
kernel-density next-item prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .index import FlatIndex, IndexConfig, IVFPQIndex, NeighborSet, exact_query, index_from_snapshot, _Growable

D_STAR_FLOOR = 1e-12


@dataclass
class MemoryConfig:
    capacity: int | None = None  # None: unbounded; otherwise keep the B most recent slots
    index_kind: str = "ivfpq"  # or "flat" for exact search
    index: IndexConfig = field(default_factory=IndexConfig)


class MemoryPrediction:
    """Sparse distribution over item indices; ``items`` ascending."""

    __slots__ = ("items", "probs")

    def __init__(self, items: np.ndarray, probs: np.ndarray):
        self.items = items
        self.probs = probs

    @classmethod
    def empty(cls) -> "MemoryPrediction":
        return cls(np.empty(0, dtype=np.int64), np.empty(0))

    @property
    def is_empty(self) -> bool:
        return len(self.items) == 0

    def __len__(self) -> int:
        return len(self.items)

    def prob(self, item: int) -> float:
        pos = np.searchsorted(self.items, item)
        if pos < len(self.items) and self.items[pos] == item:
            return float(self.probs[pos])
        return 0.0

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(p) for i, p in zip(self.items, self.probs)}

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.items] = self.probs
        return out


def kernel_density(labels: np.ndarray, distances: np.ndarray) -> MemoryPrediction:
    """Gaussian kernel vote of neighbour labels at bandwidth ``d*``.

    Each neighbour contributes ``exp(-(d_k / d*)**2 / 2)`` to its label,
    where ``d*`` is the smallest retrieved distance (floored at 1e-12);
    the votes are normalized over the retrieved labels.
    """
    if len(labels) == 0:
        return MemoryPrediction.empty()
    distances = np.asarray(distances, dtype=np.float64)
    d_star = max(float(distances.min()), D_STAR_FLOOR)
    ratio = distances / d_star
    weights = np.exp(-0.5 * ratio * ratio)
    items, inverse = np.unique(np.asarray(labels, dtype=np.int64), return_inverse=True)
    scores = np.bincount(inverse, weights=weights, minlength=len(items))
    total = scores.sum()
    if not total > 0.0:
        scores = np.ones(len(items))
        total = float(len(items))
    return MemoryPrediction(items, scores / total)


class MemoryStore:
    """Append-only slot array backed by a nearest-neighbour index.

    Slot ids are insertion ranks. With a finite ``capacity`` only the most
    recent slots are live; older ones are masked out of queries and purged
    from the index once they outnumber the live ones.
    """

    def __init__(self, dim: int, config: MemoryConfig | None = None):
        self.dim = dim
        self.config = config or MemoryConfig()
        self._values = _Growable((), np.int64)
        if self.config.index_kind == "flat":
            self.index = FlatIndex(dim)
        elif self.config.index_kind == "ivfpq":
            self.index = IVFPQIndex(dim, self.config.index)
        else:
            raise ValueError(f"unknown index kind {self.config.index_kind!r}")
        self._pending = _Growable((dim,), np.float64)  # keys inserted before the index was fitted
        self._purged_below = 0

    def __len__(self) -> int:
        return self.live_count

    @property
    def insert_count(self) -> int:
        return self._values.n

    @property
    def min_live_id(self) -> int:
        cap = self.config.capacity
        return 0 if cap is None else max(0, self._values.n - cap)

    @property
    def live_count(self) -> int:
        return self._values.n - self.min_live_id

    @property
    def values(self) -> np.ndarray:
        return self._values.data

    @property
    def is_indexed(self) -> bool:
        return self.index.is_fitted

    def insert(self, c: np.ndarray, y: int) -> int:
        slot = self._values.n
        self._values.extend(np.array([y], dtype=np.int64))
        if self.is_indexed:
            self.index.add(np.asarray(c, dtype=np.float64), slot)
        else:
            self._pending.extend(np.asarray(c, dtype=np.float64).reshape(1, -1))
        self._maybe_purge()
        return slot

    def insert_batch(self, C: np.ndarray, ys: np.ndarray) -> None:
        ys = np.asarray(ys, dtype=np.int64)
        start = self._values.n
        self._values.extend(ys)
        C = np.asarray(C, dtype=np.float64).reshape(len(ys), -1)
        if self.is_indexed:
            self.index.add_batch(C, np.arange(start, start + len(ys)))
        else:
            self._pending.extend(C)
        self._maybe_purge()

    def build(self, C: np.ndarray | None = None, ys: np.ndarray | None = None) -> None:
        """Optionally append entries, then fit the index on all live keys.

        The quantizers are trained once here and stay frozen afterwards.
        """
        if self.is_indexed and not isinstance(self.index, FlatIndex):
            raise RuntimeError("index already built; use rebuild_index")
        if C is not None:
            self.insert_batch(C, ys)
        if isinstance(self.index, FlatIndex):
            return
        keys = self._pending.data
        if len(keys) == 0:
            raise ValueError("cannot build an index over an empty memory")
        lo = self.min_live_id - self._purged_below
        live_keys = keys[lo:]
        self.index.fit(live_keys)
        self.index.add_batch(live_keys, np.arange(self.min_live_id, self._values.n))
        self._pending = _Growable((self.dim,), np.float64)

    def rebuild_index(self) -> None:
        """Refit the quantizers on every live key (needs raw keys)."""
        if isinstance(self.index, FlatIndex):
            return
        if len(self) == 0:
            raise ValueError("cannot rebuild an empty memory")
        keys, ids = self.index.raw()
        live = ids >= self.min_live_id
        keys, ids = keys[live].copy(), ids[live].copy()
        self.index.fit(keys)
        self.index.add_batch(keys, ids)

    def neighbors(self, c: np.ndarray, K: int, nprobe: int | None = None) -> NeighborSet:
        c = np.asarray(c, dtype=np.float64)
        if self._values.n == 0:
            return NeighborSet.empty()
        if not self.is_indexed:
            keys = self._pending.data
            ids = np.arange(self._purged_below, self._purged_below + len(keys))
            live = ids >= self.min_live_id
            return exact_query(keys[live], ids[live], c, K)
        return self.index.query(c, K, nprobe=nprobe, min_id=self.min_live_id or None)

    def predict(self, c: np.ndarray, K: int, nprobe: int | None = None) -> MemoryPrediction:
        nb = self.neighbors(c, K, nprobe)
        if len(nb) == 0:
            return MemoryPrediction.empty()
        return kernel_density(self._values.data[nb.ids], nb.distances)

    def _maybe_purge(self) -> None:
        dead = self.min_live_id - self._purged_below
        if dead > 1024 and dead > self.live_count:
            if self.is_indexed:
                self.index.purge(self.min_live_id)
            else:
                self._pending.keep(np.arange(self._pending.n) >= dead)
            self._purged_below = self.min_live_id

    # snapshot

    def snapshot(self) -> tuple[dict[str, np.ndarray], dict]:
        if not self.is_indexed:
            raise RuntimeError("memory must be built before it can be saved")
        arrays, imeta = self.index.snapshot()
        arrays = {f"index/{k}": v for k, v in arrays.items()}
        arrays["values"] = self._values.data.copy()
        cfg = asdict(self.config)
        meta = {"dim": self.dim, "config": cfg, "index": imeta, "purged_below": self._purged_below}
        return arrays, meta

    @classmethod
    def from_snapshot(cls, arrays: dict, meta: dict) -> "MemoryStore":
        cfg = dict(meta["config"])
        cfg["index"] = IndexConfig(**cfg["index"])
        store = cls(meta["dim"], MemoryConfig(**cfg))
        store._values.extend(np.asarray(arrays["values"], dtype=np.int64))
        sub = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("index/")}
        store.index = index_from_snapshot(sub, meta["index"])
        store._purged_below = int(meta["purged_below"])
        return store
