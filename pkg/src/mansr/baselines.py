"""Incremental nonparametric baselines: item-to-item co-occurrence KNN and
session KNN (optionally with position-weighted matching)."""

from __future__ import annotations

import heapq
import math
from collections import Counter, OrderedDict, defaultdict
from typing import Iterable, Sequence

import numpy as np

from .memory import MemoryPrediction


def _normalized(scores: dict[int, float], top: int | None = None) -> MemoryPrediction:
    scores = {i: s for i, s in scores.items() if s > 0.0}
    if not scores:
        return MemoryPrediction.empty()
    if top is not None and len(scores) > top:
        # highest scores, ties to the lower item index
        keep = heapq.nsmallest(top, scores.items(), key=lambda kv: (-kv[1], kv[0]))
        scores = dict(keep)
    items = np.array(sorted(scores), dtype=np.int64)
    vals = np.array([scores[i] for i in items], dtype=np.float64)
    return MemoryPrediction(items, vals / vals.sum())


class _Incremental:
    """Shared bookkeeping: how much of each session has been observed."""

    def observe(self, session_id: str, item: int) -> None:
        raise NotImplementedError

    def fit(self, sessions: Iterable[tuple[str, Sequence[int]]]):
        for sid, items in sessions:
            self.update_session(sid, items)
        return self

    def update_session(self, session_id: str, items: Sequence[int]) -> None:
        observed = self._observed.get(session_id, 0)
        for item in items[observed:]:
            self.observe(session_id, item)
        self._observed[session_id] = max(observed, len(items))

    def update(self, events: Iterable[tuple[str, Sequence[int], int]]) -> None:
        """Absorb tested (session, prefix, target) events."""
        for sid, prefix, target in events:
            self.update_session(sid, list(prefix) + [target])


class ItemKNN(_Incremental):
    """Cosine similarity of session co-occurrence between the last item and others.

    ``count(i)`` is the number of sessions containing ``i``; ``cooc(i, j)``
    the number containing both.
    """

    name = "itemknn"

    def __init__(self, k: int = 100):
        self.k = k
        self.counts: Counter = Counter()
        self.cooc: dict[int, Counter] = defaultdict(Counter)
        self._session_items: dict[str, set[int]] = {}
        self._observed: dict[str, int] = {}

    def observe(self, session_id: str, item: int) -> None:
        seen = self._session_items.setdefault(session_id, set())
        if item in seen:
            return
        for other in seen:
            self.cooc[item][other] += 1
            self.cooc[other][item] += 1
        seen.add(item)
        self.counts[item] += 1

    def similarity(self, a: int, b: int) -> float:
        if self.counts[a] == 0 or self.counts[b] == 0:
            return 0.0
        return self.cooc[a][b] / math.sqrt(self.counts[a] * self.counts[b])

    def predict(self, prefix: Sequence[int]) -> MemoryPrediction:
        last = prefix[-1]
        if self.counts[last] == 0:
            return MemoryPrediction.empty()
        ca = self.counts[last]
        scores = {j: c / math.sqrt(ca * self.counts[j]) for j, c in self.cooc[last].items()}
        return _normalized(scores, self.k)


class SessionKNN(_Incremental):
    """Session-based KNN over a pool of recent sessions.

    Neighbours are the ``k_sessions`` pool sessions most similar to the
    current prefix by binary cosine over item sets. With
    ``sequential_weighting`` each matched item counts with weight
    ``position / len(prefix)`` (1-based position of its last occurrence), so
    matches on recent clicks count more.
    """

    def __init__(self, k_sessions: int = 500, pool_size: int = 5000, sequential_weighting: bool = False):
        self.k_sessions = k_sessions
        self.pool_size = pool_size
        self.sequential_weighting = sequential_weighting
        self.pool: OrderedDict[str, list[int]] = OrderedDict()
        self._item_sets: dict[str, set[int]] = {}
        self._by_item: dict[int, set[str]] = defaultdict(set)
        self._stamp: dict[str, int] = {}
        self._clock = 0
        self._observed: dict[str, int] = {}

    @property
    def name(self) -> str:
        return "s-sknn" if self.sequential_weighting else "sknn"

    def observe(self, session_id: str, item: int) -> None:
        self._clock += 1
        if session_id in self.pool:
            self.pool.move_to_end(session_id)
            self.pool[session_id].append(item)
        else:
            self.pool[session_id] = [item]
            self._item_sets[session_id] = set()
            while len(self.pool) > self.pool_size:
                old, old_items = self.pool.popitem(last=False)
                for i in self._item_sets.pop(old):
                    self._by_item[i].discard(old)
                self._stamp.pop(old, None)
        self._item_sets[session_id].add(item)
        self._by_item[item].add(session_id)
        self._stamp[session_id] = self._clock

    def _weights(self, prefix: Sequence[int]) -> dict[int, float]:
        if not self.sequential_weighting:
            return {i: 1.0 for i in prefix}
        n = len(prefix)
        return {i: (pos + 1) / n for pos, i in enumerate(prefix)}  # later positions overwrite

    def neighbors(self, prefix: Sequence[int], exclude: str | None = None) -> list[tuple[str, float]]:
        weights = self._weights(prefix)
        overlap: dict[str, float] = defaultdict(float)
        for item, w in weights.items():
            for sid in self._by_item.get(item, ()):
                if sid != exclude:
                    overlap[sid] += w
        n_cur = len(weights)
        sims = [(sid, ov / math.sqrt(n_cur * len(self._item_sets[sid]))) for sid, ov in overlap.items()]
        # most similar first, then most recently updated
        return heapq.nsmallest(self.k_sessions, sims, key=lambda kv: (-kv[1], -self._stamp[kv[0]]))

    def predict(self, prefix: Sequence[int], exclude: str | None = None) -> MemoryPrediction:
        scores: dict[int, float] = defaultdict(float)
        for sid, sim in self.neighbors(prefix, exclude):
            for j in self._item_sets[sid]:
                scores[j] += sim
        return _normalized(scores)


def make_baseline(name: str, k: int = 100, k_sessions: int = 500, pool_size: int = 5000):
    if name == "itemknn":
        return ItemKNN(k)
    if name == "sknn":
        return SessionKNN(k_sessions, pool_size, sequential_weighting=False)
    if name == "s-sknn":
        return SessionKNN(k_sessions, pool_size, sequential_weighting=True)
    raise ValueError(f"unknown baseline {name!r}")
