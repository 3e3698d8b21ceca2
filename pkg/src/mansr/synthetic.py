"""Synthetic click streams with controllable drift and item novelty.

Sessions follow a first-order Markov chain over items: each item has a
few preferred successors plus a popularity-weighted random jump. Two
scenarios build on it:

- ``drift_corpus``: halfway through the test period a share of items get
  new successors (a preference shift).
- ``novelty_corpus``: new items, arranged in short chains that are
  entered from old items, start appearing in validation and make up a growing
  share of test sessions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DAY_MS, CorpusSplit, Session

SECOND_MS = 1000
TOY_EPOCH_MS = int(np.datetime64("2014-04-01T00:00:00", "ms").astype(np.int64))


@dataclass
class ChainConfig:
    n_items: int = 1000
    n_successors: int = 3
    successor_probs: tuple = (0.55, 0.25, 0.1)  # remainder is a popularity jump
    zipf: float = 1.1
    mean_length: float = 5.0
    max_length: int = 20


class MarkovChain:
    def __init__(self, cfg: ChainConfig, rng: np.random.Generator, prefix: str = "i"):
        self.cfg = cfg
        self.rng = rng
        n = cfg.n_items
        self.names = [f"{prefix}{k}" for k in range(n)]
        ranks = rng.permutation(n) + 1
        pop = ranks ** -cfg.zipf
        self.popularity = pop / pop.sum()
        self._cum_pop = np.cumsum(self.popularity)
        self.successors = self._draw_successors(np.arange(n))
        self.jump = 1.0 - float(sum(cfg.successor_probs))
        if self.jump < 0 or len(cfg.successor_probs) != cfg.n_successors:
            raise ValueError("need one probability per successor, summing to at most 1")

    def _draw_successors(self, items: np.ndarray) -> np.ndarray:
        n, s = self.cfg.n_items, self.cfg.n_successors
        out = np.empty((len(items), s), dtype=np.int64)
        for row, i in enumerate(items):
            choices = self.rng.choice(n - 1, size=s, replace=False)
            out[row] = np.where(choices >= i, choices + 1, choices)  # never self
        return out

    def shift(self, fraction: float) -> np.ndarray:
        """Redraw successors for a random ``fraction`` of items; returns them."""
        n = self.cfg.n_items
        moved = self.rng.choice(n, size=int(round(fraction * n)), replace=False)
        self.successors[moved] = self._draw_successors(moved)
        return moved

    def length(self) -> int:
        L = 2 + self.rng.geometric(1.0 / max(self.cfg.mean_length - 1.0, 1.0)) - 1
        return int(min(L, self.cfg.max_length))

    def step(self, item: int) -> int:
        u = self.rng.random()
        acc = 0.0
        for j, p in enumerate(self.cfg.successor_probs):
            acc += p
            if u < acc:
                return int(self.successors[item, j])
        return self.popular()

    def popular(self) -> int:
        return int(min(np.searchsorted(self._cum_pop, self.rng.random(), side="right"), self.cfg.n_items - 1))

    def walk(self, length: int, start: int | None = None) -> list[int]:
        item = self.popular() if start is None else start
        out = [item]
        while len(out) < length:
            item = self.step(item)
            out.append(item)
        return out


def _sessions(walks: list[list[str]], starts: np.ndarray, prefix: str, rng: np.random.Generator,
              offset: int = 0) -> list[Session]:
    out = []
    for k, (items, t0) in enumerate(zip(walks, starts)):
        gaps = rng.integers(20, 120, size=len(items)) * SECOND_MS
        gaps[0] = 0
        ts = int(t0) + np.cumsum(gaps)
        out.append(Session(f"{prefix}{offset + k}", tuple(items), tuple(int(t) for t in ts)))
    return out


def _starts(rng, n: int, lo_day: float, hi_day: float) -> np.ndarray:
    return np.sort(rng.uniform(lo_day * DAY_MS, hi_day * DAY_MS, size=n)).astype(np.int64)


def _split(train, valid, test) -> CorpusSplit:
    valid_cut = valid[0].start if valid else None
    return CorpusSplit(train, valid, test, valid_cut, test[0].start)


def drift_corpus(seed: int = 0, n_items: int = 5000, n_train: int = 20000, n_valid: int = 2000,
                 n_test_events: int = 50000, shift_fraction: float = 0.5) -> CorpusSplit:
    """Stationary train/valid periods; the chain shifts at the test midpoint.

    Test sessions are drawn until ``n_test_events`` predictable events
    exist; sessions after the first half of those events use the shifted
    successors.
    """
    rng = np.random.default_rng(seed)
    chain = MarkovChain(ChainConfig(n_items=n_items), rng)
    names = chain.names

    def draw(n):
        return [[names[i] for i in chain.walk(chain.length())] for _ in range(n)]

    train = _sessions(draw(n_train), _starts(rng, n_train, 0, 60), "s", rng)
    valid = _sessions(draw(n_valid), _starts(rng, n_valid, 60, 66), "s", rng, n_train)
    walks, events, shifted = [], 0, False
    while events < n_test_events:
        if not shifted and events >= n_test_events // 2:
            chain.shift(shift_fraction)
            shifted = True
        w = [names[i] for i in chain.walk(chain.length())]
        walks.append(w)
        events += len(w) - 1
    # contiguous start times keep the pre-shift sessions before the shift on the timeline
    starts = np.linspace(66 * DAY_MS, 73 * DAY_MS, num=len(walks), endpoint=False).astype(np.int64)
    test = _sessions(walks, starts, "s", rng, n_train + n_valid)
    return _split(train, valid, _trim(test, n_test_events))


def _trim(sessions: list[Session], n_events: int) -> list[Session]:
    out, events = [], 0
    for s in sessions:
        room = n_events - events
        if room <= 0:
            break
        if len(s) - 1 > room:
            s = Session(s.session_id, s.items[: room + 1], s.timestamps[: room + 1])
        out.append(s)
        events += len(s) - 1
    return out


def novelty_corpus(seed: int = 0, n_items: int = 1000, n_train: int = 8000, n_valid: int = 1000,
                   n_test: int = 4000, chain_length: int = 4, new_per_period: int = 40,
                   valid_new_share: float = 0.3, test_new_share: tuple = (0.1, 0.6),
                   successor_probs: tuple = (0.55, 0.25, 0.1)) -> CorpusSplit:
    """Old-item chain plus new item chains appearing after training.

    A new chain ``n_1 -> ... -> n_L`` is reached from a fixed old entry
    item. A session of new-item interest starts on old items, jumps to its
    chain's entry and then walks the chain. Each period gets its own chains;
    the share of such sessions ramps linearly across the test period.
    """
    rng = np.random.default_rng(seed)
    chain = MarkovChain(ChainConfig(n_items=n_items, successor_probs=tuple(successor_probs)), rng)
    names = chain.names
    counter = [0]

    def new_chains(k: int) -> list[tuple[int, list[str]]]:
        out = []
        for _ in range(k):
            entry = chain.popular()
            items = [f"n{counter[0] + j}" for j in range(chain_length)]
            counter[0] += chain_length
            out.append((entry, items))
        return out

    def old_walk() -> list[str]:
        return [names[i] for i in chain.walk(chain.length())]

    def new_walk(chains) -> list[str]:
        entry, items = chains[int(rng.integers(len(chains)))]
        head = chain.walk(int(rng.integers(1, 3)))
        head[-1] = entry
        return [names[i] for i in head] + items

    train = _sessions([old_walk() for _ in range(n_train)], _starts(rng, n_train, 0, 60), "s", rng)
    valid_chains = new_chains(new_per_period)
    vw = [new_walk(valid_chains) if rng.random() < valid_new_share else old_walk() for _ in range(n_valid)]
    valid = _sessions(vw, _starts(rng, n_valid, 60, 66), "s", rng, n_train)
    test_chains = []
    tw = []
    for k in range(n_test):
        frac = k / max(n_test - 1, 1)
        if k % max(n_test // 4, 1) == 0:
            test_chains += new_chains(new_per_period // 2)  # chains arrive in waves
        share = test_new_share[0] + frac * (test_new_share[1] - test_new_share[0])
        tw.append(new_walk(test_chains) if rng.random() < share else old_walk())
    test = _sessions(tw, np.linspace(66 * DAY_MS, 73 * DAY_MS, num=n_test, endpoint=False).astype(np.int64), "s",
                     rng, n_train + n_valid)
    return _split(train, valid, test)


def toy_clicks(seed: int = 7, n_sessions: int = 200, n_items: int = 60, days: int = 30) -> list[str]:
    """Click log lines in the YOOCHOOSE layout (session, ISO time, item, category)."""
    rng = np.random.default_rng(seed)
    chain = MarkovChain(ChainConfig(n_items=n_items, mean_length=6.0), rng)
    starts = _starts(rng, n_sessions, 0, days)
    lines = []
    for k, t0 in enumerate(starts):
        t = int(t0)
        for item in chain.walk(chain.length()):
            t += int(rng.integers(20, 120)) * SECOND_MS
            stamp = np.datetime_as_string(np.datetime64(TOY_EPOCH_MS + t, "ms"), unit="ms")
            lines.append(f"{k + 1},{stamp}Z,{214500000 + item},0\n")
    return lines
