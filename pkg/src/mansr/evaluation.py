"""Prequential (test-then-train) evaluation and ranking metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baselines import ItemKNN, SessionKNN
from .data import ItemVocabulary, StreamEvent
from .gating import FixedGate, GateNetwork, combine
from .memory import MemoryPrediction, MemoryStore

log = logging.getLogger(__name__)

VARIANTS = (
    "man",
    "man-fixed",
    "man-shallow",
    "man-bounded",
    "memory",
    "neural",
    "neural-fixed",
    "itemknn",
    "sknn",
    "s-sknn",
)
BASELINES = ("itemknn", "sknn", "s-sknn")
SUM_TOL = 1e-6


class InvariantViolation(AssertionError):
    pass


class ComponentMissing(RuntimeError):
    pass


def rank_metrics(rank: int, k: int) -> tuple[int, float]:
    """Hit and reciprocal rank of a 1-based rank, cut off at ``k``."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    if rank <= k:
        return 1, 1.0 / rank
    return 0, 0.0


def dense_rank(probs: np.ndarray, target: int) -> int:
    """1-based rank of ``target`` by descending probability; ties go to lower indices."""
    p = probs[target]
    return int(np.count_nonzero(probs > p) + np.count_nonzero(probs[:target] == p) + 1)


def sparse_rank(pred: MemoryPrediction, target: int) -> int:
    """Rank under a sparse distribution: every off-support item scores 0."""
    items, probs = pred.items, pred.probs
    p = pred.prob(target)
    if p > 0.0:
        return int(np.count_nonzero(probs > p) + np.count_nonzero((probs == p) & (items < target)) + 1)
    positive = int(np.count_nonzero(probs > 0.0))
    zeros_before = target - int(np.count_nonzero((items < target) & (probs > 0.0)))
    return positive + zeros_before + 1


@dataclass
class PrequentialConfig:
    variant: str = "man"
    cadence: int = 100
    eta: float = 5e-4
    gate_lr: float = 1e-3
    K: int = 50
    nprobe: int | None = None
    shallow_weight: float = 0.7
    capacity: int | None = None  # for man-bounded; applied when the bundle's memory is built
    strict: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.cadence < 1:
            raise ValueError("cadence must be at least 1")
        if self.eta < 0 or self.gate_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.K < 1:
            raise ValueError("K must be positive")

    @property
    def uses_memory(self) -> bool:
        return self.variant.startswith("man") or self.variant == "memory"

    @property
    def uses_neural(self) -> bool:
        return self.variant not in BASELINES

    @property
    def neural_lr(self) -> float:
        return 0.0 if self.variant in ("man-fixed", "neural-fixed") else self.eta

    @property
    def learns_gate(self) -> bool:
        return self.variant in ("man", "man-bounded")


@dataclass
class Bundle:
    """Everything a prequential run reads and mutates."""

    vocab: ItemVocabulary
    model: object = None
    memory: MemoryStore | None = None
    gate: GateNetwork | None = None
    baseline: ItemKNN | SessionKNN | None = None
    known_items: int | None = None  # items registered before the test stream
    train_counts: Sequence[int] | None = None


@dataclass
class MetricsTimeline:
    label: str
    ranks: np.ndarray
    gates: np.ndarray
    is_new: np.ndarray
    freqs: np.ndarray
    targets: np.ndarray
    cadence: int
    response_seconds: float = 0.0
    checks: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ranks)

    def hits(self, k: int) -> np.ndarray:
        return (self.ranks <= k).astype(np.float64)

    def reciprocal(self, k: int) -> np.ndarray:
        return np.where(self.ranks <= k, 1.0 / self.ranks, 0.0)

    def hr(self, k: int = 5) -> float:
        return float(self.hits(k).mean()) if len(self) else float("nan")

    def mrr(self, k: int = 5) -> float:
        return float(self.reciprocal(k).mean()) if len(self) else float("nan")

    def batch_ends(self) -> np.ndarray:
        n = len(self)
        ends = np.arange(self.cadence, n + 1, self.cadence)
        if n and (len(ends) == 0 or ends[-1] != n):
            ends = np.append(ends, n)
        return ends

    def cumulative(self, k: int = 5, metric: str = "hr") -> np.ndarray:
        vals = self.hits(k) if metric == "hr" else self.reciprocal(k)
        ends = self.batch_ends()
        return np.cumsum(vals)[ends - 1] / ends

    def windowed(self, k: int = 5, window: int = 10_000) -> np.ndarray:
        hits = np.concatenate([[0.0], np.cumsum(self.hits(k))])
        ends = self.batch_ends()
        starts = np.maximum(ends - window, 0)
        return (hits[ends] - hits[starts]) / (ends - starts)

    @property
    def new_event_fraction(self) -> float:
        return float(self.is_new.mean()) if len(self) else 0.0

    @property
    def mean_response_ms(self) -> float:
        return 1000.0 * self.response_seconds / max(len(self), 1)

    def summary(self) -> dict:
        return {
            "model": self.label,
            "events": len(self),
            "new_event_fraction": self.new_event_fraction,
            "HR@5": self.hr(5),
            "MRR@5": self.mrr(5),
            "HR@20": self.hr(20),
            "MRR@20": self.mrr(20),
        }


def frequency_buckets(freqs: np.ndarray, targets: np.ndarray, ranks: np.ndarray, n_buckets: int = 5, k: int = 5) -> list[dict]:
    """HR@k per training-frequency bucket of the target item.

    Items are ordered by (frequency, index) and cut so each bucket holds
    about the same number of events; an item lands in the bucket that
    contains the midpoint of its events. Bucket 1 is the least frequent.
    """
    freqs, targets, ranks = map(np.asarray, (freqs, targets, ranks))
    if len(targets) == 0:
        raise ValueError("no events to bucket")
    items, inverse, counts = np.unique(targets, return_inverse=True, return_counts=True)
    item_freq = np.zeros(len(items), dtype=np.int64)
    item_freq[inverse] = freqs
    order = np.lexsort((items, item_freq))
    cum = np.cumsum(counts[order])
    midpoints = cum - counts[order] / 2.0
    bucket_of_sorted = np.minimum((midpoints / len(targets) * n_buckets).astype(np.int64), n_buckets - 1)
    bucket_of_item = np.empty(len(items), dtype=np.int64)
    bucket_of_item[order] = bucket_of_sorted
    event_bucket = bucket_of_item[inverse]
    hits = ranks <= k
    rows = []
    for b in range(n_buckets):
        sel = event_bucket == b
        in_items = bucket_of_item == b
        rows.append({
            "bucket": b + 1,
            "events": int(sel.sum()),
            "items": int(in_items.sum()),
            "min_freq": int(item_freq[in_items].min()) if in_items.any() else None,
            "max_freq": int(item_freq[in_items].max()) if in_items.any() else None,
            f"HR@{k}": float(hits[sel].mean()) if sel.any() else float("nan"),
        })
    return rows


def _check(conditions: dict, strict: bool, key: str, ok: bool, detail: str) -> None:
    if not ok:
        conditions["violations"] += 1
        if strict:
            raise InvariantViolation(f"{key}: {detail}")


def run_prequential(bundle: Bundle, stream: Sequence[StreamEvent], config: PrequentialConfig, label: str | None = None) -> MetricsTimeline:
    """Predict each test event, record the target's rank, then learn from it.

    Per event: register unseen items, encode the prefix, mix neural and
    memory predictions, rank the target, insert the event into memory.
    After every ``cadence`` events the recommender and gate take one SGD
    step on that batch (unless the variant keeps them fixed); baselines
    absorb the batch at the same cadence.
    """
    cfg = config
    variant = cfg.variant
    model, memory, gate = bundle.model, bundle.memory, bundle.gate
    if cfg.uses_neural and model is None:
        raise ComponentMissing(f"variant {variant} needs a trained recommender")
    if cfg.uses_memory and memory is None:
        raise ComponentMissing(f"variant {variant} needs a built memory")
    if variant in ("man", "man-fixed", "man-bounded") and gate is None:
        raise ComponentMissing(f"variant {variant} needs a fitted gate")
    if variant in BASELINES and bundle.baseline is None:
        raise ComponentMissing(f"variant {variant} needs a fitted baseline")
    if variant == "man-bounded" and memory.config.capacity is None:
        raise ComponentMissing("man-bounded needs a memory with finite capacity")

    if variant == "man-shallow":
        mixer = FixedGate(cfg.shallow_weight)
    elif variant == "memory":
        mixer = FixedGate(0.0)
    else:
        mixer = gate

    vocab = model.vocab if model is not None else bundle.vocab
    register = model.ensure_item if model is not None else vocab.add
    known = bundle.known_items if bundle.known_items is not None else len(vocab)
    counts = bundle.train_counts if bundle.train_counts is not None else vocab.counts[:known]

    n = len(stream)
    ranks = np.zeros(n, dtype=np.int64)
    gates = np.ones(n)
    targets = np.zeros(n, dtype=np.int64)
    checks = {"violations": 0, "max_sum_err_neural": 0.0, "max_sum_err_memory": 0.0, "max_sum_err_mixed": 0.0,
              "max_memory_support": 0, "memory_predictions": 0}
    response = 0.0
    B = cfg.cadence
    for lo in range(0, n, B):
        batch = stream[lo : lo + B]
        started = time.perf_counter()
        pairs, n_at = [], []
        for ev in batch:
            prefix = [register(i) for i in ev.prefix]
            target = register(ev.target)
            pairs.append((prefix, target))
            n_at.append(len(vocab))
        prefixes = [p for p, _ in pairs]
        C = probs_all = None
        if cfg.uses_neural:
            # fixed shapes keep a batch's numbers independent of how many events follow it
            C = model.encode_batch(prefixes, pad_to=B)
            C_pad = _pad_rows(C, B)
            probs_all = C_pad @ model.params["dec_W"].T + model.params["dec_b"]
            w_batch = mixer.forward(C_pad)[: len(C)] if cfg.uses_memory else None
        p_n_t = np.zeros(len(batch))
        p_m_t = np.zeros(len(batch))
        for j, ev in enumerate(batch):
            i = lo + j
            prefix, target = pairs[j]
            targets[i] = target
            if cfg.uses_neural:
                row = probs_all[j, : n_at[j]].astype(np.float64)
                row -= row.max()
                np.exp(row, out=row)
                row /= row.sum()
                p_n = row
                p_n_t[j] = p_n[target]
                err = abs(p_n.sum() - 1.0)
                checks["max_sum_err_neural"] = max(checks["max_sum_err_neural"], err)
                _check(checks, cfg.strict, "neural", err <= SUM_TOL, f"P^N sums to 1{err:+.2e}")
                if cfg.uses_memory:
                    p_m = memory.predict(C[j], cfg.K, cfg.nprobe)
                    if not p_m.is_empty:
                        checks["memory_predictions"] += 1
                        err = abs(p_m.probs.sum() - 1.0)
                        checks["max_sum_err_memory"] = max(checks["max_sum_err_memory"], err)
                        checks["max_memory_support"] = max(checks["max_memory_support"], len(p_m))
                        _check(checks, cfg.strict, "memory", err <= SUM_TOL, f"P^M sums to 1{err:+.2e}")
                        _check(checks, cfg.strict, "memory", len(p_m) <= cfg.K, f"support {len(p_m)} > K")
                    p_m_t[j] = p_m.prob(target)
                    w = float(w_batch[j])
                    _check(checks, cfg.strict, "gate", 0.0 <= w <= 1.0, f"gate output {w}")
                    mixed, w_eff = combine(p_n, p_m, w)
                    err = abs(mixed.sum() - 1.0)
                    checks["max_sum_err_mixed"] = max(checks["max_sum_err_mixed"], err)
                    _check(checks, cfg.strict, "mixed", err <= SUM_TOL, f"P^MAN sums to 1{err:+.2e}")
                    ranks[i] = dense_rank(mixed, target)
                    gates[i] = w_eff
                    memory.insert(C[j], target)
                else:
                    ranks[i] = dense_rank(p_n, target)
            else:
                pred = bundle.baseline.predict(prefix) if isinstance(bundle.baseline, ItemKNN) \
                    else bundle.baseline.predict(prefix, exclude=ev.session_id)
                ranks[i] = sparse_rank(pred, target)
        response += time.perf_counter() - started
        if len(batch) == B:
            if cfg.uses_neural and cfg.uses_memory and cfg.learns_gate:
                mixer.incremental_step(np.asarray(C, dtype=np.float64), p_n_t, p_m_t, cfg.gate_lr)
            if cfg.uses_neural and cfg.neural_lr > 0.0:
                model.incremental_update(pairs, cfg.neural_lr, strict=cfg.strict)
            if bundle.baseline is not None and not cfg.uses_neural:
                bundle.baseline.update((ev.session_id, p, t) for ev, (p, t) in zip(batch, pairs))

    freqs = np.array([counts[t] if t < known else 0 for t in targets], dtype=np.int64)
    return MetricsTimeline(
        label=label or variant,
        ranks=ranks,
        gates=gates,
        is_new=targets >= known,
        freqs=freqs,
        targets=targets,
        cadence=B,
        response_seconds=response,
        checks=checks,
    )


def _pad_rows(X: np.ndarray, rows: int) -> np.ndarray:
    if len(X) == rows:
        return X
    out = np.zeros((rows,) + X.shape[1:], dtype=X.dtype)
    out[: len(X)] = X
    return out
