"""Stage functions: preprocess, pretrain + memory build, gate fitting, testing.

Each stage works on in-memory objects; the CLI wraps them with file
artifacts.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .baselines import make_baseline
from .config import RunConfig
from .data import (
    DAY_MS,
    PRESETS,
    ColumnMap,
    CorpusSplit,
    ItemVocabulary,
    build_and_filter_sessions,
    event_stream,
    ingest_events,
    keep_recent_fraction,
    temporal_split,
)
from .evaluation import BASELINES, Bundle, MetricsTimeline, run_prequential
from .gating import GateFitResult, GateNetwork, fit_gating
from .memory import MemoryStore
from .recommender import RecommenderModel, session_pairs

log = logging.getLogger(__name__)


def preprocess_lines(lines: Iterable[str], cfg: RunConfig, column_map: ColumnMap | None = None,
                     strict: bool = False) -> tuple[CorpusSplit, dict]:
    cmap = column_map or PRESETS[cfg.preset]
    events, errors = ingest_events(lines, cmap, strict=strict)
    sessions, vocab = build_and_filter_sessions(events, cfg.min_item_support, cfg.min_session_length,
                                                cfg.max_session_length)
    if cfg.recent_fraction < 1.0:
        sessions = keep_recent_fraction(sessions, cfg.recent_fraction)
    split = temporal_split(sessions, int(round(cfg.test_days * DAY_MS)), cfg.valid_fraction)
    stats = {
        "events_read": len(events),
        "bad_lines": len(errors),
        "sessions": len(sessions),
        "items": len(vocab),
    }
    return split, stats


@dataclass
class Artifacts:
    """Trained state handed from stage to stage."""

    model: RecommenderModel
    memory: MemoryStore
    known_items: int
    train_counts: list[int]
    gate: GateNetwork | None = None
    gate_result: GateFitResult | None = None
    timings: dict = field(default_factory=dict)

    def copy(self) -> "Artifacts":
        model = RecommenderModel.from_state(self.model.state_arrays(), self.model.state_meta())
        memory = MemoryStore.from_snapshot(*self.memory.snapshot())
        gate = self.gate.copy() if self.gate is not None else None
        return Artifacts(model, memory, self.known_items, list(self.train_counts), gate, self.gate_result,
                         dict(self.timings))


def train_stage(split: CorpusSplit, cfg: RunConfig) -> Artifacts:
    """Pretrain the recommender on train pairs, then fill and index the memory.

    The vocabulary covers training items only; validation pairs with items
    outside it are skipped for early stopping.
    """
    started = time.perf_counter()
    vocab = ItemVocabulary.from_sessions(split.train)
    model = RecommenderModel(vocab, cfg.model_config(), seed=cfg.seed)
    train_pairs = session_pairs(model, split.train)
    valid_pairs = session_pairs(model, split.valid)
    if not train_pairs:
        raise ValueError("no training pairs after preprocessing")
    result = model.pretrain(train_pairs, valid_pairs, cfg.pretrain_config())
    pretrain_s = time.perf_counter() - started

    t0 = time.perf_counter()
    C = np.concatenate([model.encode_batch([p for p, _ in train_pairs[lo : lo + 2048]])
                        for lo in range(0, len(train_pairs), 2048)])
    memory = MemoryStore(cfg.hidden, cfg.memory_config())
    memory.build(C, np.array([t for _, t in train_pairs], dtype=np.int64))
    memory_s = time.perf_counter() - t0
    log.info("memory built: %d entries in %.1fs", len(memory), memory_s)
    return Artifacts(
        model=model,
        memory=memory,
        known_items=len(vocab),
        train_counts=list(vocab.counts),
        timings={"pretrain_seconds": pretrain_s, "memory_seconds": memory_s, "best_epoch": result.best_epoch},
    )


def gate_stage(art: Artifacts, split: CorpusSplit, cfg: RunConfig) -> Artifacts:
    """Fit the gate on validation pairs with the recommender frozen.

    Validation items are registered first. With ``insert_valid`` the
    validation events are replayed through the memory in time order, as in
    testing, so the gate sees the memory answering for items the neural
    model has never trained on.
    """
    if not split.valid:
        raise ValueError("gate fitting needs a non-empty validation split")
    started = time.perf_counter()
    valid = event_stream(split.valid, interleave=cfg.interleave)
    pairs = [([art.model.ensure_item(i) for i in ev.prefix], art.model.ensure_item(ev.target)) for ev in valid]
    gate, result = fit_gating(art.model, art.memory, pairs, cfg.K, cfg.gate_config(), insert_valid=cfg.insert_valid)
    art.gate, art.gate_result = gate, result
    art.timings["gate_seconds"] = time.perf_counter() - started
    return art


def baseline_bundle(name: str, split: CorpusSplit, cfg: RunConfig, vocab: ItemVocabulary | None = None) -> Bundle:
    """Fit a nonparametric baseline on train + validation sessions."""
    vocab = vocab.copy() if vocab is not None else ItemVocabulary.from_sessions(split.train)
    known = len(vocab)
    counts = list(vocab.counts)
    model = make_baseline(name, k=100, k_sessions=500)
    sessions = []
    for s in list(split.train) + list(split.valid):
        sessions.append((s.session_id, [vocab.add(i) for i in s.items]))
    model.fit(sessions)
    return Bundle(vocab=vocab, baseline=model, known_items=known, train_counts=counts)


def make_bundle(art: Artifacts, cfg: RunConfig) -> Bundle:
    """Fresh copies of the trained state for one test run."""
    fresh = art.copy()
    if cfg.variant == "man-bounded":
        fresh.memory.config.capacity = cfg.capacity
    return Bundle(vocab=fresh.model.vocab, model=fresh.model, memory=fresh.memory, gate=fresh.gate,
                  known_items=art.known_items, train_counts=art.train_counts)


def evaluate_stage(split: CorpusSplit, cfg: RunConfig, art: Artifacts | None = None,
                   label: str | None = None) -> MetricsTimeline:
    stream = event_stream(split.test, interleave=cfg.interleave)
    if cfg.variant in BASELINES:
        vocab = art.model.vocab if art is not None else None
        bundle = baseline_bundle(cfg.variant, split, cfg, vocab)
        if art is not None:
            bundle.known_items, bundle.train_counts = art.known_items, art.train_counts
    else:
        if art is None:
            raise ValueError(f"variant {cfg.variant} needs trained artifacts")
        bundle = make_bundle(art, cfg)
    return run_prequential(bundle, stream, cfg.prequential_config(), label=label)


def run_all(split: CorpusSplit, cfg: RunConfig, variants: Sequence[str]) -> tuple[Artifacts, list[MetricsTimeline]]:
    art = gate_stage(train_stage(split, cfg), split, cfg)
    timelines = []
    for v in variants:
        vcfg = RunConfig(**{**cfg.to_dict(), "variant": v})
        timelines.append(evaluate_stage(split, vcfg, art))
    return art, timelines
