"""Click-stream ingestion, session assembly, filtering and temporal splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

log = logging.getLogger(__name__)

CORPUS_FORMAT = "mansr-corpus"
CORPUS_VERSION = 1

DAY_MS = 86_400_000


class IngestError(ValueError):
    """Raised on a malformed line when ingestion runs in strict mode."""


class SplitError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    session_id: str
    timestamp: int
    item_id: str


@dataclass(frozen=True)
class LineError:
    line_no: int
    line: str
    reason: str


@dataclass(frozen=True)
class Session:
    """One browser session. ``items`` are external ids ordered by time."""

    session_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self):
        if len(self.items) != len(self.timestamps):
            raise ValueError("items and timestamps differ in length")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def start(self) -> int:
        return self.timestamps[0]


@dataclass
class ColumnMap:
    """Positions of the fields in a delimited line.

    ``day`` is optional: when set, the timestamp column is an offset in
    milliseconds added to the calendar date found in that column (the
    DIGINETICA ``eventdate``/``timeframe`` layout).
    """

    session: int = 0
    timestamp: int = 1
    item: int = 2
    day: int | None = None
    delimiter: str = ","
    quotechar: str = '"'
    skip_header: bool = False
    epoch_unit: str = "s"


PRESETS = {
    "yoochoose": ColumnMap(session=0, timestamp=1, item=2),
    "diginetica": ColumnMap(session=0, timestamp=3, item=2, day=4, delimiter=";", skip_header=True),
    "generic": ColumnMap(),
}

_EPOCH_SCALE = {"s": 1000, "ms": 1}


def parse_timestamp(text: str, epoch_unit: str = "s") -> int:
    """Parse ISO-8601 or an integer/float epoch into milliseconds (UTC)."""
    text = text.strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        value = float(text)
    except ValueError:
        pass
    else:
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"bad epoch value {text!r}")
        return int(round(value * _EPOCH_SCALE[epoch_unit]))
    iso = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
    dt = datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    ms = int(round(dt.timestamp() * 1000))
    if ms < 0:
        raise ValueError("timestamp before epoch")
    return ms


def ingest_events(
    raw_lines: Iterable[str], column_map: ColumnMap | None = None, strict: bool = False
) -> tuple[list[Event], list[LineError]]:
    """Parse delimited lines into events, preserving line order.

    Malformed lines are skipped and reported as :class:`LineError` records,
    or raise :class:`IngestError` when ``strict`` is set.
    """
    cmap = column_map or ColumnMap()
    events: list[Event] = []
    errors: list[LineError] = []
    lines = (line.rstrip("\r\n") for line in raw_lines)
    reader = csv.reader(lines, delimiter=cmap.delimiter, quotechar=cmap.quotechar)
    needed = max(c for c in (cmap.session, cmap.timestamp, cmap.item, cmap.day) if c is not None)
    for line_no, row in enumerate(reader, start=1):
        if line_no == 1 and cmap.skip_header:
            continue
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        try:
            if len(row) <= needed:
                raise ValueError(f"expected at least {needed + 1} fields, got {len(row)}")
            session_id = row[cmap.session].strip()
            item_id = row[cmap.item].strip()
            if not session_id or not item_id:
                raise ValueError("empty session or item id")
            if cmap.day is not None:
                ts = parse_timestamp(row[cmap.day]) + int(row[cmap.timestamp])
            else:
                ts = parse_timestamp(row[cmap.timestamp], cmap.epoch_unit)
        except (ValueError, KeyError) as exc:
            raw = cmap.delimiter.join(row)
            if strict:
                raise IngestError(f"line {line_no}: {exc}") from exc
            errors.append(LineError(line_no, raw, str(exc)))
            continue
        events.append(Event(session_id, ts, item_id))
    if errors:
        log.warning("skipped %d malformed lines", len(errors))
    return events, errors


@dataclass
class ItemVocabulary:
    """Bijection between external item ids and dense indices ``0..n-1``.

    Indices are handed out in registration order and never reused, so the
    vocabulary only grows.
    """

    ids: list[str] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index and self.ids:
            self._index = {item: i for i, item in enumerate(self.ids)}
        if len(self.counts) < len(self.ids):
            self.counts.extend([0] * (len(self.ids) - len(self.counts)))

    @classmethod
    def from_sessions(cls, sessions: Iterable[Session]) -> "ItemVocabulary":
        vocab = cls()
        for session in sessions:
            for item in session.items:
                vocab.counts[vocab.add(item)] += 1
        return vocab

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def add(self, item_id: str) -> int:
        idx = self._index.get(item_id)
        if idx is None:
            idx = len(self.ids)
            self._index[item_id] = idx
            self.ids.append(item_id)
            self.counts.append(0)
        return idx

    def index(self, item_id: str) -> int:
        return self._index[item_id]

    def get(self, item_id: str, default: int | None = None) -> int | None:
        return self._index.get(item_id, default)

    def item(self, idx: int) -> str:
        return self.ids[idx]

    def copy(self) -> "ItemVocabulary":
        return ItemVocabulary(list(self.ids), list(self.counts))

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, data: dict) -> "ItemVocabulary":
        return cls(list(data["ids"]), [int(c) for c in data["counts"]])


def group_sessions(events: Iterable[Event]) -> list[Session]:
    """Group events by session id; stable sort by timestamp inside each group.

    Sessions are returned ordered by (start time, first appearance).
    """
    grouped: dict[str, list[Event]] = defaultdict(list)
    for event in events:
        grouped[event.session_id].append(event)
    sessions = []
    for sid, evs in grouped.items():
        evs.sort(key=lambda e: e.timestamp)
        sessions.append(
            Session(sid, tuple(e.item_id for e in evs), tuple(e.timestamp for e in evs))
        )
    sessions.sort(key=lambda s: s.start)
    return sessions


def build_and_filter_sessions(
    events: Sequence[Event], min_item_support: int = 5, min_len: int = 2, max_len: int = 20
) -> tuple[list[Session], ItemVocabulary]:
    """Assemble sessions and prune rare items and bad-length sessions.

    Item removal and session removal alternate until neither changes the
    corpus, so both constraints hold on the result.
    """
    if not events:
        raise ValueError("no events to build sessions from")
    sessions = group_sessions(events)
    while True:
        support = Counter(item for s in sessions for item in s.items)
        changed = False
        pruned = []
        for s in sessions:
            keep = [k for k, item in enumerate(s.items) if support[item] >= min_item_support]
            if len(keep) != len(s):
                changed = True
                s = Session(s.session_id, tuple(s.items[k] for k in keep), tuple(s.timestamps[k] for k in keep))
            if min_len <= len(s) <= max_len:
                pruned.append(s)
            else:
                changed = True
        sessions = pruned
        if not changed:
            break
    sessions.sort(key=lambda s: s.start)
    return sessions, ItemVocabulary.from_sessions(sessions)


@dataclass
class CorpusSplit:
    train: list[Session]
    valid: list[Session]
    test: list[Session]
    valid_cut: int | None
    test_cut: int

    def sessions(self, name: str) -> list[Session]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def temporal_split(
    sessions: Sequence[Session], test_window: int, valid_fraction: float = 0.1
) -> CorpusSplit:
    """Split whole sessions by start time.

    ``test_window`` is in milliseconds. Sessions starting within the final
    window form the test set; the most recent ``valid_fraction`` of the rest
    (counted in sessions) form the validation set.
    """
    if not sessions:
        raise SplitError("empty corpus")
    if not 0.0 <= valid_fraction < 1.0:
        raise SplitError("valid_fraction must lie in [0, 1)")
    end = max(s.timestamps[-1] for s in sessions)
    first = min(s.start for s in sessions)
    if test_window > end - first:
        raise SplitError(f"test window {test_window} ms exceeds corpus span {end - first} ms")
    test_cut = end - test_window
    ordered = sorted(sessions, key=lambda s: s.start)
    test = [s for s in ordered if s.start >= test_cut]
    rest = [s for s in ordered if s.start < test_cut]
    n_valid = int(math.floor(valid_fraction * len(rest) + 1e-9))
    split_at = len(rest) - n_valid
    train, valid = rest[:split_at], rest[split_at:]
    valid_cut = valid[0].start if valid else None
    return CorpusSplit(train, valid, test, valid_cut, test_cut)


def keep_recent_fraction(sessions: Sequence[Session], fraction: float) -> list[Session]:
    """Keep the latest ``fraction`` of sessions by start time."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    ordered = sorted(sessions, key=lambda s: s.start)
    keep = int(math.ceil(fraction * len(ordered)))
    return ordered[len(ordered) - keep:]


def expand_prefixes(session: Sequence) -> list[tuple[tuple, object]]:
    """All (prefix, next item) pairs of a session, in order.

    Accepts a :class:`Session` or any sequence of items.
    """
    items = session.items if isinstance(session, Session) else tuple(session)
    if len(items) < 2:
        raise ValueError("a session needs at least two events to form a prefix")
    return [(tuple(items[: t + 1]), items[t + 1]) for t in range(len(items) - 1)]


@dataclass(frozen=True)
class StreamEvent:
    """A (prefix, target) pair placed on the global test timeline."""

    session_id: str
    timestamp: int
    prefix: tuple[str, ...]
    target: str


def event_stream(sessions: Iterable[Session], interleave: bool = True) -> list[StreamEvent]:
    """Turn sessions into predictable events ordered by target timestamp.

    With ``interleave`` false, sessions are replayed contiguously in start
    order instead.
    """
    stream = []
    for s in sessions:
        for t in range(1, len(s)):
            stream.append(StreamEvent(s.session_id, s.timestamps[t], s.items[:t], s.items[t]))
    if interleave:
        stream.sort(key=lambda e: e.timestamp)  # stable: ties keep session order
    return stream


# processed corpus file


def write_corpus(path: str | Path, split: CorpusSplit, meta: dict | None = None) -> None:
    """Write a split corpus as line-delimited JSON with a version header."""
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "valid_cut": split.valid_cut,
        "test_cut": split.test_cut,
        "counts": {k: len(split.sessions(k)) for k in ("train", "valid", "test")},
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name in ("train", "valid", "test"):
            for s in split.sessions(name):
                rec = {"split": name, "session_id": s.session_id, "items": list(s.items), "timestamps": list(s.timestamps)}
                fh.write(json.dumps(rec) + "\n")


def read_corpus(path: str | Path) -> tuple[CorpusSplit, dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: unreadable header") from exc
        if header.get("format") != CORPUS_FORMAT:
            raise CorpusFormatError(f"{path}: not a processed corpus file")
        if header.get("version") != CORPUS_VERSION:
            raise CorpusFormatError(f"{path}: unsupported corpus version {header.get('version')}")
        parts: dict[str, list[Session]] = {"train": [], "valid": [], "test": []}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            parts[rec["split"]].append(
                Session(str(rec["session_id"]), tuple(rec["items"]), tuple(int(t) for t in rec["timestamps"]))
            )
    split = CorpusSplit(parts["train"], parts["valid"], parts["test"], header["valid_cut"], header["test_cut"])
    for name, n in header.get("counts", {}).items():
        if len(split.sessions(name)) != n:
            raise CorpusFormatError(f"{path}: expected {n} {name} sessions, found {len(split.sessions(name))}")
    return split, header


def iter_lines(path: str | Path) -> Iterator[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        yield from fh
