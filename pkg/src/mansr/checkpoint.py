"""Model checkpoints, memory snapshots and run manifests on disk."""

from __future__ import annotations

import json
from pathlib import Path

from . import persistence as ps
from .config import RunConfig
from .gating import GateNetwork
from .memory import MemoryStore
from .pipeline import Artifacts
from .recommender import RecommenderModel


class ConfigMismatch(ps.CheckpointError):
    pass


def save_memory(path: str | Path, memory: MemoryStore) -> str:
    arrays, meta = memory.snapshot()
    return ps.save(path, {"kind": "memory", "meta": meta, **ps.join_prefix("memory", arrays)})


def load_memory(path: str | Path) -> MemoryStore:
    sec = ps.load(path)
    if sec.get("kind") != "memory":
        raise ps.FormatError(f"{path} is not a memory snapshot")
    return MemoryStore.from_snapshot(ps.split_prefix(sec, "memory"), sec["meta"])


def save_checkpoint(path: str | Path, art: Artifacts, cfg: RunConfig, memory_path: str | Path) -> str:
    """Save model, gate and metadata; the memory goes to its own file referenced by digest."""
    memory_path = Path(memory_path)
    digest = save_memory(memory_path, art.memory)
    sections = {
        "kind": "checkpoint",
        "config": cfg.to_dict(),
        "model_meta": art.model.state_meta(),
        "info": {
            "known_items": art.known_items,
            "train_counts": art.train_counts,
            "timings": art.timings,
            "has_gate": art.gate is not None,
            "memory_file": memory_path.name,
            "memory_sha256": digest,
        },
        **ps.join_prefix("model", art.model.state_arrays()),
    }
    if art.gate is not None:
        sections.update(ps.join_prefix("gate", art.gate.state_arrays()))
    return ps.save(path, sections)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None, audit_keys=None) -> tuple[Artifacts, RunConfig]:
    """Load a checkpoint and its memory file.

    With ``cfg`` the stored config echo is audited: every training-time
    key listed in ``audit_keys`` must match.
    """
    path = Path(path)
    sec = ps.load(path)
    if sec.get("kind") != "checkpoint":
        raise ps.FormatError(f"{path} is not a model checkpoint")
    stored = RunConfig.from_dict(sec["config"])
    if cfg is not None:
        for key in audit_keys or ():
            if getattr(cfg, key) != getattr(stored, key):
                raise ConfigMismatch(f"{key}: checkpoint has {getattr(stored, key)!r}, run asks for {getattr(cfg, key)!r}")
    info = sec["info"]
    memory_path = path.with_name(info["memory_file"])
    if not memory_path.exists():
        raise FileNotFoundError(f"memory snapshot {memory_path} referenced by {path} is missing")
    if ps.file_digest(memory_path) != info["memory_sha256"]:
        raise ps.ChecksumError(f"{memory_path} does not match the digest recorded in {path}")
    model = RecommenderModel.from_state(ps.split_prefix(sec, "model"), sec["model_meta"])
    gate = GateNetwork.from_state(ps.split_prefix(sec, "gate")) if info["has_gate"] else None
    art = Artifacts(model, load_memory(memory_path), int(info["known_items"]), list(info["train_counts"]), gate,
                    timings=dict(info["timings"]))
    return art, stored


def write_manifest(path: str | Path, command: str, cfg: RunConfig, outputs: list[str | Path], inputs=()) -> None:
    """List every artifact a command produced, with digests."""
    path = Path(path)
    entries = []
    for p in outputs:
        p = Path(p)
        entries.append({"path": p.name if p.parent == path.parent else str(p), "sha256": ps.file_digest(p)})
    manifest = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(), "inputs": [str(i) for i in inputs],
                "artifacts": entries}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
