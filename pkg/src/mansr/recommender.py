"""GRU next-item recommender: embedding -> GRU encoder -> softmax decoder."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import ItemVocabulary
from .nn import Adam, GRUEncoder, ParamSet, SGD, SoftmaxDecoder, check_finite, pad_prefixes, uniform_init

log = logging.getLogger(__name__)

Pair = tuple[Sequence[int], int]


@dataclass
class ModelConfig:
    embed_dim: int = 50
    hidden: int = 100
    init_scale: float = 0.1
    dtype: str = "float64"


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 512  # None or 0: full batch
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    bucket: int = 8  # batches per length-sorted bucket; 0 disables bucketing


@dataclass
class PretrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


class UnknownItemError(KeyError):
    pass


class RecommenderModel:
    """Session encoder/decoder over a growable item vocabulary.

    The embedding table and decoder rows always match the vocabulary size.
    Unseen items are added with :meth:`ensure_item`: they get a random
    embedding row and an all-zero decoder row.
    """

    _GROWN = ("embedding", "dec_W", "dec_b")

    def __init__(self, vocab: ItemVocabulary, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.vocab = vocab
        self.dtype = np.dtype(self.config.dtype)
        self.rng = np.random.default_rng(seed)
        n, D, H = len(vocab), self.config.embed_dim, self.config.hidden
        s, dt = self.config.init_scale, self.dtype
        self.params = ParamSet()
        self._buffers: dict[str, np.ndarray] = {}
        self._grow_buffers(max(n, 1))
        self._buffers["embedding"][:n] = uniform_init(self.rng, (n, D), s, dt)
        self.params.add("embedding", self._buffers["embedding"][:n])
        self.params.add("gru_W", uniform_init(self.rng, (D, 3 * H), s, dt))
        self.params.add("gru_U", uniform_init(self.rng, (H, 3 * H), s, dt))
        self.params.add("gru_b", np.zeros(3 * H, dtype=dt))
        self._buffers["dec_W"][:n] = uniform_init(self.rng, (n, H), s, dt)
        self.params.add("dec_W", self._buffers["dec_W"][:n])
        self.params.add("dec_b", self._buffers["dec_b"][:n])
        self.encoder = GRUEncoder(self.params)
        self.decoder = SoftmaxDecoder(self.params)

    # vocabulary growth

    def _grow_buffers(self, capacity: int) -> None:
        D, H, dt = self.config.embed_dim, self.config.hidden, self.dtype
        shapes = {"embedding": (capacity, D), "dec_W": (capacity, H), "dec_b": (capacity,)}
        for name, shape in shapes.items():
            buf = np.zeros(shape, dtype=dt)
            old = self._buffers.get(name)
            if old is not None:
                buf[: len(old)] = old
            self._buffers[name] = buf

    @property
    def n_items(self) -> int:
        return self.params["dec_W"].shape[0]

    def ensure_item(self, item_id: str) -> int:
        idx = self.vocab.get(item_id)
        if idx is not None and idx < self.n_items:
            return idx
        idx = self.vocab.add(item_id)
        if idx != self.n_items:
            raise RuntimeError("vocabulary and model rows out of sync")
        n = idx + 1
        if n > len(self._buffers["dec_W"]):
            self._grow_buffers(max(2 * len(self._buffers["dec_W"]), n))
        E = self._buffers["embedding"]
        E[idx] = uniform_init(self.rng, (self.config.embed_dim,), self.config.init_scale, self.dtype)
        self._buffers["dec_W"][idx] = 0.0
        self._buffers["dec_b"][idx] = 0.0
        for name in self._GROWN:
            self.params.set(name, self._buffers[name][:n])
        return idx

    def indices(self, items: Sequence[str]) -> list[int]:
        out = []
        for item in items:
            idx = self.vocab.get(item)
            if idx is None or idx >= self.n_items:
                raise UnknownItemError(f"item {item!r} is not registered; call ensure_item first")
            out.append(idx)
        return out

    # inference

    def encode_batch(self, prefixes: Sequence[Sequence[int]], pad_to: int | None = None) -> np.ndarray:
        """Encode many prefixes at once; ``pad_to`` fixes the internal batch shape."""
        idx, lengths = pad_prefixes(prefixes, pad_to)
        return self.encoder.forward(idx, lengths, keep_cache=False)[: len(prefixes)]

    def encode(self, prefix: Sequence[int]) -> np.ndarray:
        return self.encode_batch([prefix])[0]

    def predict_neural(self, c: np.ndarray, n_items: int | None = None) -> np.ndarray:
        """Softmax over the current vocabulary (or its first ``n_items``)."""
        return self.decoder.forward(c, n_items)

    # training

    def loss_and_grad(self, prefixes: Sequence[Sequence[int]], targets: Sequence[int]) -> float:
        """Mean cross-entropy on the batch; gradients land in ``self.params.grads``."""
        self.params.zero_grad()
        idx, lengths = pad_prefixes(prefixes)
        c = self.encoder.forward(idx, lengths)
        loss = self.decoder.loss(c, np.asarray(targets))
        dc = self.decoder.backward()
        self.encoder.backward(dc)
        return loss

    def loss(self, prefixes: Sequence[Sequence[int]], targets: Sequence[int], chunk: int = 2048) -> float:
        total = 0.0
        for lo in range(0, len(prefixes), chunk):
            idx, lengths = pad_prefixes(prefixes[lo : lo + chunk])
            c = self.encoder.forward(idx, lengths, keep_cache=False)
            total += self.decoder.loss(c, np.asarray(targets[lo : lo + chunk])) * len(idx)
        self.decoder._cache = None
        return total / max(len(prefixes), 1)

    def incremental_update(self, pairs: Sequence[Pair], lr: float, strict: bool = False) -> float | None:
        """One plain SGD step on the mean cross-entropy of ``pairs``.

        ``lr == 0`` leaves every parameter bitwise untouched.
        """
        if lr == 0.0 or not pairs:
            return None
        prefixes = [p for p, _ in pairs]
        targets = [t for _, t in pairs]
        loss = self.loss_and_grad(prefixes, targets)
        SGD(lr, strict=strict).step(self.params)
        if strict:
            for name, value in self.params.items():
                check_finite(name, value)
        return loss

    def pretrain(self, train_pairs: Sequence[Pair], valid_pairs: Sequence[Pair] = (), config: PretrainConfig | None = None) -> PretrainResult:
        """Minibatch training on mean cross-entropy; keeps the best-validation epoch."""
        cfg = config or PretrainConfig()
        if not train_pairs:
            raise ValueError("no training pairs")
        started = time.perf_counter()
        rng = np.random.default_rng(cfg.seed)
        if cfg.optimizer == "adam":
            opt = Adam(cfg.lr)
        elif cfg.optimizer == "sgd":
            opt = SGD(cfg.lr)
        else:
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
        prefixes = [list(p) for p, _ in train_pairs]
        targets = np.array([t for _, t in train_pairs], dtype=np.int64)
        lengths = np.array([len(p) for p in prefixes])
        v_prefixes = [list(p) for p, _ in valid_pairs]
        v_targets = [t for _, t in valid_pairs]
        bs = cfg.batch_size or len(prefixes)
        result = PretrainResult()
        best_loss, best_params = np.inf, None
        for epoch in range(cfg.epochs):
            batches = _make_batches(rng, lengths, bs, cfg.bucket)
            total = 0.0
            for batch in batches:
                loss = self.loss_and_grad([prefixes[i] for i in batch], targets[batch])
                opt.step(self.params)
                total += loss * len(batch)
            record = {"epoch": epoch + 1, "train_loss": total / len(prefixes)}
            if v_prefixes:
                record["valid_loss"] = self.loss(v_prefixes, v_targets)
                if record["valid_loss"] < best_loss:
                    best_loss, best_params = record["valid_loss"], self.params.copy()
                    result.best_epoch = epoch + 1
            result.history.append(record)
            log.info("epoch %d %s", epoch + 1, {k: round(v, 5) for k, v in record.items() if k != "epoch"})
        if best_params is not None:
            for name in self.params:
                self.params[name][...] = best_params[name]
        else:
            result.best_epoch = cfg.epochs
        result.seconds = time.perf_counter() - started
        return result

    # persistence helpers

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.ascontiguousarray(value) for name, value in self.params.items()}

    def state_meta(self) -> dict:
        return {"config": asdict(self.config), "vocab": self.vocab.to_dict(), "rng": self.rng.bit_generator.state}

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], meta: dict) -> "RecommenderModel":
        vocab = ItemVocabulary.from_dict(meta["vocab"])
        model = cls.__new__(cls)
        model.config = ModelConfig(**meta["config"])
        model.vocab = vocab
        model.dtype = np.dtype(model.config.dtype)
        model.rng = np.random.default_rng()
        model.rng.bit_generator.state = meta["rng"]
        model.params = ParamSet()
        model._buffers = {}
        n = arrays["dec_W"].shape[0]
        model._grow_buffers(max(n, 1))
        for name in ("embedding", "gru_W", "gru_U", "gru_b", "dec_W", "dec_b"):
            value = np.array(arrays[name], dtype=model.dtype)
            if name in cls._GROWN:
                model._buffers[name][:n] = value
                value = model._buffers[name][:n]
            model.params.add(name, value)
        model.encoder = GRUEncoder(model.params)
        model.decoder = SoftmaxDecoder(model.params)
        return model


def _make_batches(rng: np.random.Generator, lengths: np.ndarray, batch_size: int, bucket: int) -> list[np.ndarray]:
    """Shuffled minibatches; with bucketing, similar lengths share a batch."""
    order = rng.permutation(len(lengths))
    if bucket and batch_size < len(lengths):
        span = batch_size * bucket
        chunks = []
        for lo in range(0, len(order), span):
            chunk = order[lo : lo + span]
            chunks.append(chunk[np.argsort(lengths[chunk], kind="stable")])
        order = np.concatenate(chunks)
    batches = [order[lo : lo + batch_size] for lo in range(0, len(order), batch_size)]
    if bucket:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def session_pairs(model: RecommenderModel, sessions, register: bool = False) -> list[Pair]:
    """Index-space (prefix, target) pairs for every prefix of every session.

    With ``register`` unseen items are added to the model vocabulary;
    otherwise pairs touching unknown items are dropped.
    """
    pairs = []
    for s in sessions:
        if register:
            idx = [model.ensure_item(i) for i in s.items]
        else:
            idx = [model.vocab.get(i) for i in s.items]
        for t in range(1, len(idx)):
            prefix, target = idx[:t], idx[t]
            if target is None or any(i is None for i in prefix):
                continue
            pairs.append((prefix, target))
    return pairs
