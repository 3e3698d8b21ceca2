"""Gate that mixes the neural and memory predictions per context.

``w(c) = sigmoid(W_o . tanh(W_h c + b_h) + b_o)`` weighs the neural
distribution; the memory distribution gets ``1 - w``. Only the gate is
trained here: the neural recommender and the memory stay frozen, so the
gate just needs, per training example, the encoder output and the two
probabilities assigned to the true next item.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .memory import MemoryPrediction, MemoryStore
from .nn import Adam, BackwardError, ParamSet, SGD, sigmoid, uniform_init

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-10


@dataclass
class GateConfig:
    hidden: int = 100
    lr: float = 1e-3
    train_frac: float = 0.9
    patience: int = 3
    max_epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    init_scale: float = 0.1


class GateNetwork:
    """Single-hidden-layer tanh network with a sigmoid output."""

    def __init__(self, input_dim: int, hidden: int = 100, seed: int = 0, init_scale: float = 0.1, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.params.add("gate_Wh", uniform_init(rng, (input_dim, hidden), init_scale, dtype))
        self.params.add("gate_bh", np.zeros(hidden, dtype=dtype))
        self.params.add("gate_Wo", uniform_init(rng, (hidden,), init_scale, dtype))
        self.params.add("gate_bo", np.zeros(1, dtype=dtype))
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.params["gate_Wh"].shape[0]

    def forward(self, C: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        C = np.atleast_2d(C)
        if C.shape[1] != self.input_dim:
            raise ValueError(f"gate expects dimension {self.input_dim}, got {C.shape[1]}")
        p = self.params
        hidden = np.tanh(C @ p["gate_Wh"] + p["gate_bh"])
        w = sigmoid(hidden @ p["gate_Wo"] + p["gate_bo"][0])
        if keep_cache:
            self._cache = (C, hidden, w)
        return w

    def __call__(self, c: np.ndarray) -> float:
        return float(self.forward(c)[0])

    def backward(self, dw: np.ndarray) -> None:
        """Accumulate parameter gradients given d(loss)/d(w) per row."""
        if self._cache is None:
            raise BackwardError("GateNetwork.backward called before forward")
        C, hidden, w = self._cache
        g, p = self.params.grads, self.params
        da = dw * w * (1.0 - w)
        g["gate_bo"] += da.sum()
        g["gate_Wo"] += hidden.T @ da
        dpre = np.outer(da, p["gate_Wo"]) * (1.0 - hidden * hidden)
        g["gate_bh"] += dpre.sum(0)
        g["gate_Wh"] += C.T @ dpre
        self._cache = None

    def loss(self, C: np.ndarray, p_n: np.ndarray, p_m: np.ndarray, keep_cache: bool = False) -> float:
        w = self.forward(C, keep_cache=keep_cache)
        mix = np.maximum(w * p_n + (1.0 - w) * p_m, PROB_FLOOR)
        return float(-np.mean(np.log(mix)))

    def loss_and_grad(self, C: np.ndarray, p_n: np.ndarray, p_m: np.ndarray) -> float:
        """Mean ``-log(w p_n + (1-w) p_m)``; gradients go to the gate only."""
        self.params.zero_grad()
        w = self.forward(C, keep_cache=True)
        raw = w * p_n + (1.0 - w) * p_m
        mix = np.maximum(raw, PROB_FLOOR)
        dw = np.where(raw > PROB_FLOOR, -(p_n - p_m) / mix, 0.0) / len(w)
        self.backward(dw)
        return float(-np.mean(np.log(mix)))

    def incremental_step(self, C: np.ndarray, p_n: np.ndarray, p_m: np.ndarray, lr: float = 1e-3) -> float | None:
        """One SGD step on the batch; ``lr == 0`` is a no-op."""
        if lr == 0.0 or len(p_n) == 0:
            return None
        loss = self.loss_and_grad(C, p_n, p_m)
        SGD(lr).step(self.params)
        return loss

    def copy(self) -> "GateNetwork":
        out = GateNetwork.__new__(GateNetwork)
        out.params = self.params.copy()
        out._cache = None
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray]) -> "GateNetwork":
        out = cls.__new__(cls)
        out.params = ParamSet()
        for name in ("gate_Wh", "gate_bh", "gate_Wo", "gate_bo"):
            out.params.add(name, np.array(arrays[name], dtype=np.float64))
        out._cache = None
        return out


class FixedGate:
    """Constant mixing weight (the shallow interpolation ablation)."""

    def __init__(self, weight: float):
        if not 0.0 <= weight <= 1.0:
            raise ValueError("mixing weight must lie in [0, 1]")
        self.weight = float(weight)

    def forward(self, C: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        return np.full(len(np.atleast_2d(C)), self.weight)

    def __call__(self, c) -> float:
        return self.weight

    def incremental_step(self, *args, **kwargs):
        return None


def combine(p_n: np.ndarray, p_m: MemoryPrediction, w: float) -> tuple[np.ndarray, float]:
    """``w * p_n + (1 - w) * p_m`` with the sparse memory part zero off-support.

    An empty memory prediction returns ``p_n`` itself and an effective
    weight of 1. Returns the mixed distribution and the weight applied.
    """
    if p_m.is_empty:
        return p_n, 1.0
    out = p_n * w
    out[p_m.items] += (1.0 - w) * p_m.probs
    return out, float(w)


@dataclass
class GateFitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    n_train: int = 0
    n_stop: int = 0


def fit_gate(
    C: np.ndarray, p_n: np.ndarray, p_m: np.ndarray, config: GateConfig | None = None
) -> tuple[GateNetwork, GateFitResult]:
    """Train a gate on fixed (context, neural prob, memory prob) triples.

    A seeded random ``train_frac`` share trains with Adam; the rest drives
    early stopping with ``patience`` epochs. The best held-out epoch wins.
    """
    cfg = config or GateConfig()
    n = len(p_n)
    if n == 0:
        raise ValueError("no validation examples to fit the gate on")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_train = max(1, int(round(cfg.train_frac * n))) if n > 1 else 1
    tr, st = perm[:n_train], perm[n_train:]
    if len(st) == 0:
        st = tr
    gate = GateNetwork(C.shape[1], cfg.hidden, seed=cfg.seed, init_scale=cfg.init_scale)
    opt = Adam(cfg.lr)
    result = GateFitResult(n_train=len(tr), n_stop=len(st))
    best, best_params, stale = gate.loss(C[st], p_n[st], p_m[st]), gate.params.copy(), 0
    result.history.append({"epoch": 0, "stop_loss": best})
    for epoch in range(1, cfg.max_epochs + 1):
        order = tr[rng.permutation(len(tr))]
        for lo in range(0, len(order), cfg.batch_size):
            b = order[lo : lo + cfg.batch_size]
            gate.loss_and_grad(C[b], p_n[b], p_m[b])
            opt.step(gate.params)
        stop_loss = gate.loss(C[st], p_n[st], p_m[st])
        result.history.append({"epoch": epoch, "stop_loss": stop_loss})
        if stop_loss < best - 1e-12:
            best, best_params, stale = stop_loss, gate.params.copy(), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for name in gate.params:
        gate.params[name][...] = best_params[name]
    log.info("gate fitted: best epoch %d, held-out loss %.5f", result.best_epoch, best)
    return gate, result


def gate_examples(
    model,
    memory: MemoryStore,
    pairs: Sequence[tuple[Sequence[int], int]],
    K: int,
    insert: bool = False,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encoder outputs and the neural / memory probability of each target.

    With ``insert`` the pairs are replayed in order: each one is predicted
    from memory first and then stored, as during testing.
    """
    prefixes = [p for p, _ in pairs]
    targets = np.array([t for _, t in pairs], dtype=np.int64)
    C = np.concatenate([model.encode_batch(prefixes[lo : lo + chunk]) for lo in range(0, len(prefixes), chunk)]) \
        if pairs else np.empty((0, model.config.hidden))
    p_n = np.empty(len(pairs))
    for lo in range(0, len(pairs), chunk):
        probs = model.predict_neural(C[lo : lo + chunk])
        p_n[lo : lo + chunk] = probs[np.arange(len(probs)), targets[lo : lo + chunk]]
    p_m = np.empty(len(pairs))
    for i in range(len(pairs)):
        p_m[i] = memory.predict(C[i], K).prob(int(targets[i]))
        if insert:
            memory.insert(C[i], int(targets[i]))
    return C.astype(np.float64, copy=False), p_n, p_m


def fit_gating(model, memory: MemoryStore, valid_pairs, K: int, config: GateConfig | None = None, insert_valid: bool = False):
    """Fit the gate on validation pairs with the recommender and memory frozen."""
    if not valid_pairs:
        raise ValueError("empty validation set")
    C, p_n, p_m = gate_examples(model, memory, valid_pairs, K, insert=insert_valid)
    return fit_gate(C, p_n, p_m, config)
