"""Small numpy neural primitives with hand-written reverse-mode gradients.

Only the fixed architectures used by the recommender and the gate are
covered: embedding lookup, a GRU over padded prefixes, a linear softmax
decoder, SGD/Adam, and a central finite-difference gradient checker.
Vectors are rows: a batch of hidden states has shape ``(B, H)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np


class BackwardError(RuntimeError):
    """Backward pass requested without a cached forward pass."""


class NonFiniteError(FloatingPointError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    return shifted


def check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {name}")


class ParamSet:
    """Named parameters with same-shaped gradient buffers.

    Iteration order is insertion order, which keeps optimizers and
    serialization deterministic.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def set(self, name: str, value: np.ndarray) -> None:
        """Replace a parameter (e.g. after the vocabulary grew).

        A gradient buffer of the wrong shape is dropped and recreated by the
        next :meth:`zero_grad`.
        """
        self.values[name] = value
        g = self.grads.get(name)
        if g is not None and g.shape != value.shape:
            del self.grads[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def zero_grad(self) -> None:
        for name, value in self.values.items():
            g = self.grads.get(name)
            if g is None:
                self.grads[name] = np.zeros_like(value)
            else:
                g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out

    def num_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def equal(self, other: "ParamSet") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.1, dtype=np.float64) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(dtype, copy=False)


# GRU


def gru_step(x: np.ndarray, h: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray) -> np.ndarray:
    """One GRU update for row vector(s) ``x`` and ``h``.

    ``W`` is ``(in, 3H)``, ``U`` is ``(H, 3H)`` and ``b`` is ``(3H,)`` with the
    update gate, reset gate and candidate blocks stacked in that order.
    """
    H = U.shape[0]
    if x.shape[-1] != W.shape[0] or h.shape[-1] != H or W.shape[1] != 3 * H or b.shape != (3 * H,):
        raise ValueError("GRU dimension mismatch")
    xw = x @ W + b
    hu = h @ U[:, : 2 * H]
    z = sigmoid(xw[..., :H] + hu[..., :H])
    r = sigmoid(xw[..., H : 2 * H] + hu[..., H:])
    cand = np.tanh(xw[..., 2 * H :] + (r * h) @ U[:, 2 * H :])
    return (1.0 - z) * h + z * cand


@dataclass
class _GRUCache:
    idx: np.ndarray
    mask: np.ndarray
    xs: list
    hs: list
    zs: list
    rs: list
    cands: list


class GRUEncoder:
    """Embedding table followed by a GRU folded over padded prefixes.

    Parameters live in a shared :class:`ParamSet` under ``embedding``,
    ``gru_W``, ``gru_U`` and ``gru_b``.
    """

    def __init__(self, params: ParamSet):
        self.params = params
        self._cache: _GRUCache | None = None

    @property
    def hidden_size(self) -> int:
        return self.params["gru_U"].shape[0]

    def forward(self, idx: np.ndarray, lengths: np.ndarray, keep_cache: bool = True) -> np.ndarray:
        """Final hidden state for each row of the padded index matrix ``idx``.

        Rows shorter than ``idx.shape[1]`` carry their state through the
        padding untouched.
        """
        E = self.params["embedding"]
        W, U, b = self.params["gru_W"], self.params["gru_U"], self.params["gru_b"]
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 2:
            raise ValueError("idx must be a (batch, time) matrix")
        if idx.size and (idx.min() < 0 or idx.max() >= E.shape[0]):
            raise IndexError("item index outside the embedding table")
        B, T = idx.shape
        H = U.shape[0]
        lengths = np.asarray(lengths)
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(E.dtype)
        h = np.zeros((B, H), dtype=E.dtype)
        xs, hs, zs, rs, cands = [], [], [], [], []
        U_zr, U_h = U[:, : 2 * H], U[:, 2 * H :]
        for t in range(T):
            x = E[idx[:, t]]
            xw = x @ W + b
            hu = h @ U_zr
            z = sigmoid(xw[:, :H] + hu[:, :H])
            r = sigmoid(xw[:, H : 2 * H] + hu[:, H:])
            cand = np.tanh(xw[:, 2 * H :] + (r * h) @ U_h)
            m = mask[:, t : t + 1]
            h_next = (1.0 - z) * h + z * cand
            if keep_cache:
                xs.append(x)
                hs.append(h)
                zs.append(z)
                rs.append(r)
                cands.append(cand)
            h = m * h_next + (1.0 - m) * h
        self._cache = _GRUCache(idx, mask, xs, hs, zs, rs, cands) if keep_cache else None
        return h

    def backward(self, dh: np.ndarray) -> None:
        """Accumulate gradients given d(loss)/d(final hidden state)."""
        if self._cache is None:
            raise BackwardError("GRUEncoder.backward called before forward")
        c = self._cache
        p, g = self.params, self.params.grads
        W, U = p["gru_W"], p["gru_U"]
        H = U.shape[0]
        U_zr, U_h = U[:, : 2 * H], U[:, 2 * H :]
        dE, dW, dU, db = g["embedding"], g["gru_W"], g["gru_U"], g["gru_b"]
        dh = dh.copy()
        for t in reversed(range(len(c.xs))):
            m = c.mask[:, t : t + 1]
            x, h, z, r, cand = c.xs[t], c.hs[t], c.zs[t], c.rs[t], c.cands[t]
            dnext = m * dh
            dprev = (1.0 - m) * dh + dnext * (1.0 - z)
            dz = dnext * (cand - h)
            da_h = dnext * z * (1.0 - cand * cand)
            drh = da_h @ U_h.T
            dr = drh * h
            dprev += drh * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=1)
            da = np.concatenate([da_zr, da_h], axis=1)
            dW += x.T @ da
            db += da.sum(axis=0)
            dU[:, : 2 * H] += h.T @ da_zr
            dU[:, 2 * H :] += (r * h).T @ da_h
            dprev += da_zr @ U_zr.T
            dx = da @ W.T
            np.add.at(dE, c.idx[:, t], dx)
            dh = dprev
        self._cache = None


def pad_prefixes(prefixes, pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pack index sequences into a zero-padded matrix plus lengths.

    ``pad_to`` forces a row count (extra rows are empty and length 0)
    so that batched matrix products keep a fixed shape.
    """
    n = len(prefixes)
    rows = max(n, pad_to or 0)
    T = max((len(p) for p in prefixes), default=1)
    idx = np.zeros((rows, T), dtype=np.int64)
    lengths = np.zeros(rows, dtype=np.int64)
    for i, p in enumerate(prefixes):
        if len(p) == 0:
            raise ValueError("empty prefix")
        idx[i, : len(p)] = p
        lengths[i] = len(p)
    return idx, lengths


# decoder


def linear_softmax_loss(
    c: np.ndarray, weight: np.ndarray, bias: np.ndarray, target: int
) -> tuple[np.ndarray, float]:
    """Softmax of ``weight @ c + bias`` and the cross-entropy of ``target``."""
    if not 0 <= target < weight.shape[0]:
        raise IndexError("target outside the output dimension")
    probs = softmax(weight @ c + bias)
    return probs, float(-np.log(probs[target]))


class SoftmaxDecoder:
    """Linear layer plus softmax cross-entropy over the item vocabulary."""

    def __init__(self, params: ParamSet):
        self.params = params
        self._cache = None

    def forward(self, c: np.ndarray, n_items: int | None = None) -> np.ndarray:
        """Probabilities over the first ``n_items`` rows (default: all)."""
        Wd, bd = self.params["dec_W"], self.params["dec_b"]
        if n_items is not None:
            Wd, bd = Wd[:n_items], bd[:n_items]
        return softmax(c @ Wd.T + bd)

    def loss(self, c: np.ndarray, targets: np.ndarray) -> float:
        """Mean cross-entropy over the batch; caches what backward needs."""
        targets = np.asarray(targets, dtype=np.int64)
        Wd = self.params["dec_W"]
        if targets.size and (targets.min() < 0 or targets.max() >= Wd.shape[0]):
            raise IndexError("target outside the output dimension")
        probs = self.forward(c)
        B = len(targets)
        picked = probs[np.arange(B), targets]
        self._cache = (c, probs, targets)
        return float(-np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny))))

    def backward(self) -> np.ndarray:
        """Accumulate decoder gradients; return d(loss)/dc."""
        if self._cache is None:
            raise BackwardError("SoftmaxDecoder.backward called before loss")
        c, probs, targets = self._cache
        B = len(targets)
        dlogits = probs
        dlogits[np.arange(B), targets] -= 1.0
        dlogits /= B
        g = self.params.grads
        g["dec_W"] += dlogits.T @ c
        g["dec_b"] += dlogits.sum(axis=0)
        dc = dlogits @ self.params["dec_W"]
        self._cache = None
        return dc


# optimizers


class SGD:
    def __init__(self, lr: float, strict: bool = False):
        self.lr = lr
        self.strict = strict

    def step(self, params: ParamSet, names=None) -> None:
        for name in names or list(params):
            g = params.grads[name]
            if self.strict:
                check_finite(f"gradient of {name}", g)
            if self.lr != 0.0:
                params.values[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, strict: bool = False):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.strict = strict
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, names=None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name in names or list(params):
            g = params.grads[name]
            if self.strict:
                check_finite(f"gradient of {name}", g)
            m = self.m.get(name)
            if m is None or m.shape != g.shape:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params.values[name] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def make_optimizer(method: str, lr: float, **kwargs):
    if method == "sgd":
        return SGD(lr, strict=kwargs.get("strict", False))
    if method == "adam":
        return Adam(lr, **kwargs)
    raise ValueError(f"unknown optimizer {method!r}")


# gradient checking


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: ParamSet,
    grads: dict[str, np.ndarray] | None = None,
    epsilon: float = 1e-5,
    n_samples: int = 20,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
    stencil: int = 3,
    per_tensor: bool = False,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` recomputes the loss from the current parameter values.
    Coordinates are sampled per parameter; the relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``. ``stencil=5`` uses
    the fourth-order five-point difference, which resolves gradients too
    small for the three-point rule. With ``per_tensor`` the error of each
    parameter is ``||a - n|| / max(||a||, ||n||, floor)`` over its sampled
    coordinates, which ignores roundoff on near-zero components.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    rng = rng or np.random.default_rng(0)
    grads = grads if grads is not None else params.grads
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        gflat = grads[name].reshape(-1)
        pairs = []
        for k in picks:
            old = flat[k]

            def at(step):
                flat[k] = old + step
                return loss_fn()

            if stencil == 3:
                numeric = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon)
            else:
                numeric = (8.0 * (at(epsilon) - at(-epsilon)) - (at(2 * epsilon) - at(-2 * epsilon))) / (12.0 * epsilon)
            flat[k] = old
            pairs.append((float(gflat[k]), numeric))
        a, n = np.array(pairs).T
        if per_tensor:
            denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
            worst = max(worst, float(np.linalg.norm(a - n)) / denom)
        else:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
