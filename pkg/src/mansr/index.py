"""Approximate nearest-neighbour search: k-means inverted lists + product quantization.

The coarse quantizer partitions keys into ``nlist`` inverted lists. Each
stored key keeps only its list id (implicit in which list holds it), an
8-byte payload id and a product-quantized code of its residual to the list
centroid. Queries probe the ``nprobe`` closest lists and score codes with
per-list lookup tables (asymmetric distance computation).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)


class IndexStateError(RuntimeError):
    pass


def sq_dists(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from every row of ``X`` to ``q``."""
    diff = X - q
    return np.einsum("ij,ij->i", diff, diff)


def pairwise_sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _assign(X: np.ndarray, C: np.ndarray, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    labels = np.empty(len(X), dtype=np.int64)
    best = np.empty(len(X), dtype=np.float64)
    for lo in range(0, len(X), chunk):
        d = pairwise_sq_dists(X[lo : lo + chunk], C)
        labels[lo : lo + chunk] = d.argmin(1)
        best[lo : lo + chunk] = d[np.arange(len(d)), labels[lo : lo + chunk]]
    return labels, best


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    closest = sq_dists(X, centers[0])
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            pick = rng.integers(n)
        else:
            pick = min(int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right")), n - 1)
        centers[j] = X[pick]
        np.minimum(closest, sq_dists(X, centers[j]), out=closest)
    return centers


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: list[float]


def kmeans(X: np.ndarray, k: int, iters: int = 25, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    ``objective`` holds the sum of squared distances after each assignment
    step; it never increases. Empty clusters are moved onto the point that
    is currently worst served.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < k:
        raise ValueError(f"k-means needs at least {k} points, got {len(X)}")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, k, rng)
    labels, best = _assign(X, C)
    objective = [float(best.sum())]
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(best.argmax())
            C[j] = X[far]
            best[far] = 0.0
        labels, best = _assign(X, C)
        objective.append(float(best.sum()))
        if objective[-2] - objective[-1] <= 1e-12 * max(objective[-2], 1.0):
            break
    return KMeansResult(C, labels, objective)


class ProductQuantizer:
    """``m`` independent sub-quantizers of ``2**bits`` codewords each."""

    def __init__(self, dim: int, m: int = 8, bits: int = 8):
        if dim % m:
            raise ValueError("dimension must be divisible by the number of sub-quantizers")
        self.dim, self.m, self.bits = dim, m, bits
        self.ksub = 2**bits
        self.dsub = dim // m
        self.codebooks: np.ndarray | None = None  # (m, ksub, dsub)

    @property
    def code_dtype(self):
        return np.uint8 if self.bits <= 8 else np.uint16

    @property
    def code_size(self) -> int:
        return self.m * np.dtype(self.code_dtype).itemsize

    def fit(self, X: np.ndarray, iters: int = 25, seed: int = 0) -> "ProductQuantizer":
        X = np.asarray(X, dtype=np.float64)
        if len(X) < self.ksub:
            warnings.warn(
                f"{len(X)} training vectors for {self.ksub} codewords; duplicating points", RuntimeWarning
            )
            reps = int(math.ceil(self.ksub / max(len(X), 1)))
            X = np.tile(X, (reps, 1))
        books = np.empty((self.m, self.ksub, self.dsub))
        for j in range(self.m):
            sub = X[:, j * self.dsub : (j + 1) * self.dsub]
            books[j] = kmeans(sub, self.ksub, iters, seed + j).centroids
        self.codebooks = books
        return self

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        codes = np.empty((len(X), self.m), dtype=self.code_dtype)
        for j in range(self.m):
            sub = X[:, j * self.dsub : (j + 1) * self.dsub]
            codes[:, j] = pairwise_sq_dists(sub, self.codebooks[j]).argmin(1)
        return codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        return np.concatenate([self.codebooks[j][codes[:, j]] for j in range(self.m)], axis=1)

    def lookup_table(self, r: np.ndarray) -> np.ndarray:
        """``(m, ksub)`` squared distances from each sub-vector of ``r`` to each codeword."""
        sub = r.reshape(self.m, 1, self.dsub)
        diff = self.codebooks - sub
        return np.einsum("mkd,mkd->mk", diff, diff)


@dataclass
class IndexConfig:
    nlist: int | None = None  # None: floor(sqrt(N)) of the fit set, clamped to [1, 65536]
    nprobe: int = 8
    m: int = 8
    bits: int = 8
    kmeans_iters: int = 25
    seed: int = 0
    use_pq: bool = True
    keep_raw: bool = False
    max_points_per_centroid: int = 256


def default_nlist(n: int) -> int:
    return int(min(max(math.isqrt(max(n, 1)), 1), 65536))


class NeighborSet:
    """Up to K neighbours sorted by (distance, payload id)."""

    __slots__ = ("ids", "distances")

    def __init__(self, ids: np.ndarray, distances: np.ndarray):
        self.ids = ids
        self.distances = distances

    @classmethod
    def empty(cls) -> "NeighborSet":
        return cls(np.empty(0, dtype=np.int64), np.empty(0))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d_star(self) -> float:
        return float(self.distances[0])

    def __repr__(self) -> str:
        pairs = ", ".join(f"({i}, {d:.4g})" for i, d in zip(self.ids[:5], self.distances[:5]))
        return f"NeighborSet([{pairs}{', ...' if len(self) > 5 else ''}])"


def select_k(ids: np.ndarray, d2: np.ndarray, K: int) -> NeighborSet:
    """K smallest squared distances, ties broken by ascending id."""
    if len(ids) > K:
        kth = np.partition(d2, K - 1)[K - 1]
        keep = d2 <= kth
        ids, d2 = ids[keep], d2[keep]
    order = np.lexsort((ids, d2))[:K]
    return NeighborSet(ids[order].astype(np.int64, copy=False), np.sqrt(np.maximum(d2[order], 0.0)))


def exact_query(keys: np.ndarray, ids: np.ndarray, q: np.ndarray, K: int) -> NeighborSet:
    """Brute-force Euclidean K nearest neighbours over all ``keys``."""
    if K < 1:
        raise ValueError("K must be positive")
    keys = np.asarray(keys)
    if len(keys) == 0:
        return NeighborSet.empty()
    return select_k(np.asarray(ids, dtype=np.int64), sq_dists(keys, q), K)


class _Growable:
    """Append-only array with amortized doubling."""

    def __init__(self, row_shape: tuple, dtype, capacity: int = 16):
        self._buf = np.empty((capacity,) + row_shape, dtype=dtype)
        self.n = 0

    def extend(self, rows: np.ndarray) -> None:
        need = self.n + len(rows)
        if need > len(self._buf):
            cap = max(need, 2 * len(self._buf))
            buf = np.empty((cap,) + self._buf.shape[1:], dtype=self._buf.dtype)
            buf[: self.n] = self._buf[: self.n]
            self._buf = buf
        self._buf[self.n : need] = rows
        self.n = need

    @property
    def data(self) -> np.ndarray:
        return self._buf[: self.n]

    def compact(self) -> None:
        self._buf = self._buf[: self.n].copy()

    def keep(self, mask: np.ndarray) -> None:
        kept = self.data[mask].copy()
        self._buf, self.n = kept, len(kept)

    @property
    def nbytes(self) -> int:
        return self._buf.nbytes


class FlatIndex:
    """Exhaustive exact index with the same interface as :class:`IVFPQIndex`."""

    def __init__(self, dim: int, dtype=np.float64):
        self.dim = dim
        self._keys = _Growable((dim,), dtype)
        self._ids = _Growable((), np.int64)
        self.is_fitted = True

    def fit(self, X=None) -> "FlatIndex":
        return self

    def __len__(self) -> int:
        return self._ids.n

    def add(self, key: np.ndarray, payload: int) -> None:
        self._keys.extend(np.asarray(key).reshape(1, -1))
        self._ids.extend(np.array([payload], dtype=np.int64))

    def add_batch(self, keys: np.ndarray, payloads: np.ndarray) -> None:
        self._keys.extend(np.asarray(keys).reshape(len(payloads), -1))
        self._ids.extend(np.asarray(payloads, dtype=np.int64))

    def query(self, q: np.ndarray, K: int, nprobe: int | None = None, min_id: int | None = None) -> NeighborSet:
        if K < 1:
            raise ValueError("K must be positive")
        keys, ids = self._keys.data, self._ids.data
        if min_id is not None:
            live = ids >= min_id
            keys, ids = keys[live], ids[live]
        if len(ids) == 0:
            return NeighborSet.empty()
        return select_k(ids, sq_dists(keys, q), K)

    def exact_query(self, q: np.ndarray, K: int, min_id: int | None = None) -> NeighborSet:
        return self.query(q, K, min_id=min_id)

    def purge(self, min_id: int) -> None:
        live = self._ids.data >= min_id
        self._keys.keep(live)
        self._ids.keep(live)

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        return self._keys.data, self._ids.data

    def snapshot(self) -> tuple[dict[str, np.ndarray], dict]:
        return {"keys": self._keys.data.copy(), "ids": self._ids.data.copy()}, {"kind": "flat", "dim": self.dim}

    @classmethod
    def from_snapshot(cls, arrays: dict, meta: dict) -> "FlatIndex":
        idx = cls(meta["dim"], arrays["keys"].dtype)
        idx.add_batch(arrays["keys"], arrays["ids"])
        return idx


class IVFPQIndex:
    """Inverted-file index with optional product quantization of residuals.

    With ``use_pq=False`` lists store raw keys and distances are exact,
    which makes the index an exhaustive search when ``nprobe == nlist``.
    Centroids and codebooks are frozen after :meth:`fit`.
    """

    def __init__(self, dim: int, config: IndexConfig | None = None):
        self.dim = dim
        self.config = config or IndexConfig()
        m = self.config.m
        self.padded_dim = int(math.ceil(dim / m) * m)
        self.centroids: np.ndarray | None = None
        self.pq: ProductQuantizer | None = None
        self._lists_ids: list[_Growable] = []
        self._lists_data: list[_Growable] = []
        self._raw_keys: _Growable | None = None
        self._raw_ids: _Growable | None = None
        self._count = 0

    @property
    def is_fitted(self) -> bool:
        return self.centroids is not None

    @property
    def nlist(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)

    def __len__(self) -> int:
        return self._count

    def _pad(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {X.shape[1]}")
        if self.padded_dim == self.dim:
            return X
        out = np.zeros((len(X), self.padded_dim))
        out[:, : self.dim] = X
        return out

    def fit(self, X: np.ndarray) -> "IVFPQIndex":
        """Train the coarse quantizer and (if enabled) the residual codebooks."""
        cfg = self.config
        Xp = self._pad(X)
        nlist = cfg.nlist or default_nlist(len(Xp))
        if len(Xp) < nlist:
            raise ValueError(f"need at least nlist={nlist} training vectors, got {len(Xp)}")
        rng = np.random.default_rng(cfg.seed)
        cap = nlist * cfg.max_points_per_centroid
        train = Xp[np.sort(rng.choice(len(Xp), cap, replace=False))] if len(Xp) > cap else Xp
        self.centroids = kmeans(train, nlist, cfg.kmeans_iters, cfg.seed).centroids
        if cfg.use_pq:
            if len(train) < 2**cfg.bits:
                warnings.warn(f"only {len(train)} vectors to train {2**cfg.bits} PQ codewords", RuntimeWarning)
            labels, _ = _assign(train, self.centroids)
            pq_cap = cfg.max_points_per_centroid * 2**cfg.bits
            resid = train - self.centroids[labels]
            if len(resid) > pq_cap:
                resid = resid[np.sort(rng.choice(len(resid), pq_cap, replace=False))]
            self.pq = ProductQuantizer(self.padded_dim, cfg.m, cfg.bits).fit(resid, cfg.kmeans_iters, cfg.seed + 1)
        self.reset()
        return self

    def reset(self) -> None:
        """Drop all stored entries, keeping the trained quantizers."""
        if not self.is_fitted:
            raise IndexStateError("index is not fitted")
        self._lists_ids = [_Growable((), np.int64) for _ in range(self.nlist)]
        if self.config.use_pq:
            self._lists_data = [_Growable((self.pq.m,), self.pq.code_dtype) for _ in range(self.nlist)]
        else:
            self._lists_data = [_Growable((self.padded_dim,), np.float64) for _ in range(self.nlist)]
        if self.config.keep_raw:
            self._raw_keys = _Growable((self.dim,), np.float64)
            self._raw_ids = _Growable((), np.int64)
        self._count = 0

    def add(self, key: np.ndarray, payload: int) -> None:
        self.add_batch(np.asarray(key).reshape(1, -1), np.array([payload]))

    def add_batch(self, keys: np.ndarray, payloads: np.ndarray) -> None:
        if not self.is_fitted:
            raise IndexStateError("add called before fit")
        payloads = np.asarray(payloads, dtype=np.int64)
        Xp = self._pad(keys)
        lists, _ = _assign(Xp, self.centroids)
        if self.config.use_pq:
            data = self.pq.encode(Xp - self.centroids[lists])
        else:
            data = Xp
        for lst in np.unique(lists):
            sel = lists == lst
            self._lists_ids[lst].extend(payloads[sel])
            self._lists_data[lst].extend(data[sel])
        if self.config.keep_raw:
            self._raw_keys.extend(Xp[:, : self.dim])
            self._raw_ids.extend(payloads)
        self._count += len(payloads)

    def query(self, q: np.ndarray, K: int, nprobe: int | None = None, min_id: int | None = None) -> NeighborSet:
        """Up to K approximate nearest neighbours of ``q``.

        ``min_id`` masks out entries whose payload id is smaller.
        """
        if not self.is_fitted:
            raise IndexStateError("query called before fit")
        if K < 1:
            raise ValueError("K must be positive")
        nprobe = nprobe or self.config.nprobe
        nprobe = max(1, min(nprobe, self.nlist))
        qp = self._pad(q)[0]
        cd = sq_dists(self.centroids, qp)
        probe = np.argsort(cd, kind="stable")[:nprobe] if nprobe < self.nlist else np.arange(self.nlist)
        all_ids, all_d = [], []
        for lst in probe:
            ids = self._lists_ids[lst].data
            if len(ids) == 0:
                continue
            data = self._lists_data[lst].data
            if self.config.use_pq:
                lut = self.pq.lookup_table(qp - self.centroids[lst])
                d2 = lut[np.arange(self.pq.m), data.astype(np.intp)].sum(1)
            else:
                d2 = sq_dists(data, qp)
            if min_id is not None:
                live = ids >= min_id
                ids, d2 = ids[live], d2[live]
            all_ids.append(ids)
            all_d.append(d2)
        if not all_ids:
            return NeighborSet.empty()
        return select_k(np.concatenate(all_ids), np.concatenate(all_d), K)

    def exact_query(self, q: np.ndarray, K: int, min_id: int | None = None) -> NeighborSet:
        """Brute force over retained raw keys (requires ``keep_raw``)."""
        if self._raw_keys is None:
            raise IndexStateError("raw keys are not retained; build with keep_raw=True")
        keys, ids = self._raw_keys.data, self._raw_ids.data
        if min_id is not None:
            live = ids >= min_id
            keys, ids = keys[live], ids[live]
        return exact_query(keys, ids, np.asarray(q, dtype=np.float64), K)

    def purge(self, min_id: int) -> None:
        """Physically drop entries with payload id below ``min_id``."""
        removed = 0
        for ids, data in zip(self._lists_ids, self._lists_data):
            live = ids.data >= min_id
            removed += int((~live).sum())
            ids.keep(live)
            data.keep(live)
        if self._raw_ids is not None:
            live = self._raw_ids.data >= min_id
            self._raw_keys.keep(live)
            self._raw_ids.keep(live)
        self._count -= removed

    def compact(self) -> None:
        for g in self._lists_ids + self._lists_data:
            g.compact()

    def storage_bytes(self) -> int:
        """Bytes allocated for payload ids and codes (or raw list vectors)."""
        return sum(g.nbytes for g in self._lists_ids + self._lists_data)

    def list_sizes(self) -> np.ndarray:
        return np.array([g.n for g in self._lists_ids], dtype=np.int64)

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        if self._raw_keys is None:
            raise IndexStateError("raw keys are not retained")
        return self._raw_keys.data, self._raw_ids.data

    # snapshot

    def snapshot(self) -> tuple[dict[str, np.ndarray], dict]:
        if not self.is_fitted:
            raise IndexStateError("cannot snapshot an unfitted index")
        sizes = self.list_sizes()
        arrays = {
            "centroids": self.centroids,
            "list_sizes": sizes,
            "list_ids": np.concatenate([g.data for g in self._lists_ids]) if self._count else np.empty(0, np.int64),
        }
        data = [g.data for g in self._lists_data]
        arrays["list_data"] = np.concatenate(data) if self._count else np.empty((0,) + self._lists_data[0].data.shape[1:], self._lists_data[0].data.dtype)
        if self.pq is not None:
            arrays["codebooks"] = self.pq.codebooks
        if self._raw_keys is not None:
            arrays["raw_keys"] = self._raw_keys.data
            arrays["raw_ids"] = self._raw_ids.data
        meta = {"kind": "ivfpq", "dim": self.dim, "config": asdict(self.config), "count": self._count}
        return arrays, meta

    @classmethod
    def from_snapshot(cls, arrays: dict, meta: dict) -> "IVFPQIndex":
        config = IndexConfig(**meta["config"])
        idx = cls(meta["dim"], config)
        idx.centroids = np.array(arrays["centroids"], dtype=np.float64)
        if config.use_pq:
            idx.pq = ProductQuantizer(idx.padded_dim, config.m, config.bits)
            idx.pq.codebooks = np.array(arrays["codebooks"], dtype=np.float64)
        idx.reset()
        offsets = np.concatenate([[0], np.cumsum(arrays["list_sizes"])])
        for lst in range(idx.nlist):
            lo, hi = offsets[lst], offsets[lst + 1]
            idx._lists_ids[lst].extend(arrays["list_ids"][lo:hi])
            idx._lists_data[lst].extend(arrays["list_data"][lo:hi])
        if config.keep_raw:
            idx._raw_keys.extend(arrays["raw_keys"])
            idx._raw_ids.extend(arrays["raw_ids"])
        idx._count = int(meta["count"])
        return idx


def make_index(dim: int, kind: str = "ivfpq", config: IndexConfig | None = None):
    if kind == "flat":
        return FlatIndex(dim)
    if kind == "ivfpq":
        return IVFPQIndex(dim, config)
    raise ValueError(f"unknown index kind {kind!r}")


def index_from_snapshot(arrays: dict, meta: dict):
    if meta["kind"] == "flat":
        return FlatIndex.from_snapshot(arrays, meta)
    return IVFPQIndex.from_snapshot(arrays, meta)
