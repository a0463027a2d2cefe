"""IVF-PQ approximate nearest-neighbour index, built from scratch.

A coarse k-means quantizer routes vectors to inverted lists; residuals
against the coarse centroid are product-quantized to one byte per
subspace. Queries scan the `nprobe` nearest lists with per-subspace
asymmetric-distance lookup tables. An exact brute-force search with the
same tie-break rule (lower row id wins) serves as the recall oracle.

Indexes are read-only once populated and may be shared across threads;
adding requires exclusive access.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .store import EmbeddingMatrix

INDEX_MAGIC = b"IVPQ"
INDEX_VERSION = 1
PAD_ID = np.uint64(2**64 - 1)

_HEADER = struct.Struct("<4sI")
_CONFIG_BLOCK = struct.Struct("<IIIIIB3xIQ")

_METRICS = ("l2", "ip")


@dataclass(frozen=True)
class IvfPqConfig:
    nlist: int = 256
    m: int = 16
    nbits: int = 8
    nprobe: int = 32
    metric: str = "l2"
    kmeans_iters: int = 25
    train_seed: int = 0

    def __post_init__(self):
        if self.nlist < 1 or self.m < 1:
            raise ValueError("nlist and m must be at least 1")
        if self.nbits != 8:
            raise ValueError("only nbits=8 (256-entry codebooks) is supported")
        if not 1 <= self.nprobe <= self.nlist:
            raise ValueError("nprobe must be in [1, nlist]")
        if self.metric not in _METRICS:
            raise ValueError(f"metric must be one of {_METRICS}")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be at least 1")

    @property
    def ksub(self) -> int:
        return 1 << self.nbits


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x, dtype=np.float32)


def _assign_nearest(data: np.ndarray, centroids: np.ndarray, chunk: int = 16384):
    """Nearest centroid per row; returns (assignments, squared distances)."""
    c2 = _sq_norms(centroids)
    assign = np.empty(data.shape[0], dtype=np.int64)
    dist = np.empty(data.shape[0], dtype=np.float32)
    for lo in range(0, data.shape[0], chunk):
        part = data[lo : lo + chunk]
        d = _sq_norms(part)[:, None] + c2[None, :] - 2.0 * (part @ centroids.T)
        a = np.argmin(d, axis=1)
        assign[lo : lo + chunk] = a
        dist[lo : lo + chunk] = d[np.arange(part.shape[0]), a]
    np.maximum(dist, 0.0, out=dist)
    return assign, dist


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia_history: list


def kmeans(data: np.ndarray, k: int, iters: int, seed: int) -> KmeansResult:
    """Lloyd's algorithm with k-means++ init and empty-cluster repair.

    Empty clusters steal the point of the largest cluster farthest from
    its centroid; per-iteration inertia is non-increasing. Deterministic
    for a fixed seed.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    n = data.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, data.shape[1]), dtype=np.float32)
    centroids[0] = data[rng.integers(n)]
    d2 = _sq_norms(data - centroids[0]).astype(np.float64)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centroids[i] = data[pick]
        np.minimum(d2, _sq_norms(data - centroids[i]), out=d2)

    inertia_history: list[float] = []
    prev_assign = None
    for _ in range(iters):
        assign, dist = _assign_nearest(data, centroids)
        inertia_history.append(float(dist.sum(dtype=np.float64)))
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = members[np.argmax(dist[members])]
            assign[far] = empty
            dist[far] = 0.0
            counts[big] -= 1
            counts[empty] = 1
        sums = np.zeros((k, data.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, data)
        centroids = (sums / counts[:, None]).astype(np.float32)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
    return KmeansResult(centroids=centroids, assignments=prev_assign, inertia_history=inertia_history)


@dataclass
class SearchResult:
    """Top-k matches per query, distance-sorted with id tie-break.

    Rows with fewer than k matches are padded with PAD_ID / +-inf and
    flagged through `lengths`.
    """

    query_ids: np.ndarray
    ids: np.ndarray
    distances: np.ndarray
    lengths: np.ndarray
    metric: str
    k: int


def _top_k(key: np.ndarray, ids: np.ndarray, k: int):
    """Smallest k by (key, id) lexicographic order; exact under ties."""
    n = key.shape[0]
    k_eff = min(k, n)
    if k_eff == 0:
        return ids[:0], key[:0]
    if n > k_eff:
        kth = np.partition(key, k_eff - 1)[k_eff - 1]
        cand = np.flatnonzero(key <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], key[cand]))[:k_eff]
    top = cand[order]
    return ids[top], key[top]


def _result_from_lists(query_ids, per_query, k, metric):
    nq = len(per_query)
    ids = np.full((nq, k), PAD_ID, dtype=np.uint64)
    pad = np.float32(np.inf if metric == "l2" else -np.inf)
    dists = np.full((nq, k), pad, dtype=np.float32)
    lengths = np.zeros(nq, dtype=np.int64)
    for i, (top_ids, top_vals) in enumerate(per_query):
        c = top_ids.shape[0]
        ids[i, :c] = top_ids
        dists[i, :c] = top_vals
        lengths[i] = c
    return SearchResult(
        query_ids=np.asarray(query_ids, dtype=np.uint64),
        ids=ids,
        distances=dists,
        lengths=lengths,
        metric=metric,
        k=k,
    )


def exact_search(db: EmbeddingMatrix, queries: EmbeddingMatrix, k: int, metric: str = "l2") -> SearchResult:
    """Brute-force top-k over the whole database (the recall oracle)."""
    if metric not in _METRICS:
        raise ValueError(f"metric must be one of {_METRICS}")
    if db.count == 0:
        raise ValueError("database must be nonempty")
    if db.dim != queries.dim:
        raise ValueError(f"dim mismatch: db {db.dim} vs queries {queries.dim}")
    if k < 1:
        raise ValueError("k must be at least 1")
    x = db.data
    x2 = _sq_norms(x)
    per_query = []
    chunk = max(1, int(2**24 // max(db.count, 1)))
    for lo in range(0, queries.count, chunk):
        q = queries.data[lo : lo + chunk]
        if metric == "l2":
            key = _sq_norms(q)[:, None] + x2[None, :] - 2.0 * (q @ x.T)
            np.maximum(key, 0.0, out=key)
        else:
            key = -(q @ x.T)
        for r in range(q.shape[0]):
            top_ids, top_key = _top_k(key[r], db.ids, k)
            per_query.append((top_ids, top_key if metric == "l2" else -top_key))
    return _result_from_lists(queries.ids, per_query, k, metric)


class IvfPqIndex:
    """Trained coarse quantizer + PQ codebooks + inverted lists."""

    def __init__(self, config: IvfPqConfig, dim: int, coarse_centroids, codebooks, exact_codes=False):
        if dim % config.m != 0:
            raise ValueError(f"dim {dim} not divisible by m={config.m}")
        self.config = config
        self.dim = dim
        self.dsub = dim // config.m
        self.coarse_centroids = np.ascontiguousarray(coarse_centroids, dtype=np.float32)
        self.codebooks = np.ascontiguousarray(codebooks, dtype=np.float32)
        if self.coarse_centroids.shape != (config.nlist, dim):
            raise ValueError("coarse centroid shape mismatch")
        if self.codebooks.shape != (config.m, config.ksub, self.dsub):
            raise ValueError("codebook shape mismatch")
        if not np.isfinite(self.coarse_centroids).all() or not np.isfinite(self.codebooks).all():
            raise ValueError("quantizer tensors must be finite")
        self.exact_codes = exact_codes
        self._list_ids = [[] for _ in range(config.nlist)]
        self._list_payload = [[] for _ in range(config.nlist)]
        self._ids = set()
        self.ntotal = 0
        # ADC constants reused across queries: ||r_code||^2 per subspace and
        # <centroid_j, r_code> per (list, subspace, code).
        self._code_sq = None
        self._cent_code_ip = None

    @property
    def trained(self) -> bool:
        return True

    def clone_trained(self) -> "IvfPqIndex":
        """Fresh empty index sharing this index's trained quantizers."""
        return IvfPqIndex(
            self.config, self.dim, self.coarse_centroids, self.codebooks,
            exact_codes=self.exact_codes,
        )

    def _list_arrays(self, c: int):
        ids_chunks = self._list_ids[c]
        if len(ids_chunks) == 0:
            return None, None
        if len(ids_chunks) > 1:
            self._list_ids[c] = [np.concatenate(ids_chunks)]
            self._list_payload[c] = [np.concatenate(self._list_payload[c], axis=0)]
        return self._list_ids[c][0], self._list_payload[c][0]

    def encode_residuals(self, residuals: np.ndarray) -> np.ndarray:
        """Exhaustive nearest-codebook-entry search per subspace."""
        n = residuals.shape[0]
        codes = np.empty((n, self.config.m), dtype=np.uint8)
        for j in range(self.config.m):
            sub = residuals[:, j * self.dsub : (j + 1) * self.dsub]
            assign, _ = _assign_nearest(sub, self.codebooks[j])
            codes[:, j] = assign
        return codes

    def decode_codes(self, codes: np.ndarray) -> np.ndarray:
        """Reconstruct residual vectors from PQ codes."""
        parts = [self.codebooks[j][codes[:, j]] for j in range(self.config.m)]
        return np.concatenate(parts, axis=1)

    def _adc_tables(self):
        if self._code_sq is None:
            m, dsub = self.config.m, self.dsub
            self._code_sq = (self.codebooks**2).sum(axis=2)
            cents = self.coarse_centroids.reshape(self.config.nlist, m, dsub)
            self._cent_code_ip = np.einsum("lmd,mkd->lmk", cents, self.codebooks)
        return self._code_sq, self._cent_code_ip


def train_index(config: IvfPqConfig, training_data: EmbeddingMatrix, *, exact_codes: bool = False) -> IvfPqIndex:
    """Train coarse centroids and per-subspace residual codebooks.

    With `exact_codes=True` (test hook) inverted lists later store raw
    float residuals instead of codes, making search distances exact.
    """
    dim = training_data.dim
    if dim % config.m != 0:
        raise ValueError(f"dim {dim} not divisible by m={config.m}")
    floor = max(config.nlist, config.ksub)
    if training_data.count < floor:
        raise ValueError(
            f"need at least max(nlist, {config.ksub}) = {floor} training rows, "
            f"got {training_data.count}"
        )
    data = np.array(training_data.data)
    coarse = kmeans(data, config.nlist, config.kmeans_iters, config.train_seed)
    assign, _ = _assign_nearest(data, coarse.centroids)
    residuals = data - coarse.centroids[assign]
    dsub = dim // config.m
    codebooks = np.empty((config.m, config.ksub, dsub), dtype=np.float32)
    for j in range(config.m):
        sub = np.ascontiguousarray(residuals[:, j * dsub : (j + 1) * dsub])
        seed_j = int(np.random.SeedSequence([config.train_seed, j + 1]).generate_state(1)[0])
        codebooks[j] = kmeans(sub, config.ksub, config.kmeans_iters, seed_j).centroids
    return IvfPqIndex(config, dim, coarse.centroids, codebooks, exact_codes=exact_codes)


def add(index: IvfPqIndex, vectors: EmbeddingMatrix) -> None:
    """Encode vectors into the inverted lists; rejects duplicate ids."""
    if vectors.count == 0:
        return
    if vectors.dim != index.dim:
        raise ValueError(f"dim mismatch: index {index.dim} vs vectors {vectors.dim}")
    for rid in vectors.ids.tolist():
        if rid in index._ids:
            raise ValueError(f"row id {rid} already present in the index")
    index._ids.update(vectors.ids.tolist())

    assign, _ = _assign_nearest(vectors.data, index.coarse_centroids)
    residuals = vectors.data - index.coarse_centroids[assign]
    payload = residuals if index.exact_codes else index.encode_residuals(residuals)
    order = np.argsort(assign, kind="stable")
    sorted_assign = assign[order]
    boundaries = np.searchsorted(sorted_assign, np.arange(index.config.nlist + 1))
    for c in range(index.config.nlist):
        lo, hi = boundaries[c], boundaries[c + 1]
        if lo == hi:
            continue
        sel = order[lo:hi]
        index._list_ids[c].append(vectors.ids[sel].copy())
        index._list_payload[c].append(np.ascontiguousarray(payload[sel]))
        index._list_arrays(c)  # consolidate now; index is read-only during search
    index.ntotal += vectors.count


def search(index: IvfPqIndex, queries: EmbeddingMatrix, k: int) -> SearchResult:
    """ADC search over the nprobe nearest inverted lists per query.

    For L2, the distance to a stored code decomposes as
    ||q - c||^2 + sum_j (||r_j||^2 - 2<q_j, r_j> + 2<c_j, r_j>), so the
    per-subspace lookup tables are assembled from cached code norms and
    centroid-code inner products plus one small GEMM per query.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if index.ntotal == 0:
        raise ValueError("index is empty; add vectors before searching")
    if queries.dim != index.dim:
        raise ValueError(f"dim mismatch: index {index.dim} vs queries {queries.dim}")
    cfg = index.config
    m, dsub = cfg.m, index.dsub
    cents = index.coarse_centroids
    cents_sq = _sq_norms(cents)
    if not index.exact_codes:
        code_sq, cent_code_ip = index._adc_tables()
    col = np.arange(m)[None, :]
    per_query = []
    for r in range(queries.count):
        q = queries.data[r]
        cdist = cents_sq - 2.0 * (cents @ q) + np.float32(q @ q)
        probes = np.lexsort((np.arange(cfg.nlist), cdist))[: cfg.nprobe]
        if not index.exact_codes:
            a = np.einsum("mkd,md->mk", index.codebooks, q.reshape(m, dsub))
            if cfg.metric == "l2":
                base = code_sq - 2.0 * a
            else:
                base = -a
        cand_ids = []
        cand_keys = []
        for c in probes:
            ids_c, payload_c = index._list_arrays(int(c))
            if ids_c is None:
                continue
            if index.exact_codes:
                qc = q - cents[c]
                if cfg.metric == "l2":
                    diff = payload_c - qc
                    key = np.einsum("ij,ij->i", diff, diff, dtype=np.float32)
                else:
                    key = -(payload_c @ q) - np.float32(q @ cents[c])
            else:
                if cfg.metric == "l2":
                    lut = base + 2.0 * cent_code_ip[c]
                    const = cdist[c]
                else:
                    lut = base
                    const = -np.float32(q @ cents[c])
                key = const + lut[col, payload_c].sum(axis=1, dtype=np.float32)
            cand_ids.append(ids_c)
            cand_keys.append(key.astype(np.float32))
        if cand_ids:
            all_ids = np.concatenate(cand_ids)
            all_keys = np.concatenate(cand_keys)
            top_ids, top_keys = _top_k(all_keys, all_ids, k)
        else:
            top_ids = np.empty(0, dtype=np.uint64)
            top_keys = np.empty(0, dtype=np.float32)
        if cfg.metric == "ip":
            top_keys = -top_keys
        per_query.append((top_ids, top_keys))
    return _result_from_lists(queries.ids, per_query, k, cfg.metric)


def serialize_index(index: IvfPqIndex, path) -> None:
    """Write the index in the IVPQ binary format (little-endian)."""
    if index.exact_codes:
        raise ValueError("exact-codes test indexes cannot be serialized")
    cfg = index.config
    path = Path(path)
    metric_code = _METRICS.index(cfg.metric)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION))
        f.write(
            _CONFIG_BLOCK.pack(
                index.dim, cfg.nlist, cfg.m, cfg.nbits, cfg.nprobe,
                metric_code, cfg.kmeans_iters, cfg.train_seed,
            )
        )
        f.write(np.ascontiguousarray(index.coarse_centroids, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(index.codebooks, dtype="<f4").tobytes())
        for c in range(cfg.nlist):
            ids_c, codes_c = index._list_arrays(c)
            n_c = 0 if ids_c is None else ids_c.shape[0]
            f.write(struct.pack("<Q", n_c))
            if n_c:
                f.write(np.ascontiguousarray(ids_c, dtype="<u8").tobytes())
                f.write(np.ascontiguousarray(codes_c, dtype=np.uint8).tobytes())


def deserialize_index(path) -> IvfPqIndex:
    """Load an IVPQ file; truncation or bad magic raises FormatError."""
    path = Path(path)
    raw = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated index file at offset {pos}")
        out = raw[pos : pos + n]
        pos += n
        return out

    magic, version = _HEADER.unpack(take(_HEADER.size))
    if magic != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    dim, nlist, m, nbits, nprobe, metric_code, kmeans_iters, train_seed = _CONFIG_BLOCK.unpack(
        take(_CONFIG_BLOCK.size)
    )
    if metric_code >= len(_METRICS):
        raise FormatError(f"{path}: unknown metric code {metric_code}")
    config = IvfPqConfig(
        nlist=nlist, m=m, nbits=nbits, nprobe=nprobe,
        metric=_METRICS[metric_code], kmeans_iters=kmeans_iters, train_seed=train_seed,
    )
    dsub = dim // m
    cents = np.frombuffer(take(nlist * dim * 4), dtype="<f4").reshape(nlist, dim).copy()
    books = np.frombuffer(take(m * config.ksub * dsub * 4), dtype="<f4").reshape(
        m, config.ksub, dsub
    ).copy()
    index = IvfPqIndex(config, dim, cents, books)
    for c in range(nlist):
        (n_c,) = struct.unpack("<Q", take(8))
        if n_c == 0:
            continue
        ids_c = np.frombuffer(take(n_c * 8), dtype="<u8").copy()
        codes_c = np.frombuffer(take(n_c * m), dtype=np.uint8).reshape(n_c, m).copy()
        index._list_ids[c].append(ids_c)
        index._list_payload[c].append(codes_c)
        index._ids.update(ids_c.tolist())
        index.ntotal += int(n_c)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after index payload")
    if len(index._ids) != index.ntotal:
        raise FormatError(f"{path}: duplicate row ids in index payload")
    return index
