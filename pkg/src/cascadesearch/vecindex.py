"""Exact and approximate nearest-neighbor indexes over unit vectors.

Scoring is cosine similarity computed as an inner product, which is why
every indexed vector must already be unit-normalized (normalization is
an ingest-time step, not a search-time one).  Scores are accumulated in
float64 regardless of the float32 storage dtype.  Whenever two
candidates tie on score, the smaller image id wins; approximation in
the graph index may change *which* ids come back, never their scores.

Both index kinds serialize to the same ``CIDX`` container: little-endian
header (magic ``CIDX``, u16 version = 1, u8 kind, u8 metric, u32 dim,
u64 count), a u32-length-prefixed kind-specific parameter block, the
float32 vector payload, the u64 id payload, a graph adjacency payload
for the HNSW kind, and a trailing CRC32C over all preceding bytes.  The
checksum is verified before any parsing, so a flipped byte anywhere in
the file surfaces as a corruption error.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import CorruptionError, FormatError

CIDX_MAGIC = b"CIDX"
CIDX_VERSION = 1
KIND_FLAT = 0
KIND_HNSW = 1
METRIC_COSINE = 0

_CIDX_HEADER = struct.Struct("<4sHBBIQ")
_NO_ENTRY = 2**64 - 1

_NORM_TOL = 1e-4


def _build_crc_tables() -> list[list[int]]:
    poly = 0x82F63B78  # Castagnoli, reflected
    tables = [[0] * 256 for _ in range(8)]
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ (poly if crc & 1 else 0)
        tables[0][i] = crc
    for s in range(1, 8):
        for i in range(256):
            c = tables[s - 1][i]
            tables[s][i] = (c >> 8) ^ tables[0][c & 0xFF]
    return tables


_CRC_TABLES = _build_crc_tables()


def crc32c(data: bytes) -> int:
    """CRC32C (Castagnoli) of ``data``, slice-by-8."""
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC_TABLES
    crc = 0xFFFFFFFF
    head = len(data) - len(data) % 8
    for i in range(0, head, 8):
        lo = crc ^ int.from_bytes(data[i : i + 4], "little")
        hi = int.from_bytes(data[i + 4 : i + 8], "little")
        crc = (
            t7[lo & 0xFF]
            ^ t6[(lo >> 8) & 0xFF]
            ^ t5[(lo >> 16) & 0xFF]
            ^ t4[lo >> 24]
            ^ t3[hi & 0xFF]
            ^ t2[(hi >> 8) & 0xFF]
            ^ t1[(hi >> 16) & 0xFF]
            ^ t0[hi >> 24]
        )
    for b in data[head:]:
        crc = (crc >> 8) ^ t0[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


class SearchResult(NamedTuple):
    image_id: int
    score: float


def _check_gallery(ids: np.ndarray, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise ValueError("vectors must be a 2-d array")
    if ids.shape != (vectors.shape[0],):
        raise ValueError(
            f"id count {ids.shape} does not match vector rows {vectors.shape[0]}"
        )
    if len(set(ids.tolist())) != ids.shape[0]:
        raise ValueError("duplicate ids in index input")
    if vectors.shape[0]:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= _NORM_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(
                f"vectors must be unit-normalized before indexing; row {bad} "
                f"has norm {norms[bad]:.6f}"
            )
    return ids, vectors


def _check_query(query: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise ValueError(f"query dim {q.shape[0]} does not match index dim {dim}")
    if not np.isfinite(q).all():
        raise ValueError("query vector has non-finite components")
    return q


def _top_k(scores: np.ndarray, ids: np.ndarray, k: int) -> list[SearchResult]:
    """Largest-score k with ties broken by ascending id, exact."""
    n = scores.shape[0]
    if k >= n:
        order = np.lexsort((ids, -scores))
    else:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
        order = cand[np.lexsort((ids[cand], -scores[cand]))][:k]
    return [SearchResult(int(ids[i]), float(scores[i])) for i in order]


class FlatIndex:
    """Exhaustive exact scan.  The correctness reference for everything else."""

    kind = "flat"

    def __init__(self, dim: int, ids: np.ndarray, vectors: np.ndarray):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.ids, self.vectors = _check_gallery(ids, vectors)
        if self.vectors.shape[0] == 0:
            self.vectors = self.vectors.reshape(0, dim)
        elif self.vectors.shape[1] != dim:
            raise ValueError(
                f"vector dim {self.vectors.shape[1]} does not match declared dim {dim}"
            )
        self.dim = dim
        self._dense = self.vectors.astype(np.float64)

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    def search(self, query: np.ndarray, k: int) -> list[SearchResult]:
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        if self.count == 0:
            return []
        q = _check_query(query, self.dim)
        scores = self._dense @ q
        return _top_k(scores, self.ids, min(k, self.count))


@dataclass(frozen=True)
class HnswParams:
    m: int = 16
    ef_construction: int = 200
    ef_search_default: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"m must be at least 2, got {self.m}")
        if self.ef_construction < self.m:
            raise ValueError("ef_construction must be at least m")
        if self.ef_search_default < 1:
            raise ValueError("ef_search_default must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def m0(self) -> int:
        return 2 * self.m

    @property
    def level_norm(self) -> float:
        return 1.0 / math.log(self.m)


class HnswIndex:
    """Layered small-world graph with exact rescoring.

    Node levels come from the geometric rule ``floor(-ln(u) * level_norm)``
    with ``u`` drawn in (0, 1] from a PCG64 stream seeded by
    ``params.seed``, one draw per node in insertion (= input row) order.
    Neighbor selection is plain closest-by-distance; over-full neighbor
    lists are pruned back to the cap keeping the closest, ties by
    ascending image id.  There is deliberately no diversity heuristic.
    """

    kind = "hnsw"

    def __init__(self, dim, ids, vectors, params, levels, adjacency, entry):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.ids, self.vectors = _check_gallery(ids, vectors)
        if self.vectors.shape[0] == 0:
            self.vectors = self.vectors.reshape(0, dim)
        elif self.vectors.shape[1] != dim:
            raise ValueError(
                f"vector dim {self.vectors.shape[1]} does not match declared dim {dim}"
            )
        self.dim = dim
        self.params = params
        self.levels = levels
        self._adj = adjacency
        self._entry = entry
        self._max_level = max(levels) if levels else 0
        self._dense = self.vectors.astype(np.float64)
        self._id_keys = [int(i) for i in self.ids]

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    @classmethod
    def build(cls, dim: int, ids, vectors, params: HnswParams = HnswParams()) -> "HnswIndex":
        rng = np.random.Generator(np.random.PCG64(params.seed))
        n = np.asarray(ids).shape[0]
        levels = [int(-math.log(1.0 - rng.random()) * params.level_norm) for _ in range(n)]
        index = cls(
            dim=dim,
            ids=ids,
            vectors=vectors,
            params=params,
            levels=levels,
            adjacency=[[[] for _ in range(lvl + 1)] for lvl in levels],
            entry=-1,
        )
        index._max_level = 0
        for node in range(n):
            index._insert(node)
        return index

    # --- graph construction -------------------------------------------------

    def _insert(self, node: int) -> None:
        level = self.levels[node]
        if self._entry < 0:
            self._entry = node
            self._max_level = level
            return
        q = self._dense[node]
        ep = self._entry
        for layer in range(self._max_level, level, -1):
            ep = self._greedy(q, ep, layer)
        eps = [ep]
        for layer in range(min(level, self._max_level), -1, -1):
            cands = self._search_layer(q, eps, layer, self.params.ef_construction)
            cap = self.params.m0 if layer == 0 else self.params.m
            chosen = [node_idx for _, node_idx in cands[:cap]]
            self._adj[node][layer] = list(chosen)
            for nb in chosen:
                lst = self._adj[nb][layer]
                lst.append(node)
                if len(lst) > cap:
                    self._prune(nb, layer, cap)
            eps = [node_idx for _, node_idx in cands]
        if level > self._max_level:
            self._max_level = level
            self._entry = node

    def _prune(self, owner: int, layer: int, cap: int) -> None:
        lst = self._adj[owner][layer]
        arr = np.asarray(lst, dtype=np.intp)
        dists = -(self._dense[arr] @ self._dense[owner])
        order = np.lexsort((self.ids[arr], dists))
        self._adj[owner][layer] = [int(arr[i]) for i in order[:cap]]

    # --- traversal -----------------------------------------------------------

    def _greedy(self, q: np.ndarray, start: int, layer: int) -> int:
        cur = start
        cur_dist = float(-(self._dense[cur] @ q))
        while True:
            nbrs = self._adj[cur][layer]
            if not nbrs:
                return cur
            dists = -(self._dense[nbrs] @ q)
            j = int(np.argmin(dists))
            if dists[j] < cur_dist:
                cur = nbrs[j]
                cur_dist = float(dists[j])
            else:
                return cur

    def _search_layer(self, q, eps, layer, ef) -> list[tuple[float, int]]:
        visited = np.zeros(self.count, dtype=bool)
        starts = []
        for e in eps:
            if not visited[e]:
                visited[e] = True
                starts.append(e)
        start_dists = -(self._dense[starts] @ q)
        cand = list(zip(start_dists.tolist(), starts))
        heapq.heapify(cand)
        pool = [(-d, n) for d, n in cand]
        heapq.heapify(pool)
        while len(pool) > ef:
            heapq.heappop(pool)
        worst = -pool[0][0]
        adj = self._adj
        dense = self._dense
        while cand:
            dist, node = heapq.heappop(cand)
            if dist > worst and len(pool) >= ef:
                break
            fresh = [n for n in adj[node][layer] if not visited[n]]
            if not fresh:
                continue
            visited[fresh] = True
            dists = -(dense[fresh] @ q)
            for d, n in zip(dists.tolist(), fresh):
                if len(pool) < ef:
                    heapq.heappush(pool, (-d, n))
                    heapq.heappush(cand, (d, n))
                    worst = -pool[0][0]
                elif d < worst:
                    heapq.heapreplace(pool, (-d, n))
                    heapq.heappush(cand, (d, n))
                    worst = -pool[0][0]
        out = [(-negd, n) for negd, n in pool]
        out.sort(key=lambda t: (t[0], self._id_keys[t[1]]))
        return out

    def search(self, query, k: int, ef_search: int | None = None) -> list[SearchResult]:
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        ef = self.params.ef_search_default if ef_search is None else ef_search
        if ef < k:
            raise ValueError(f"ef_search {ef} must be at least k {k}")
        if self.count == 0:
            return []
        q = _check_query(query, self.dim)
        ep = self._entry
        for layer in range(self._max_level, 0, -1):
            ep = self._greedy(q, ep, layer)
        pool = self._search_layer(q, [ep], 0, ef)
        return [
            SearchResult(self._id_keys[n], -d) for d, n in pool[: min(k, len(pool))]
        ]


# --- serialization ----------------------------------------------------------


def serialize_index(index: FlatIndex | HnswIndex, path) -> None:
    parts = []
    if isinstance(index, FlatIndex):
        kind = KIND_FLAT
        params = b""
    elif isinstance(index, HnswIndex):
        kind = KIND_HNSW
        entry = _NO_ENTRY if index._entry < 0 else index._entry
        params = struct.pack(
            "<IIIQQ",
            index.params.m,
            index.params.ef_construction,
            index.params.ef_search_default,
            index.params.seed,
            entry,
        )
    else:
        raise TypeError(f"cannot serialize index of type {type(index)!r}")
    parts.append(
        _CIDX_HEADER.pack(CIDX_MAGIC, CIDX_VERSION, kind, METRIC_COSINE, index.dim, index.count)
    )
    parts.append(struct.pack("<I", len(params)))
    parts.append(params)
    parts.append(index.vectors.astype("<f4").tobytes())
    parts.append(index.ids.astype("<u8").tobytes())
    if isinstance(index, HnswIndex):
        adj = bytearray()
        for node in range(index.count):
            adj += struct.pack("<I", index.levels[node])
            for layer in range(index.levels[node] + 1):
                nbrs = index._adj[node][layer]
                adj += struct.pack("<I", len(nbrs))
                adj += np.asarray(nbrs, dtype="<u4").tobytes()
        parts.append(bytes(adj))
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", crc32c(payload)))


def deserialize_index(path) -> FlatIndex | HnswIndex:
    data = Path(path).read_bytes()
    if len(data) < _CIDX_HEADER.size + 8:
        raise CorruptionError(f"{path}: file too short to be a CIDX index")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc32c(data[:-4]) != stored_crc:
        raise CorruptionError(f"{path}: checksum mismatch, file is corrupt")
    magic, version, kind, metric, dim, count = _CIDX_HEADER.unpack_from(data, 0)
    if magic != CIDX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CIDX_VERSION:
        raise FormatError(f"{path}: unsupported CIDX version {version}")
    if metric != METRIC_COSINE:
        raise FormatError(f"{path}: unknown metric code {metric}")
    if kind not in (KIND_FLAT, KIND_HNSW):
        raise FormatError(f"{path}: unknown index kind {kind}")
    if dim == 0:
        raise FormatError(f"{path}: declared dim is zero")
    offset = _CIDX_HEADER.size
    (params_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + params_len > len(data) - 4:
        raise CorruptionError(f"{path}: parameter block overruns the file")
    params_raw = data[offset : offset + params_len]
    offset += params_len

    def take(nbytes: int, what: str) -> bytes:
        nonlocal offset
        if offset + nbytes > len(data) - 4:
            raise CorruptionError(f"{path}: truncated {what}")
        out = data[offset : offset + nbytes]
        offset += nbytes
        return out

    vectors = np.frombuffer(take(count * dim * 4, "vector payload"), dtype="<f4")
    vectors = vectors.reshape(count, dim).copy()
    ids = np.frombuffer(take(count * 8, "id payload"), dtype="<u8").copy()

    if kind == KIND_FLAT:
        if params_len != 0:
            raise FormatError(f"{path}: flat index with a non-empty parameter block")
        if offset != len(data) - 4:
            raise CorruptionError(f"{path}: trailing bytes after flat payload")
        return FlatIndex(dim=int(dim), ids=ids, vectors=vectors)

    if params_len != 28:
        raise FormatError(f"{path}: hnsw parameter block must be 28 bytes")
    m, efc, efs, seed, entry = struct.unpack("<IIIQQ", params_raw)
    params = HnswParams(m=m, ef_construction=efc, ef_search_default=efs, seed=seed)
    levels = []
    adjacency = []
    for _ in range(count):
        (lvl,) = struct.unpack("<I", take(4, "adjacency level"))
        layers = []
        for _layer in range(lvl + 1):
            (n_nbrs,) = struct.unpack("<I", take(4, "adjacency count"))
            nbrs = np.frombuffer(take(n_nbrs * 4, "adjacency ids"), dtype="<u4")
            if n_nbrs and nbrs.max() >= count:
                raise CorruptionError(f"{path}: adjacency references a missing node")
            layers.append([int(x) for x in nbrs])
        levels.append(int(lvl))
        adjacency.append(layers)
    if offset != len(data) - 4:
        raise CorruptionError(f"{path}: trailing bytes after adjacency payload")
    entry_idx = -1 if entry == _NO_ENTRY else int(entry)
    if entry_idx >= count or (count > 0 and entry_idx < 0):
        raise CorruptionError(f"{path}: entry point out of range")
    return HnswIndex(
        dim=int(dim),
        ids=ids,
        vectors=vectors,
        params=params,
        levels=levels,
        adjacency=adjacency,
        entry=entry_idx,
    )
