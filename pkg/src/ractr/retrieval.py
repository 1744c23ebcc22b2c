"""BM25 field-match retrieval over categorical records.

A candidate scores the sum, over fields whose ids match the query's (id 0
never matches), of ln((N - n_fv + 0.5) / (n_fv + 0.5)) where n_fv is the
pool frequency of the query's (field, value). Rare matches score high,
values in more than half the pool score negative, and negative scores are
kept: top-k is by score with recency tie-breaks, never by threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import DataError

INDEX_MAGIC = b"RATI"
INDEX_VERSION = 1

ELIGIBILITY = ("earlier", "all")


@dataclass
class RetrievalResult:
    """Top-k neighbors for one query, padded to exactly k slots.

    neighbor_indices holds pool positions, -1 on padded slots; scores are 0.0
    on padded slots; mask marks real neighbors, which always precede padding.
    """
    neighbor_indices: np.ndarray
    scores: np.ndarray
    mask: np.ndarray

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())


class RetrievalIndex:
    """Inverted index over a fixed pool of encoded records."""

    def __init__(self, num_fields: int, pool_field_ids: np.ndarray,
                 timestamps: np.ndarray, record_indices: np.ndarray,
                 postings: dict[tuple[int, int], np.ndarray]):
        self.num_fields = num_fields
        self.pool_size = len(timestamps)
        self.pool_field_ids = pool_field_ids
        self.timestamps = timestamps
        self.record_indices = record_indices
        self.postings = postings
        self.doc_freq = {term: len(idxs) for term, idxs in postings.items()}

    def weight(self, f: int, vid: int) -> float:
        """IDF-style match weight for a (field, value) term; vid may be unseen."""
        n = self.doc_freq.get((f, int(vid)), 0)
        return float(np.log((self.pool_size - n + 0.5) / (n + 0.5)))


def build_index(pool_field_ids: np.ndarray, timestamps: np.ndarray,
                record_indices: np.ndarray | None = None) -> RetrievalIndex:
    """Index a pool. id 0 (missing/OOV) is never indexed and never matches."""
    pool_field_ids = np.asarray(pool_field_ids, dtype=np.int64)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    n, nf = pool_field_ids.shape
    if n == 0:
        raise DataError("cannot build a retrieval index over an empty pool")
    if record_indices is None:
        record_indices = np.arange(n, dtype=np.int64)
    else:
        record_indices = np.asarray(record_indices, dtype=np.int64)

    postings: dict[tuple[int, int], np.ndarray] = {}
    for f in range(nf):
        col = pool_field_ids[:, f]
        order = np.argsort(col, kind="stable")
        sorted_vals = col[order]
        # group positions by value; skip the id-0 block
        uniq, starts = np.unique(sorted_vals, return_index=True)
        bounds = np.append(starts, n)
        for u_i, v in enumerate(uniq):
            if v == 0:
                continue
            idxs = np.sort(order[bounds[u_i]:bounds[u_i + 1]])
            postings[(f, int(v))] = idxs.astype(np.int64)
    return RetrievalIndex(nf, pool_field_ids, timestamps, record_indices, postings)


def bm25_score(index: RetrievalIndex, query_ids: np.ndarray, cand_ids: np.ndarray) -> float:
    """Score one query/candidate pair directly from the formula.

    Fields contribute in ascending field order; a field contributes only when
    the ids are equal and both non-zero.
    """
    total = 0.0
    for f in range(index.num_fields):
        q = int(query_ids[f])
        if q != 0 and q == int(cand_ids[f]):
            total += index.weight(f, q)
    return total


def _eligible_count(index: RetrievalIndex, eligibility: str,
                    query_ts: int | None, query_index: int | None) -> np.ndarray:
    if eligibility == "all":
        return np.ones(index.pool_size, dtype=bool)
    if eligibility == "earlier":
        if query_ts is None or query_index is None:
            raise ValueError("strictly-earlier eligibility needs the query's timestamp and index")
        return (index.timestamps < query_ts) | (
            (index.timestamps == query_ts) & (index.record_indices < query_index))
    raise ValueError(f"eligibility must be one of {ELIGIBILITY}, got {eligibility!r}")


def _topk_select(scores: np.ndarray, positions: np.ndarray, index: RetrievalIndex,
                 k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k among eligible positions: score desc, then timestamp desc,
    then record index desc."""
    m = positions.size
    if m == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    kk = min(k, m)
    if m > 4 * kk and m > 64:
        # narrow with a partition, then resolve boundary ties exactly
        part = np.argpartition(-scores, kk - 1)[:kk]
        tau = scores[part].min()
        keep = np.flatnonzero(scores >= tau)
        scores = scores[keep]
        positions = positions[keep]
    ts = index.timestamps[positions]
    ridx = index.record_indices[positions]
    order = np.lexsort((-ridx, -ts, -scores))[:kk]
    return positions[order], scores[order]


def _pad_result(sel: np.ndarray, sel_scores: np.ndarray, k: int) -> RetrievalResult:
    ni = np.full(k, -1, dtype=np.int64)
    sc = np.zeros(k, dtype=np.float64)
    mk = np.zeros(k, dtype=bool)
    r = sel.size
    ni[:r] = sel
    sc[:r] = sel_scores
    mk[:r] = True
    return RetrievalResult(ni, sc, mk)


def _accumulate_single(index: RetrievalIndex, query_ids: np.ndarray) -> np.ndarray:
    scores = np.zeros(index.pool_size, dtype=np.float64)
    for f in range(index.num_fields):
        q = int(query_ids[f])
        if q == 0:
            continue
        idxs = index.postings.get((f, q))
        if idxs is None:
            continue
        scores[idxs] += index.weight(f, q)
    return scores


def retrieve(index: RetrievalIndex, query_ids: np.ndarray, k: int,
             eligibility: str = "all", query_ts: int | None = None,
             query_index: int | None = None) -> RetrievalResult:
    """Top-k pool neighbors for one query via postings accumulation."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = _accumulate_single(index, np.asarray(query_ids))
    elig = _eligible_count(index, eligibility, query_ts, query_index)
    positions = np.flatnonzero(elig)
    sel, sel_scores = _topk_select(scores[positions], positions, index, k)
    return _pad_result(sel, sel_scores, k)


def retrieve_batch(index: RetrievalIndex, query_ids: np.ndarray, k: int,
                   eligibility: str = "all", query_ts: np.ndarray | None = None,
                   query_index: np.ndarray | None = None,
                   chunk_size: int = 512) -> list[RetrievalResult]:
    """Batched retrieve: term-major score accumulation over query chunks, then
    per-query top-k. Bit-identical to per-query retrieve in any chunking."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query_ids = np.asarray(query_ids, dtype=np.int64)
    nq = query_ids.shape[0]
    results: list[RetrievalResult] = []
    for lo in range(0, nq, chunk_size):
        hi = min(lo + chunk_size, nq)
        qs = query_ids[lo:hi]
        scores = np.zeros((hi - lo, index.pool_size), dtype=np.float64)
        for f in range(index.num_fields):
            col = qs[:, f]
            for v in np.unique(col):
                v = int(v)
                if v == 0:
                    continue
                idxs = index.postings.get((f, v))
                if idxs is None:
                    continue
                rows = np.flatnonzero(col == v)
                scores[rows[:, None], idxs[None, :]] += index.weight(f, v)
        for r in range(hi - lo):
            qi = lo + r
            ts = int(query_ts[qi]) if query_ts is not None else None
            ridx = int(query_index[qi]) if query_index is not None else None
            elig = _eligible_count(index, eligibility, ts, ridx)
            positions = np.flatnonzero(elig)
            sel, sel_scores = _topk_select(scores[r, positions], positions, index, k)
            results.append(_pad_result(sel, sel_scores, k))
    return results


def brute_force_retrieve(index: RetrievalIndex, query_ids: np.ndarray, k: int,
                         eligibility: str = "all", query_ts: int | None = None,
                         query_index: int | None = None) -> RetrievalResult:
    """Reference oracle: score every eligible candidate pairwise and sort by
    (score, timestamp, record index) descending. Independent of the postings
    accumulation path."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    elig = _eligible_count(index, eligibility, query_ts, query_index)
    scored = []
    for pos in np.flatnonzero(elig):
        s = bm25_score(index, query_ids, index.pool_field_ids[pos])
        scored.append((s, int(index.timestamps[pos]), int(index.record_indices[pos]), int(pos)))
    scored.sort(key=lambda t: (t[0], t[1], t[2]), reverse=True)
    top = scored[:k]
    sel = np.asarray([t[3] for t in top], dtype=np.int64)
    sel_scores = np.asarray([t[0] for t in top], dtype=np.float64)
    return _pad_result(sel, sel_scores, k)


def save_index(index: RetrievalIndex, path: str) -> None:
    """Serialize to the RATI container: field-major postings, little-endian."""
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        binio.write_u16(f, INDEX_VERSION)
        binio.write_u32(f, index.num_fields)
        binio.write_u64(f, index.pool_size)
        binio.write_array(f, index.timestamps, "<i8")
        binio.write_array(f, index.record_indices, "<u8")
        binio.write_array(f, index.pool_field_ids, "<u4")
        for fld in range(index.num_fields):
            terms = sorted(v for (ff, v) in index.postings if ff == fld)
            binio.write_u32(f, len(terms))
            for v in terms:
                idxs = index.postings[(fld, v)]
                binio.write_u32(f, v)
                binio.write_u32(f, len(idxs))
                binio.write_array(f, idxs, "<u4")


def load_index(path: str) -> RetrievalIndex:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e}") from None
    with fh:
        magic = binio.read_exact(fh, 4)
        if magic != INDEX_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}")
        version = binio.read_u16(fh)
        if version != INDEX_VERSION:
            raise DataError(f"{path}: unsupported index version {version}")
        nf = binio.read_u32(fh)
        n = binio.read_u64(fh)
        timestamps = binio.read_array(fh, n, "<i8")
        record_indices = binio.read_array(fh, n, "<u8").astype(np.int64)
        pool_field_ids = binio.read_array(fh, n * nf, "<u4").astype(np.int64).reshape(n, nf)
        postings: dict[tuple[int, int], np.ndarray] = {}
        for fld in range(nf):
            n_terms = binio.read_u32(fh)
            for _ in range(n_terms):
                v = binio.read_u32(fh)
                df = binio.read_u32(fh)
                postings[(fld, int(v))] = binio.read_array(fh, df, "<u4").astype(np.int64)
        extra = fh.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after index payload")
    return RetrievalIndex(nf, pool_field_ids, timestamps, record_indices, postings)


def index_from_dataset(ds) -> RetrievalIndex:
    """Index the train slice: the only leakage-safe reference pool."""
    te = ds.train_end
    return build_index(ds.field_ids[:te], ds.timestamps[:te], np.arange(te, dtype=np.int64))
