"""Frobenius-norm baseline, embedding index, exact Euclidean top-k and evaluation."""

from collections import Counter
from dataclasses import dataclass
import hashlib
import json
import struct

import numpy as np

from .errors import (BadMagicError, DimensionMismatchError, DuplicateIdError, EmptyTestSetError,
                     IoFailure, MalformedError, TruncatedError, VersionUnsupportedError)
from ._fileio import atomic_write_bytes

FIDX_MAGIC = b"FIDX"
FIDX_VERSION = 1
FIDX_HEADER = struct.Struct("<4sHIIB32s")
MODES = {"raw": 0, "learned": 1}


# -- Frobenius baseline ----------------------------------------------------------

def frobenius_norm(fm) -> float:
    """sqrt of the sum of squared entries, accumulated in float64."""
    a = np.asarray(getattr(fm, "features", fm), dtype=np.float64)
    return float(np.sqrt(np.sum(np.abs(a) ** 2)))


def frobenius_rank(query, db):
    """Rank ``db`` entries ``(id, family, norm)`` by ``|norm_q - norm_d|``.

    ``query`` is either a norm or a feature matrix. Most similar first;
    equal scores fall back to ascending id.
    """
    qn = query if np.isscalar(query) else frobenius_norm(query)
    scored = [(abs(float(qn) - float(n)), int(i), int(f)) for i, f, n in db]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [(i, f, s) for s, i, f in scored]


# -- index ------------------------------------------------------------------------------

def provenance_digest(**parts) -> bytes:
    """32-byte SHA-256 of a canonical JSON rendering of ``parts``."""
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).digest()


@dataclass
class RetrievalIndex:
    ids: np.ndarray         # (n,) int64, ascending
    families: np.ndarray    # (n,) int64
    embeddings: np.ndarray  # (n, dim) float32
    mode: str = "raw"
    digest: bytes = bytes(32)

    @property
    def dimension(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.ids)

    def embedding(self, model_id: int) -> np.ndarray:
        pos = np.searchsorted(self.ids, model_id)
        if pos >= len(self.ids) or self.ids[pos] != model_id:
            raise KeyError(f"model {model_id} not in index")
        return self.embeddings[pos]

    def family_of(self, model_id: int) -> int:
        return int(self.families[np.searchsorted(self.ids, model_id)])

    def __eq__(self, other):
        return (isinstance(other, RetrievalIndex) and self.mode == other.mode
                and self.digest == other.digest
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.families, other.families)
                and self.embeddings.shape == other.embeddings.shape
                and self.embeddings.tobytes() == other.embeddings.tobytes())


def build_index(entries, mode: str = "raw", digest: bytes = bytes(32)) -> RetrievalIndex:
    """Index from ``(id, family, embedding)`` triples, sorted by id."""
    entries = list(entries)
    if not entries:
        raise DimensionMismatchError("cannot build an empty index")
    if mode not in MODES:
        raise ValueError(f"unknown index mode {mode!r}")
    if len(digest) != 32:
        raise ValueError("provenance digest must be 32 bytes")
    dims = {np.asarray(e[2]).reshape(-1).shape[0] for e in entries}
    if len(dims) != 1:
        raise DimensionMismatchError(f"embeddings have mixed dimensions {sorted(dims)}")
    ids = np.array([int(e[0]) for e in entries], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        dup = [i for i, c in Counter(ids.tolist()).items() if c > 1]
        raise DuplicateIdError(f"duplicate model ids {dup[:5]}")
    order = np.argsort(ids, kind="stable")
    fams = np.array([int(e[1]) for e in entries], dtype=np.int64)[order]
    embs = np.stack([np.asarray(e[2], dtype=np.float32).reshape(-1) for e in entries])[order]
    return RetrievalIndex(ids[order], fams, np.ascontiguousarray(embs), mode, bytes(digest))


def query(index: RetrievalIndex, emb, k: int = 5, exclude_id=None):
    """Exact k nearest entries by Euclidean distance as ``(id, family, distance)``.

    Distances are computed in float64; ties break by ascending id.
    """
    q = np.asarray(emb, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dimension:
        raise DimensionMismatchError(f"query has dimension {q.shape[0]}, index {index.dimension}")
    if k < 1:
        raise ValueError("k must be >= 1")
    diff = index.embeddings.astype(np.float64) - q
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.lexsort((index.ids, dist))
    if exclude_id is not None:
        order = order[index.ids[order] != exclude_id]
    order = order[:k]
    return [(int(index.ids[i]), int(index.families[i]), float(dist[i])) for i in order]


# -- FIDX I/O -----------------------------------------------------------------------------

def _entry_dtype(dim):
    return np.dtype([("id", "<u4"), ("family", "<u2"), ("emb", "<f4", (dim,))])


def encode_index(index: RetrievalIndex) -> bytes:
    header = FIDX_HEADER.pack(FIDX_MAGIC, FIDX_VERSION, index.dimension, len(index),
                              MODES[index.mode], index.digest)
    rec = np.zeros(len(index), dtype=_entry_dtype(index.dimension))
    rec["id"] = index.ids
    rec["family"] = index.families
    rec["emb"] = index.embeddings
    return header + rec.tobytes()


def decode_index(data: bytes) -> RetrievalIndex:
    if len(data) < 4 or data[:4] != FIDX_MAGIC:
        raise BadMagicError("not an FIDX file")
    if len(data) < FIDX_HEADER.size:
        raise TruncatedError("FIDX header truncated")
    _, version, dim, count, mode, digest = FIDX_HEADER.unpack_from(data)
    if version != FIDX_VERSION:
        raise VersionUnsupportedError(f"FIDX version {version} not supported")
    modes = {v: k for k, v in MODES.items()}
    if mode not in modes:
        raise MalformedError(f"unknown index mode code {mode}")
    if dim == 0 or count == 0:
        raise MalformedError(f"FIDX declares dimension {dim}, count {count}")
    dt = _entry_dtype(dim)
    if len(data) != FIDX_HEADER.size + count * dt.itemsize:
        raise TruncatedError(
            f"FIDX declares {count} entries of {dt.itemsize} bytes, payload is {len(data) - FIDX_HEADER.size}")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=FIDX_HEADER.size)
    return RetrievalIndex(rec["id"].astype(np.int64), rec["family"].astype(np.int64),
                          np.ascontiguousarray(rec["emb"], dtype=np.float32), modes[mode], bytes(digest))


def save_index(index: RetrievalIndex, path) -> None:
    atomic_write_bytes(path, encode_index(index))


def load_index(path) -> RetrievalIndex:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return decode_index(data)


# -- evaluation ------------------------------------------------------------------------------

def ranking_metrics(results, k: int = 5) -> dict:
    """Accuracy figures from ``(true_family, retrieved_families)`` pairs.

    Top-1 counts queries whose first hit shares the family, top-k those with
    the family anywhere in the first ``k``. The confusion summary lists, per
    query family, the two foreign families retrieved most often in the top k
    (count descending, family id ascending).
    """
    results = list(results)
    if not results:
        raise EmptyTestSetError("no queries to evaluate")
    top1 = sum(1 for t, got in results if got and got[0] == t)
    topk = sum(1 for t, got in results if t in got[:k])
    foreign = {}
    per_family = Counter()
    for t, got in results:
        per_family[t] += 1
        c = foreign.setdefault(t, Counter())
        c.update(f for f in got[:k] if f != t)
    confusion = {}
    for fam in sorted(per_family):
        ranked = sorted(foreign[fam].items(), key=lambda kv: (-kv[1], kv[0]))[:2]
        confusion[fam] = {
            "queries": per_family[fam],
            "top1_hits": sum(1 for t, got in results if t == fam and got and got[0] == t),
            "most_confused": [[f, n] for f, n in ranked],
        }
    return {"n_queries": len(results), "k": k, "top1": top1 / len(results),
            "topk": topk / len(results), "per_family": confusion}


def evaluate(index: RetrievalIndex, test_ids, k: int = 5, test_embeddings=None) -> dict:
    """Query every test model against the whole index, excluding itself.

    Embeddings come from the index unless ``test_embeddings`` maps id ->
    vector.
    """
    test_ids = list(test_ids)
    if not test_ids:
        raise EmptyTestSetError("test set is empty")
    results = []
    for mid in test_ids:
        emb = index.embedding(mid) if test_embeddings is None else test_embeddings[mid]
        hits = query(index, emb, k, exclude_id=mid)
        results.append((index.family_of(mid), [f for _, f, _ in hits]))
    return ranking_metrics(results, k)


def evaluate_frobenius(norms, test_ids, k: int = 5) -> dict:
    """Baseline metrics; ``norms`` is a list of ``(id, family, frobenius_norm)``."""
    test_ids = list(test_ids)
    if not test_ids:
        raise EmptyTestSetError("test set is empty")
    by_id = {int(i): (int(f), float(n)) for i, f, n in norms}
    results = []
    for mid in test_ids:
        fam, qn = by_id[mid]
        ranked = frobenius_rank(qn, [(i, f, n) for i, f, n in norms if int(i) != mid])
        results.append((fam, [f for _, f, _ in ranked[:k]]))
    return ranking_metrics(results, k)
