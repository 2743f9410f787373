"""Centroid token index with exact MaxSim re-ranking.

All document tokens are clustered with k-means; each token is posted under its
nearest centroid. A query probes the ``n_probe`` centroids nearest to each of its
tokens, collects every document owning a token there, and re-scores those
candidates with exact MaxSim on the stored (float32-representable) embeddings.

On-disk layout of an index directory (little-endian):

    meta.json      {"version", "dim", "num_docs", "num_tokens", "num_centroids", "config"}
    centroids.bin  u32 K, u32 dim, K*dim float32
    postings.bin   u32 K, then per centroid: u32 n, n * (u32 doc_index, u32 token_row)
    docs.bin       LIRE embedding file, documents in ascending doc_id order
"""

from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from kbvqa.config import IndexConfig
from kbvqa.embeddings import read_embedding_file, write_embedding_file
from kbvqa.errors import ConfigurationError, DimensionError, FormatError
from kbvqa.logging_config import get_logger
from kbvqa.numerics import Mat
from kbvqa.retrieval import RelevanceScore, max_sim

logger = get_logger("index")

INDEX_VERSION = 1
_U32 = struct.Struct("<I")
INDEX_FILES = ("meta.json", "centroids.bin", "postings.bin", "docs.bin")


def _f32(mat) -> Mat:
    return np.asarray(mat, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class CentroidIndex:
    centroids: Mat
    postings: list[np.ndarray]   # per centroid: (n, 2) array of (doc_index, token_row)
    doc_ids: list[str]           # ascending
    docs: list[Mat]
    config: IndexConfig
    dim: int

    @property
    def num_docs(self):
        return len(self.doc_ids)

    @property
    def num_tokens(self):
        return int(sum(d.shape[0] for d in self.docs))

    def doc(self, doc_id) -> Mat:
        return self.docs[self.doc_ids.index(doc_id)]


def _nearest_centroids(tokens, centroids, n):
    """Indices of the ``n`` nearest centroids per token row, nearest first, ties by index."""
    d2 = (
        np.sum(tokens * tokens, axis=1, keepdims=True)
        - 2.0 * tokens @ centroids.T
        + np.sum(centroids * centroids, axis=1)
    )
    return np.argsort(d2, axis=1, kind="stable")[:, :n]


def build_index(docs, config: IndexConfig | None = None) -> CentroidIndex:
    config = config or IndexConfig()
    docs = sorted(docs, key=lambda d: d.doc_id)
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate doc_id in index input")
    if not docs:
        return CentroidIndex(np.zeros((0, 0)), [], [], [], config, 0)
    dim = docs[0].dim
    for d in docs:
        if d.dim != dim:
            raise DimensionError(f"document {d.doc_id} has h'={d.dim}, expected {dim}")
    stored = [_f32(d.tokens) for d in docs]
    tokens = np.vstack(stored)
    if tokens.shape[0] < config.num_centroids:
        raise ConfigurationError(
            f"{tokens.shape[0]} tokens cannot support {config.num_centroids} centroids"
        )
    with warnings.catch_warnings():
        # duplicate tokens can leave clusters empty; they are kept
        warnings.simplefilter("ignore")
        km = KMeans(
            n_clusters=config.num_centroids,
            init="k-means++",
            n_init=1,
            max_iter=config.kmeans_iters,
            tol=0.0,
            random_state=config.seed,
            algorithm="lloyd",
        ).fit(tokens)
    centroids = _f32(km.cluster_centers_)
    assignment = _nearest_centroids(tokens, centroids, 1)[:, 0]
    owner = np.concatenate([np.full(m.shape[0], i) for i, m in enumerate(stored)])
    row = np.concatenate([np.arange(m.shape[0]) for m in stored])
    postings = [
        np.stack([owner[assignment == c], row[assignment == c]], axis=1).astype(np.int64)
        for c in range(config.num_centroids)
    ]
    logger.info(
        f"indexed {len(docs)} documents, {tokens.shape[0]} tokens",
        extra={"stage": "index"},
    )
    return CentroidIndex(centroids, postings, ids, stored, config, dim)


def candidate_doc_indices(index: CentroidIndex, Q, n_probe=None) -> set[int]:
    if not index.doc_ids:
        return set()
    n_probe = min(n_probe or index.config.n_probe, len(index.postings))
    probed = np.unique(_nearest_centroids(np.asarray(Q, dtype=np.float64), index.centroids, n_probe))
    found = set()
    for c in probed:
        found.update(int(i) for i in index.postings[c][:, 0])
    return found


def _rank(scored, k):
    scored.sort(key=lambda s: (-s.value, s.doc_id))
    return scored[:k]


def retrieve_topk(index: CentroidIndex, query, k, n_probe=None, workers=1) -> list[RelevanceScore]:
    """Top-k documents by exact MaxSim among centroid-probed candidates."""
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    Q = getattr(query, "tokens", query)
    query_id = getattr(query, "query_id", "")
    if index.doc_ids and np.asarray(Q).shape[1] != index.dim:
        raise DimensionError(f"query h'={np.asarray(Q).shape[1]}, index h'={index.dim}")
    candidates = sorted(candidate_doc_indices(index, Q, n_probe))

    def score(i):
        return RelevanceScore(query_id, index.doc_ids[i], max_sim(Q, index.docs[i]))

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, candidates))
    else:
        scored = [score(i) for i in candidates]
    return _rank(scored, k)


def exhaustive_topk(doc_ids, docs, query, k) -> list[RelevanceScore]:
    """Brute-force MaxSim scan over every document."""
    Q = getattr(query, "tokens", query)
    query_id = getattr(query, "query_id", "")
    return _rank([RelevanceScore(query_id, i, max_sim(Q, d)) for i, d in zip(doc_ids, docs)], k)


def retrieval_probabilities(scores, temperature=1.0) -> np.ndarray:
    values = np.array([getattr(s, "value", s) for s in scores], dtype=np.float64) / temperature
    if values.size == 0:
        return values
    e = np.exp(values - values.max())
    return e / e.sum()


def save_index(path, index: CentroidIndex):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": INDEX_VERSION,
        "dim": index.dim,
        "num_docs": index.num_docs,
        "num_tokens": index.num_tokens,
        "num_centroids": len(index.postings),
        "config": index.config.model_dump(),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    K, dim = index.centroids.shape
    (path / "centroids.bin").write_bytes(
        _U32.pack(K) + _U32.pack(dim) + index.centroids.astype("<f4").tobytes()
    )
    chunks = [_U32.pack(len(index.postings))]
    for plist in index.postings:
        chunks.append(_U32.pack(plist.shape[0]))
        chunks.append(plist.astype("<u4").tobytes())
    (path / "postings.bin").write_bytes(b"".join(chunks))
    write_embedding_file(path / "docs.bin", zip(index.doc_ids, index.docs), dim=index.dim)


class _Reader:
    def __init__(self, blob, name):
        self.blob, self.name, self.offset = blob, name, 0

    def take(self, n):
        if self.offset + n > len(self.blob):
            raise FormatError(f"{self.name} truncated", offset=self.offset)
        view = self.blob[self.offset:self.offset + n]
        self.offset += n
        return view

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def finish(self):
        if self.offset != len(self.blob):
            raise FormatError(f"{self.name} has trailing bytes", offset=self.offset)


def load_index(path) -> CentroidIndex:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable meta.json: {e}") from e
    if meta.get("version") != INDEX_VERSION:
        raise FormatError(f"unsupported index version {meta.get('version')}")
    config = IndexConfig.model_validate(meta["config"])

    reader = _Reader((path / "centroids.bin").read_bytes(), "centroids.bin")
    K, dim = reader.u32(), reader.u32()
    centroids = np.frombuffer(reader.take(4 * K * dim), dtype="<f4").astype(np.float64).reshape(K, dim)
    reader.finish()

    reader = _Reader((path / "postings.bin").read_bytes(), "postings.bin")
    postings = []
    for _ in range(reader.u32()):
        n = reader.u32()
        postings.append(np.frombuffer(reader.take(8 * n), dtype="<u4").astype(np.int64).reshape(n, 2))
    reader.finish()

    stored = read_embedding_file(path / "docs.bin")
    if len(stored) != meta["num_docs"] or len(postings) != meta["num_centroids"]:
        raise FormatError("index files disagree with meta.json counts")
    if sum(int(p.shape[0]) for p in postings) != meta["num_tokens"]:
        raise FormatError("postings do not cover every stored token")
    return CentroidIndex(
        centroids=centroids,
        postings=postings,
        doc_ids=[i for i, _ in stored],
        docs=[m for _, m in stored],
        config=config,
        dim=meta["dim"],
    )


def index_persistence(path, index: CentroidIndex) -> CentroidIndex:
    save_index(path, index)
    return load_index(path)


def retrieval_log_probabilities(scores, temperature=1.0) -> np.ndarray:
    """Log of ``retrieval_probabilities``, computed without underflow."""
    values = np.array([getattr(s, "value", s) for s in scores], dtype=np.float64) / temperature
    if values.size == 0:
        return values
    shifted = values - values.max()
    return shifted - np.log(np.exp(shifted).sum())
