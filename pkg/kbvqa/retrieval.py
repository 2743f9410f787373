"""Late-interaction scoring and training of the compression head.

Relevance between a query and a document is MaxSim: for every query token take
the best-matching document token (dot product) and sum those maxima. The head is
trained with an in-batch contrastive loss where each query's negatives are the
positives of the other queries in the batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kbvqa.config import HeadConfig, TrainConfig
from kbvqa.embeddings import DocumentEmbedding, QueryEmbedding
from kbvqa.errors import ContractError, DimensionError, FormatError, NumericError, TrainingError
from kbvqa.logging_config import get_logger
from kbvqa.metrics import increment_training_step
from kbvqa.numerics import (
    GradBundle,
    Mat,
    MlpParams,
    as_mat,
    init_mlp,
    l2_normalize_rows,
    mlp_backward,
    mlp_forward,
    sgd_step,
)

logger = get_logger("retrieval")

HEAD_MAGIC = b"LIRH"
HEAD_VERSION = 1
_HEAD_HEADER = struct.Struct("<4sHIIIB")


@dataclass(frozen=True)
class CompressionHead:
    params: MlpParams
    normalize_output: bool = True

    def __post_init__(self):
        if self.params.output_dim >= self.params.input_dim:
            raise DimensionError(
                f"compression head must reduce width, got {self.params.input_dim} -> {self.params.output_dim}"
            )

    @property
    def input_dim(self):
        return self.params.input_dim

    @property
    def output_dim(self):
        return self.params.output_dim

    @classmethod
    def initialize(cls, h, config: HeadConfig | None = None, seed=0):
        config = config or HeadConfig()
        m, out = config.dims(h)
        return cls(init_mlp(h, m, out, seed=seed, scale=config.init_scale), config.normalize_output)

    def with_params(self, params):
        return CompressionHead(params, self.normalize_output)


@dataclass(frozen=True)
class RelevanceScore:
    query_id: str
    doc_id: str
    value: float


@dataclass(frozen=True)
class TrainBatch:
    queries: list[QueryEmbedding]
    positives: list[DocumentEmbedding]

    def __post_init__(self):
        if len(self.queries) != len(self.positives):
            raise ContractError(f"{len(self.queries)} queries but {len(self.positives)} positives")
        if len(self.queries) < 2:
            raise ContractError("in-batch negatives need at least two queries")
        doc_ids = [d.doc_id for d in self.positives]
        if len(set(doc_ids)) != len(doc_ids):
            raise ContractError(f"positive doc_ids must be distinct within a batch, got {doc_ids}")


def compress(head: CompressionHead, emb) -> Mat:
    Y, _ = mlp_forward(head.params, emb)
    return l2_normalize_rows(Y) if head.normalize_output else Y


def compress_query(head, query: QueryEmbedding) -> QueryEmbedding:
    return QueryEmbedding(query.query_id, compress(head, query.tokens), query.image_token_count, query.text_token_count)


def compress_document(head, doc: DocumentEmbedding) -> DocumentEmbedding:
    return DocumentEmbedding(doc.doc_id, compress(head, doc.tokens))


def _token_sims(Q, D):
    Q = as_mat(Q, name="query tokens")
    D = as_mat(D, cols=Q.shape[1], name="document tokens")
    if Q.shape[0] == 0:
        raise ContractError("query has no tokens")
    if D.shape[0] == 0:
        raise ContractError("empty document cannot be scored")
    return Q @ D.T


def max_sim(Q, D) -> float:
    return float(_token_sims(Q, D).max(axis=1).sum())


def _score_rows(scores, positives):
    rows = [np.asarray(r, dtype=np.float64) for r in scores]
    if len(rows) != len(positives):
        raise ContractError(f"{len(rows)} score rows but {len(positives)} positive indices")
    for row, pos in zip(rows, positives):
        if row.size == 0 or not 0 <= pos < row.size:
            raise ContractError(f"positive index {pos} invalid for {row.size} candidates")
        if not np.all(np.isfinite(row)):
            raise NumericError("contrastive scores contain NaN or Inf")
    return rows


def contrastive_loss(scores, positives) -> float:
    """Summed -log softmax(score)[positive] over queries, max-subtracted."""
    total = 0.0
    for row, pos in zip(_score_rows(scores, positives), positives):
        shifted = row - row.max()
        total += float(np.log(np.exp(shifted).sum()) - shifted[pos])
    return total


def _softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def _normalize_backward(Y, dE):
    """Gradient through row-wise L2 normalization; zero rows pass through unchanged."""
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 0.0
    dY = dE.copy()
    E = Y[nonzero] / norms[nonzero]
    g = dE[nonzero]
    dY[nonzero] = (g - E * np.sum(E * g, axis=1, keepdims=True)) / norms[nonzero]
    return dY


def _forward_stack(head, mats):
    X = np.vstack(mats)
    Y, cache = mlp_forward(head.params, X)
    E = l2_normalize_rows(Y) if head.normalize_output else Y
    bounds = np.cumsum([0] + [m.shape[0] for m in mats])
    parts = [E[bounds[i]:bounds[i + 1]] for i in range(len(mats))]
    return parts, (Y, cache, bounds)


def _backward_stack(head, state, dparts) -> GradBundle:
    Y, cache, _ = state
    dE = np.vstack(dparts)
    dY = _normalize_backward(Y, dE) if head.normalize_output else dE
    _, grads = mlp_backward(head.params, cache, dY)
    return grads


def batch_scores(head, batch: TrainBatch):
    qs, _ = _forward_stack(head, [q.tokens for q in batch.queries])
    ds, _ = _forward_stack(head, [d.tokens for d in batch.positives])
    return np.array([[max_sim(q, d) for d in ds] for q in qs])


def contrastive_grad(batch: TrainBatch, head: CompressionHead) -> tuple[float, GradBundle]:
    """Loss and exact head gradient for one batch.

    The max in MaxSim routes its gradient to the argmax document token only,
    the lowest index on ties.
    """
    qs, q_state = _forward_stack(head, [q.tokens for q in batch.queries])
    ds, d_state = _forward_stack(head, [d.tokens for d in batch.positives])
    n = len(qs)
    sims = [[_token_sims(q, d) for d in ds] for q in qs]
    scores = np.array([[s.max(axis=1).sum() for s in row] for row in sims])
    loss = contrastive_loss(scores, list(range(n)))

    dq = [np.zeros_like(q) for q in qs]
    dd = [np.zeros_like(d) for d in ds]
    for i in range(n):
        dS = _softmax(scores[i])
        dS[i] -= 1.0
        for j in range(n):
            arg = np.argmax(sims[i][j], axis=1)
            dq[i] += dS[j] * ds[j][arg]
            np.add.at(dd[j], arg, dS[j] * qs[i])
    grads = _backward_stack(head, q_state, dq) + _backward_stack(head, d_state, dd)
    return loss, grads


def sample_batch(pairs, order, cursor, batch_size):
    """Take up to ``batch_size`` pairs from ``order[cursor:]`` with distinct positives.

    Returns the chosen indices and the cursor just past the last one taken.
    """
    chosen, seen = [], set()
    for pos in range(cursor, len(order)):
        doc_id = pairs[order[pos]][1].doc_id
        if doc_id in seen:
            continue
        chosen.append(order[pos])
        seen.add(doc_id)
        if len(chosen) == batch_size:
            return chosen, pos + 1
    return chosen, len(order)


def train_head(dataset, config: TrainConfig | None = None, head: CompressionHead | None = None,
               head_config: HeadConfig | None = None):
    """Plain SGD on the in-batch contrastive loss; returns the head and per-step losses."""
    config = config or TrainConfig()
    pairs = list(dataset)
    if len(pairs) < config.batch_size:
        raise ContractError(f"dataset of {len(pairs)} pairs is smaller than batch size {config.batch_size}")
    if head is None:
        head = CompressionHead.initialize(pairs[0][0].dim, head_config, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    losses = []
    order, cursor = rng.permutation(len(pairs)), 0
    for step in range(1, config.steps + 1):
        chosen, cursor = sample_batch(pairs, order, cursor, config.batch_size)
        if len(chosen) < config.batch_size:
            order = rng.permutation(len(pairs))
            chosen, cursor = sample_batch(pairs, order, 0, config.batch_size)
            if len(chosen) < 2:
                raise ContractError("cannot form a batch with two distinct positive documents")
        batch = TrainBatch([pairs[i][0] for i in chosen], [pairs[i][1] for i in chosen])
        try:
            loss, grads = contrastive_grad(batch, head)
        except NumericError as e:
            raise TrainingError(f"non-finite values: {e}", step=step) from e
        if not np.isfinite(loss):
            raise TrainingError("contrastive loss diverged", step=step)
        losses.append(loss)
        head = head.with_params(sgd_step(head.params, grads, config.learning_rate))
        increment_training_step("contrastive")
        if step % config.log_every == 0 or step == config.steps:
            logger.info("training step", extra={"stage": "train-retriever", "step": step, "loss": round(loss, 6)})
    return head, losses


def _chunks(pairs, batch_size):
    for start in range(0, len(pairs) - 1, batch_size):
        chunk = pairs[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def in_batch_accuracy(head, pairs, batch_size=8) -> float:
    """Fraction of queries whose own positive wins MaxSim among consecutive fixed batches."""
    hits = total = 0
    for chunk in _chunks(list(pairs), batch_size):
        scores = batch_scores(head, TrainBatch([q for q, _ in chunk], [d for _, d in chunk]))
        hits += int(np.sum(np.argmax(scores, axis=1) == np.arange(len(chunk))))
        total += len(chunk)
    return hits / total if total else 0.0


def mean_in_batch_loss(head, pairs, batch_size=8) -> float:
    losses = []
    for chunk in _chunks(list(pairs), batch_size):
        scores = batch_scores(head, TrainBatch([q for q, _ in chunk], [d for _, d in chunk]))
        losses.append(contrastive_loss(scores, list(range(len(chunk)))) / len(chunk))
    return float(np.mean(losses)) if losses else 0.0


def save_head(path, head: CompressionHead):
    p = head.params
    blob = [_HEAD_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, p.input_dim, p.hidden_dim, p.output_dim,
                              int(head.normalize_output))]
    blob += [a.astype("<f4").tobytes() for a in p.arrays()]
    Path(path).write_bytes(b"".join(blob))


def load_head(path) -> CompressionHead:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD_HEADER.size:
        raise FormatError("truncated head header", offset=len(blob))
    magic, version, h, m, out, normalize = _HEAD_HEADER.unpack_from(blob, 0)
    if magic != HEAD_MAGIC:
        raise FormatError(f"bad head magic {magic!r}", offset=0)
    if version != HEAD_VERSION:
        raise FormatError(f"unsupported head version {version}", offset=4)
    shapes = [(h, m), (m,), (m, out), (out,)]
    offset, arrays = _HEAD_HEADER.size, []
    for shape in shapes:
        size = 4 * int(np.prod(shape))
        if offset + size > len(blob):
            raise FormatError("truncated head parameters", offset=offset)
        arrays.append(np.frombuffer(blob[offset:offset + size], dtype="<f4").astype(np.float64).reshape(shape))
        offset += size
    if offset != len(blob):
        raise FormatError("trailing bytes after head parameters", offset=offset)
    return CompressionHead(MlpParams(*arrays), bool(normalize))
