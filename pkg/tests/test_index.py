import json

import numpy as np
import pytest

from kbvqa.config import IndexConfig, ToyEncoderConfig
from kbvqa.embeddings import DocumentEmbedding, QueryEmbedding, toy_encode_document, toy_encode_query
from kbvqa.errors import ConfigurationError, DimensionError, FormatError
from kbvqa.evaluation import prr_curve
from kbvqa.index import (
    build_index,
    candidate_doc_indices,
    exhaustive_topk,
    index_persistence,
    load_index,
    retrieval_log_probabilities,
    retrieval_probabilities,
    retrieve_topk,
    save_index,
)
from kbvqa.retrieval import CompressionHead, compress_document, compress_query

from conftest import planted_corpus


def _random_corpus(rng, n_docs=50, dim=8):
    return [
        DocumentEmbedding(f"doc{j:02d}", rng.standard_normal((int(rng.integers(1, 6)), dim)))
        for j in range(n_docs)
    ]


def test_full_probe_matches_exhaustive_scan():
    rng = np.random.default_rng(7)
    for trial in range(100):
        docs = _random_corpus(rng)
        index = build_index(docs, IndexConfig(num_centroids=8, kmeans_iters=5, n_probe=8, seed=trial))
        Q = rng.standard_normal((3, 8))
        got = retrieve_topk(index, Q, 10, n_probe=8)
        want = exhaustive_topk(index.doc_ids, index.docs, Q, 10)
        assert [s.doc_id for s in got] == [s.doc_id for s in want]
        np.testing.assert_allclose([s.value for s in got], [s.value for s in want], rtol=0, atol=1e-9)


def test_candidates_grow_with_n_probe(rng):
    index = build_index(_random_corpus(rng), IndexConfig(num_centroids=8, n_probe=2))
    Q = rng.standard_normal((2, 8))
    previous = set()
    for n_probe in range(1, 9):
        found = candidate_doc_indices(index, Q, n_probe)
        assert previous <= found
        previous = found
    assert previous == set(range(index.num_docs))


def test_every_token_is_posted_once(rng):
    index = build_index(_random_corpus(rng), IndexConfig(num_centroids=6, n_probe=2))
    posted = np.vstack([p for p in index.postings if len(p)])
    assert len(posted) == index.num_tokens
    assert len({tuple(r) for r in posted.tolist()}) == index.num_tokens
    assert index.doc_ids == sorted(index.doc_ids)


def test_threaded_scoring_matches_serial(rng):
    index = build_index(_random_corpus(rng), IndexConfig(num_centroids=8, n_probe=3))
    Q = QueryEmbedding.from_tokens("q", rng.standard_normal((4, 8)))
    assert retrieve_topk(index, Q, 7, workers=4) == retrieve_topk(index, Q, 7)


def test_ties_break_by_doc_id():
    docs = [DocumentEmbedding(i, np.array([[1.0, 0.0]])) for i in ("b", "a", "c")]
    index = build_index(docs, IndexConfig(num_centroids=1, n_probe=1))
    ranked = retrieve_topk(index, np.array([[1.0, 0.0]]), 2)
    assert [s.doc_id for s in ranked] == ["a", "b"]


def test_empty_index_returns_nothing():
    index = build_index([], IndexConfig(num_centroids=4, n_probe=2))
    assert index.num_docs == 0
    assert retrieve_topk(index, np.ones((1, 3)), 5) == []


def test_build_index_errors(rng):
    docs = _random_corpus(rng, n_docs=3, dim=4)
    with pytest.raises(ConfigurationError):
        build_index(docs + [docs[0]], IndexConfig(num_centroids=1, n_probe=1))
    with pytest.raises(DimensionError):
        build_index(docs + [DocumentEmbedding("zzz", np.ones((1, 5)))], IndexConfig(num_centroids=1, n_probe=1))
    with pytest.raises(ConfigurationError):
        build_index(docs, IndexConfig(num_centroids=100, n_probe=1))
    index = build_index(docs, IndexConfig(num_centroids=2, n_probe=1))
    with pytest.raises(DimensionError):
        retrieve_topk(index, np.ones((1, 5)), 2)
    with pytest.raises(ConfigurationError):
        retrieve_topk(index, np.ones((1, 4)), 0)


def test_index_roundtrip_keeps_retrieval_identical(tmp_path, rng):
    index = build_index(_random_corpus(rng), IndexConfig(num_centroids=8, n_probe=3, seed=4))
    loaded = index_persistence(tmp_path / "idx", index)
    np.testing.assert_array_equal(index.centroids, loaded.centroids)
    assert loaded.doc_ids == index.doc_ids
    for a, b in zip(index.docs, loaded.docs):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(index.postings, loaded.postings):
        np.testing.assert_array_equal(a, b)
    for _ in range(10):
        Q = rng.standard_normal((3, 8))
        assert retrieve_topk(loaded, Q, 5) == retrieve_topk(index, Q, 5)


def test_load_index_rejects_bad_files(tmp_path, rng):
    path = tmp_path / "idx"
    save_index(path, build_index(_random_corpus(rng), IndexConfig(num_centroids=4, n_probe=2)))
    meta = json.loads((path / "meta.json").read_text())
    (path / "meta.json").write_text(json.dumps({**meta, "version": 99}))
    with pytest.raises(FormatError, match="version"):
        load_index(path)
    (path / "meta.json").write_text(json.dumps(meta))
    blob = (path / "postings.bin").read_bytes()
    (path / "postings.bin").write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="postings.bin"):
        load_index(path)
    with pytest.raises(FormatError):
        load_index(tmp_path / "missing")


def test_retrieval_probabilities():
    probs = retrieval_probabilities([3.0, 2.0, 2.0])
    assert probs.sum() == pytest.approx(1.0)
    assert probs[0] > probs[1] == probs[2]
    np.testing.assert_allclose(retrieval_log_probabilities([3.0, 2.0, 2.0]), np.log(probs))
    # far-apart scores stay finite in the log domain
    logs = retrieval_log_probabilities([0.0, -2000.0])
    assert np.isfinite(logs).all() and logs[1] == pytest.approx(-2000.0)
    assert retrieval_probabilities([]).size == 0


def test_prr_is_monotone_on_planted_corpus():
    cfg = ToyEncoderConfig(dim=64)
    examples, kb = planted_corpus(n_docs=20)
    texts = {d.doc_id: d.text for d in kb}
    head = CompressionHead.initialize(64, seed=0)
    index = build_index(
        [compress_document(head, toy_encode_document(d.doc_id, d.text, cfg)) for d in kb],
        IndexConfig(num_centroids=16, n_probe=4),
    )
    for ex in examples:
        q = compress_query(head, toy_encode_query(ex.query_id, ex.question, ex.image_descriptor, cfg))
        ranked = retrieve_topk(index, q, 10)
        curve = prr_curve([texts[s.doc_id] for s in ranked], ex.answers, range(1, 11))
        values = [curve[k] for k in range(1, 11)]
        assert values == sorted(values)
        assert curve[5] == 1


def test_probability_worked_examples():
    assert retrieval_probabilities([5.0]).tolist() == [1.0]
    np.testing.assert_allclose(retrieval_probabilities([1.0, 1.0]), [0.5, 0.5])
    np.testing.assert_allclose(retrieval_probabilities([2.0, 0.0]), [0.8808, 0.1192], atol=1e-4)


def test_empty_index_roundtrip(tmp_path):
    loaded = index_persistence(tmp_path / "empty", build_index([], IndexConfig(num_centroids=2, n_probe=1)))
    assert loaded.num_docs == 0
    assert retrieve_topk(loaded, np.ones((1, 4)), 3) == []


def test_same_seed_builds_identical_centroids(rng):
    docs = _random_corpus(rng)
    a = build_index(docs, IndexConfig(num_centroids=8, n_probe=2, seed=9))
    b = build_index(docs, IndexConfig(num_centroids=8, n_probe=2, seed=9))
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_stored_document_retrieves_itself_first(rng):
    tokens = rng.standard_normal((30, 6))
    tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
    docs = [DocumentEmbedding(f"d{j}", tokens[3 * j:3 * j + 3]) for j in range(10)]
    index = build_index(docs, IndexConfig(num_centroids=4, n_probe=2))
    ranked = retrieve_topk(index, index.doc("d4"), 20)
    assert ranked[0].doc_id == "d4"
    assert ranked[0].value == pytest.approx(3.0)
    assert len(ranked) <= 10
