import json

import numpy as np
import pytest

from kbvqa.config import ToyEncoderConfig
from kbvqa.embeddings import toy_encode_document, toy_encode_query
from kbvqa.generation import MockGenerator
from kbvqa.models import KbDocument, QaExample

SHARED_WORDS = 6
DOC_WORDS = 8


def planted_corpus(n_docs=20, n_queries=None):
    """Each query i shares SHARED_WORDS words with doc i, whose text also holds its answer."""
    n_queries = n_docs if n_queries is None else n_queries
    kb = []
    for j in range(n_docs):
        words = [f"d{j}w{t}" for t in range(DOC_WORDS - 1)] + [f"answer{j}"]
        kb.append(KbDocument(doc_id=f"doc{j:03d}", text=" ".join(words)))
    examples = []
    for i in range(n_queries):
        examples.append(QaExample(
            query_id=f"q{i:03d}",
            question=" ".join(f"d{i}w{t}" for t in range(SHARED_WORDS)),
            image_descriptor=f"img{i}",
            answers=[f"answer{i}"],
            gold_doc_ids=[f"doc{i:03d}"],
        ))
    return examples, kb


def separable_pairs(n_docs=200, n_queries=50, dim=64):
    """(query, positive) pairs plus the full document set for the trainability checks."""
    config = ToyEncoderConfig(dim=dim)
    examples, kb = planted_corpus(n_docs, n_queries)
    docs = {d.doc_id: toy_encode_document(d.doc_id, d.text, config) for d in kb}
    pairs = [
        (toy_encode_query(ex.query_id, ex.question, ex.image_descriptor, config), docs[ex.gold_doc_ids[0]])
        for ex in examples
    ]
    return pairs, docs


def write_jsonl(path, records):
    path.write_text("".join(r.model_dump_json() + "\n" for r in records))
    return path


def write_corpus(tmp_path, examples, kb):
    return write_jsonl(tmp_path / "dataset.jsonl", examples), write_jsonl(tmp_path / "kb.jsonl", kb)


def write_mock_table(path, table):
    path.write_text(json.dumps(table))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def planted():
    return planted_corpus()


@pytest.fixture
def mock_gen():
    return MockGenerator(
        answers={("q1", None): ("paris", -0.5), ("q1", "d1"): ("london", -0.2)},
        reflect={"q1": 0.9},
        scores={("q1", None, "rome"): -3.0},
    )
