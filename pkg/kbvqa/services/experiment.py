"""End-to-end evaluation: encode, head, index, reflective answering, metrics.

Each stage runs under its own name; any failure is raised as a ``StageError``
naming that stage, and every file this run wrote is removed first.
"""

import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from kbvqa.config import ExperimentConfig
from kbvqa.embeddings import (
    DocumentEmbedding,
    QueryEmbedding,
    read_embedding_file,
    toy_encode_document,
    toy_encode_query,
)
from kbvqa.errors import ConfigurationError, StageError
from kbvqa.evaluation import aggregate, exact_match, prr_curve, vqa_score
from kbvqa.generation import MockGenerator, RemoteGenerator
from kbvqa.index import INDEX_FILES, build_index, load_index, retrieve_topk, save_index
from kbvqa.logging_config import get_logger
from kbvqa.metrics import observe_stage
from kbvqa.models import QuestionResult
from kbvqa.reflection import reflective_answer
from kbvqa.repository import load_dataset, load_kb, write_jsonl, write_loss_trace, write_report
from kbvqa.retrieval import CompressionHead, compress_document, compress_query, load_head, save_head, train_head
from kbvqa.services.training import build_training_pairs, context_for

logger = get_logger("services.experiment")

QUERIES_FILE = "queries.lire"
DOCS_FILE = "docs.lire"


class _Outputs:
    """Every file or directory a run targets; a failed run removes all of them."""

    def __init__(self, root):
        self.root = Path(root)
        self.created = []

    def path(self, name):
        p = self.root / name
        self.created.append(p)
        return p

    def claim_index(self, target):
        """Register an index directory; one that already exists only loses the index files."""
        target = Path(target)
        if target.exists():
            self.created.extend(target / name for name in INDEX_FILES if not (target / name).exists())
        else:
            self.created.append(target)
        return target

    def discard(self):
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


@contextmanager
def stage(name):
    start = time.perf_counter()
    with observe_stage(name):
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e
    logger.info(f"stage {name} done", extra={"stage": name, "latency_ms": int((time.perf_counter() - start) * 1000)})


def make_generator(config: ExperimentConfig):
    if config.generator.mock_table:
        return MockGenerator.from_file(config.generator.mock_table)
    return RemoteGenerator(config.generator.remote)


def check_coverage(kind, wanted, have):
    missing = [i for i in wanted if i not in have]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise ConfigurationError(f"ingested embeddings lack {len(missing)} {kind} id(s): {shown}")


def encode_corpus(examples, kb, config: ExperimentConfig):
    """Query and document embeddings, ingested from ``embeddings_dir`` when one is configured."""
    if config.embeddings_dir:
        emb_dir = Path(config.embeddings_dir)
        missing = [name for name in (QUERIES_FILE, DOCS_FILE) if not (emb_dir / name).is_file()]
        if missing:
            raise ConfigurationError(f"embeddings_dir {emb_dir} lacks {', '.join(missing)}")
        queries = {i: QueryEmbedding.from_tokens(i, m) for i, m in read_embedding_file(emb_dir / QUERIES_FILE)}
        docs = {i: DocumentEmbedding(i, m) for i, m in read_embedding_file(emb_dir / DOCS_FILE)}
        check_coverage("query", [ex.query_id for ex in examples], queries)
        check_coverage("document", [d.doc_id for d in kb], docs)
        return queries, docs
    queries = {
        ex.query_id: toy_encode_query(ex.query_id, ex.question, ex.image_descriptor, config.encoder)
        for ex in examples
    }
    docs = {d.doc_id: toy_encode_document(d.doc_id, d.text, config.encoder) for d in kb}
    return queries, docs


def prepare_head(examples, queries, docs, config: ExperimentConfig, outputs: _Outputs):
    if config.head_path:
        return load_head(config.head_path)
    if not docs:
        raise ConfigurationError("knowledge base is empty; nothing to size the head from")
    h = next(iter(docs.values())).dim
    head = CompressionHead.initialize(h, config.head, seed=config.seed)
    if config.train is not None:
        pairs = build_training_pairs(examples, queries, docs)
        head, losses = train_head(pairs, config.train, head=head)
        write_loss_trace(outputs.path("loss_trace.csv"), [{"step": i + 1, "loss": l} for i, l in enumerate(losses)])
        save_head(outputs.path("head.lirh"), head)
    return head


def prepare_index(docs, head, config: ExperimentConfig, outputs: _Outputs):
    if config.index_dir and (Path(config.index_dir) / "meta.json").exists():
        return load_index(config.index_dir)
    index = build_index([compress_document(head, d) for d in docs.values()], config.index)
    target = outputs.claim_index(config.index_dir) if config.index_dir else outputs.path("index")
    save_index(target, index)
    return index


def evaluate_question(example, gen, head, index, queries, doc_texts, config: ExperimentConfig):
    query = queries[example.query_id]
    trace = reflective_answer(
        gen, head, index, query, context_for(example), config.k,
        threshold=config.threshold, documents=doc_texts, mode=config.mode,
    )
    ranked = retrieve_topk(index, compress_query(head, query), max(config.prr_ks))
    texts = [doc_texts.get(s.doc_id, "") for s in ranked]
    result = QuestionResult(
        query_id=example.query_id,
        exact_match=exact_match(trace.final_answer, example.answers),
        vqa_score=vqa_score(trace.final_answer, example.answers),
        prr=prr_curve(texts, example.answers, config.prr_ks),
        retrieval_triggered=trace.retrieval_triggered,
        final_answer=trace.final_answer,
    )
    return trace, result


def run_experiment(config: ExperimentConfig):
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    outputs = _Outputs(out_root)
    try:
        with stage("load"):
            examples = load_dataset(config.dataset_path)
            kb = load_kb(config.kb_path)
            doc_texts = {d.doc_id: d.text for d in kb}
            gen = make_generator(config)
        with stage("encode"):
            queries, docs = encode_corpus(examples, kb, config)
        with stage("head"):
            head = prepare_head(examples, queries, docs, config, outputs)
        with stage("index"):
            index = prepare_index(docs, head, config, outputs)
        with stage("answer"):
            def run(ex):
                return evaluate_question(ex, gen, head, index, queries, doc_texts, config)

            if config.workers > 1:
                with ThreadPoolExecutor(max_workers=config.workers) as pool:
                    outcomes = list(pool.map(run, examples))
            else:
                outcomes = [run(ex) for ex in examples]
            outcomes.sort(key=lambda o: o[0].query_id)
        with stage("report"):
            report = aggregate([r for _, r in outcomes], config.prr_ks)
            write_jsonl(outputs.path("traces.jsonl"), [t for t, _ in outcomes])
            write_jsonl(outputs.path("per_question.jsonl"), [r for _, r in outcomes])
            write_report(outputs.path("metrics.json"), report)
    except BaseException:
        outputs.discard()
        raise
    logger.info(
        f"evaluated {report.n_questions} questions: EM={report.em_mean:.4f} VQA={report.vqa_mean:.4f}",
        extra={"stage": "report"},
    )
    return report
