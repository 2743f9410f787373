"""Command-line entry point: ``python -m kbvqa <command>``.

Exit status is 0 on success, 1 for engine errors (JSON envelope on stderr) and
2 for anything unexpected.
"""

import argparse
import json
import sys
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from kbvqa.config import (
    IndexConfig,
    ReflectiveTrainConfig,
    ToyEncoderConfig,
    TrainConfig,
    load_experiment_config,
)
from kbvqa.embeddings import (
    DocumentEmbedding,
    QueryEmbedding,
    read_embedding_file,
    toy_encode_document,
    toy_encode_query,
    write_embedding_file,
)
from kbvqa.errors import ConfigurationError, EngineError, StageError
from kbvqa.generation import GeneratorContext, MockGenerator
from kbvqa.index import build_index, exhaustive_topk, load_index, retrieval_probabilities, retrieve_topk, save_index
from kbvqa.logging_config import get_logger, setup_logging
from kbvqa.metrics import metrics_text
from kbvqa.reflection import reflective_answer
from kbvqa.repository import load_dataset, load_kb, write_loss_trace
from kbvqa.retrieval import CompressionHead, compress_document, compress_query, load_head, save_head, train_head
from kbvqa.services.experiment import DOCS_FILE, QUERIES_FILE, make_generator, run_experiment
from kbvqa.services.training import build_training_pairs, joint_training_run

logger = get_logger("cli")


def _encoder_args(p):
    p.add_argument("--dim", type=int, default=ToyEncoderConfig().dim)
    p.add_argument("--tokens-per-word", type=int, default=ToyEncoderConfig().tokens_per_word)
    p.add_argument("--encoder-seed", type=int, default=ToyEncoderConfig().seed)
    p.add_argument("--salt", type=int, default=ToyEncoderConfig().salt)


def _encoder_config(args):
    return ToyEncoderConfig(dim=args.dim, tokens_per_word=args.tokens_per_word, seed=args.encoder_seed, salt=args.salt)


def _load_embeddings(emb_dir):
    emb_dir = Path(emb_dir)
    queries = {i: QueryEmbedding.from_tokens(i, m) for i, m in read_embedding_file(emb_dir / QUERIES_FILE)}
    docs = {i: DocumentEmbedding(i, m) for i, m in read_embedding_file(emb_dir / DOCS_FILE)}
    return queries, docs


def cmd_encode(args):
    config = _encoder_config(args)
    examples, kb = load_dataset(args.dataset), load_kb(args.kb)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    queries = [toy_encode_query(ex.query_id, ex.question, ex.image_descriptor, config) for ex in examples]
    docs = [toy_encode_document(d.doc_id, d.text, config) for d in kb]
    write_embedding_file(out / QUERIES_FILE, [(q.query_id, q.tokens) for q in queries], dim=config.dim)
    write_embedding_file(out / DOCS_FILE, [(d.doc_id, d.tokens) for d in docs], dim=config.dim)
    print(json.dumps({"queries": len(queries), "documents": len(docs), "dim": config.dim}))


def cmd_train_retriever(args):
    queries, docs = _load_embeddings(args.embeddings_dir)
    examples = load_dataset(args.dataset)
    pairs = build_training_pairs(examples, queries, docs)
    train = TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)
    if not docs:
        raise ConfigurationError(f"{args.embeddings_dir}/{DOCS_FILE} holds no documents")
    head = CompressionHead.initialize(next(iter(docs.values())).dim, seed=args.seed)
    if args.joint:
        if not args.mock_table:
            raise ConfigurationError("--joint needs --mock-table")
        reflect = ReflectiveTrainConfig(total_steps=args.steps, join_step=args.join_step, seed=args.seed)
        kb_texts = {d.doc_id: d.text for d in load_kb(args.kb)} if args.kb else {}
        head, rows = joint_training_run(pairs, examples, MockGenerator.from_file(args.mock_table), kb_texts,
                                        train, reflect, head)
    else:
        head, losses = train_head(pairs, train, head=head)
        rows = [{"step": i + 1, "loss": l} for i, l in enumerate(losses)]
    save_head(args.out, head)
    write_loss_trace(args.loss_trace, rows)
    print(json.dumps({"steps": len(rows), "head": str(args.out), "loss_trace": str(args.loss_trace)}))


def cmd_index(args):
    _, docs = _load_embeddings(args.embeddings_dir)
    head = load_head(args.head)
    config = IndexConfig(num_centroids=args.centroids, kmeans_iters=args.iters, n_probe=args.n_probe, seed=args.seed)
    index = build_index([compress_document(head, d) for d in docs.values()], config)
    save_index(args.out_dir, index)
    print(json.dumps({"documents": index.num_docs, "tokens": index.num_tokens, "centroids": len(index.postings)}))


def cmd_retrieve(args):
    head = load_head(args.head)
    index = load_index(args.index)
    query = compress_query(head, toy_encode_query(args.query_id, args.question, args.image, _encoder_config(args)))
    if args.exact:
        ranked = exhaustive_topk(index.doc_ids, index.docs, query, args.k)
    else:
        ranked = retrieve_topk(index, query, args.k, n_probe=args.n_probe)
    probs = retrieval_probabilities(ranked) if ranked else []
    rows = [{"rank": r + 1, "doc_id": s.doc_id, "score": s.value, "prob": float(p)}
            for r, (s, p) in enumerate(zip(ranked, probs))]
    if args.json:
        print(json.dumps(rows))
    else:
        print(pd.DataFrame(rows, columns=["rank", "doc_id", "score", "prob"]).to_string(index=False))


def _experiment_overrides(args):
    return {
        "output_dir": getattr(args, "output_dir", None),
        "k": getattr(args, "k", None),
        "threshold": getattr(args, "threshold", None),
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "head_path": getattr(args, "head", None),
        "index_dir": getattr(args, "index", None),
        "workers": getattr(args, "workers", None),
    }


def cmd_answer(args):
    cfg = load_experiment_config(args.config, _experiment_overrides(args))
    if not cfg.head_path or not cfg.index_dir:
        raise ConfigurationError("answer needs a head checkpoint and an index directory")
    head, index = load_head(cfg.head_path), load_index(cfg.index_dir)
    doc_texts = {d.doc_id: d.text for d in load_kb(cfg.kb_path)}
    query = toy_encode_query(args.query_id, args.question, args.image, cfg.encoder)
    context = GeneratorContext(args.query_id, args.question, args.image)
    trace = reflective_answer(make_generator(cfg), head, index, query, context, cfg.k,
                              threshold=cfg.threshold, documents=doc_texts, mode=cfg.mode)
    print(trace.model_dump_json(indent=2))


def cmd_evaluate(args):
    cfg = load_experiment_config(args.config, _experiment_overrides(args))
    report = run_experiment(cfg)
    print(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True))


def build_parser():
    parser = argparse.ArgumentParser(prog="kbvqa", description="Late-interaction retrieval and reflective answering engine")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--metrics-out", default=None, help="write Prometheus metrics text here on exit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="dataset + KB -> embedding files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--out-dir", required=True)
    _encoder_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train-retriever", help="embeddings -> head checkpoint + loss trace CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-trace", required=True)
    p.add_argument("--steps", type=int, default=TrainConfig().steps)
    p.add_argument("--batch-size", type=int, default=TrainConfig().batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig().learning_rate)
    p.add_argument("--seed", type=int, default=TrainConfig().seed)
    p.add_argument("--joint", action="store_true", help="also account L_RAG and L_SR per step")
    p.add_argument("--mock-table")
    p.add_argument("--kb")
    p.add_argument("--join-step", type=int, default=None)
    p.set_defaults(func=cmd_train_retriever)

    p = sub.add_parser("index", help="embeddings + head -> index directory")
    p.add_argument("--embeddings-dir", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--centroids", type=int, default=IndexConfig().num_centroids)
    p.add_argument("--iters", type=int, default=IndexConfig().kmeans_iters)
    p.add_argument("--n-probe", type=int, default=IndexConfig().n_probe)
    p.add_argument("--seed", type=int, default=IndexConfig().seed)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="query -> top-k table")
    p.add_argument("--index", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--image", default="")
    p.add_argument("--query-id", default="query")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n-probe", type=int, default=None)
    p.add_argument("--exact", action="store_true", help="exhaustive scan instead of centroid probing")
    p.add_argument("--json", action="store_true")
    _encoder_args(p)
    p.set_defaults(func=cmd_retrieve)

    for name, func, help_text in (
        ("answer", cmd_answer, "single question end-to-end, prints the trace"),
        ("evaluate", cmd_evaluate, "experiment config -> metrics report"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--output-dir")
        p.add_argument("--k", type=int)
        p.add_argument("--threshold", type=float)
        p.add_argument("--mode", choices=["reflective", "always_retrieve", "never_retrieve"])
        p.add_argument("--seed", type=int)
        p.add_argument("--head")
        p.add_argument("--index")
        p.add_argument("--workers", type=int)
        if name == "answer":
            p.add_argument("--question", required=True)
            p.add_argument("--image", default="")
            p.add_argument("--query-id", default="query")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.func(args)
        return 0
    except (EngineError, ValidationError) as e:
        if isinstance(e, ValidationError):
            e = ConfigurationError(f"invalid arguments: {e.errors()[0]['msg']}")
        if not isinstance(e, StageError):
            e = StageError(args.command, e)
        print(json.dumps(e.envelope()), file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("unexpected failure", extra={"stage": args.command})
        print(json.dumps({"error": {"message": str(e), "code": "INTERNAL_ERROR", "stage": args.command}}),
              file=sys.stderr)
        return 2
    finally:
        if args.metrics_out:
            Path(args.metrics_out).write_text(metrics_text())
