"""Retriever training and joint loss accounting over a QA dataset."""

import numpy as np

from kbvqa.config import ReflectiveTrainConfig, TrainConfig
from kbvqa.errors import ContractError, TrainingError
from kbvqa.generation import GeneratorContext, joint_rag_loss, rag_loss, sample_target_answer
from kbvqa.logging_config import get_logger
from kbvqa.metrics import increment_training_step
from kbvqa.numerics import sgd_step
from kbvqa.reflection import joint_loss, reflective_losses
from kbvqa.retrieval import CompressionHead, TrainBatch, sample_batch, contrastive_grad

logger = get_logger("services.training")


def build_training_pairs(examples, queries, documents):
    """(query, positive document) pairs from each example's gold doc ids.

    ``queries`` and ``documents`` map ids to QueryEmbedding / DocumentEmbedding;
    gold ids missing from ``documents`` are skipped.
    """
    pairs = []
    for ex in examples:
        for doc_id in ex.gold_doc_ids:
            if doc_id in documents and ex.query_id in queries:
                pairs.append((queries[ex.query_id], documents[doc_id]))
    return pairs


def context_for(example, doc_id=None, document=None):
    return GeneratorContext(example.query_id, example.question, example.image_descriptor, doc_id, document)


def joint_training_run(pairs, examples, gen, doc_texts, train: TrainConfig, reflect: ReflectiveTrainConfig,
                       head: CompressionHead):
    """Run ``reflect.total_steps`` steps of joint loss accounting.

    Each step samples a batch with distinct positives, takes an SGD step on the
    contrastive loss (L_R), scores sampled targets given the positive document
    (L_RAG) and adds the reflective loss with late join (L_SR). Returns the
    final head and one row per step.
    """
    if len(pairs) < 2:
        raise ContractError("joint training needs at least two (query, document) pairs")
    by_id = {ex.query_id: ex for ex in examples}
    rng = np.random.default_rng(train.seed)
    order, cursor = rng.permutation(len(pairs)), 0
    rows = []
    for step in range(1, reflect.total_steps + 1):
        chosen, cursor = sample_batch(pairs, order, cursor, train.batch_size)
        if len(chosen) < min(train.batch_size, len(pairs)) or len(chosen) < 2:
            order = rng.permutation(len(pairs))
            chosen, cursor = sample_batch(pairs, order, 0, train.batch_size)
            if len(chosen) < 2:
                raise ContractError("cannot form a batch with two distinct positive documents")
        batch = TrainBatch([pairs[i][0] for i in chosen], [pairs[i][1] for i in chosen])
        l_r, grads = contrastive_grad(batch, head)
        l_rag = l_sr = 0.0
        for q, d in zip(batch.queries, batch.positives):
            ex = by_id[q.query_id]
            target = sample_target_answer(ex.answers, rng)
            l_rag += rag_loss(gen, context_for(ex, d.doc_id, doc_texts.get(d.doc_id, "")), target)
            sr, _ = reflective_losses(gen, context_for(ex), ex.answers, step, reflect, rng=rng)
            l_sr += sr
        total = joint_loss(l_r, l_rag, l_sr)
        if not np.isfinite(total):
            raise TrainingError("joint loss diverged", step=step)
        head = head.with_params(sgd_step(head.params, grads, train.learning_rate))
        increment_training_step("joint")
        rows.append({
            "step": step,
            "l_r": l_r,
            "l_rag": l_rag,
            "l_rag_joint": joint_rag_loss(l_r, l_rag),
            "l_sr": l_sr,
            "l_joint": total,
            "reflect_joined": reflect.joined(step),
        })
        if step % train.log_every == 0 or step == reflect.total_steps:
            logger.info("joint step", extra={"stage": "train-joint", "step": step, "loss": round(total, 6)})
    return head, rows
