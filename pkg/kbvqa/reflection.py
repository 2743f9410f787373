"""Reflective answering: self-answer losses with late join, and the inference gate.

During training the generator is scored on a sampled target without documents
(L_gen); from step ``join_step`` on, its own answer is also judged and the
reflection probability is penalized with binary cross-entropy (L_reflect).

At inference the generator answers without documents and reflects on that
answer. Only when it judges itself incorrect are documents retrieved, one
candidate generated per document, and the joint-probability argmax returned.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from kbvqa.config import ReflectiveTrainConfig
from kbvqa.errors import ContractError, EngineError, NumericError, StageError
from kbvqa.evaluation import exact_match
from kbvqa.generation import GeneratorContext, generate_candidates, rag_loss, sample_target_answer, select_answer
from kbvqa.index import retrieve_topk
from kbvqa.logging_config import get_logger
from kbvqa.metrics import increment_gate, observe_stage
from kbvqa.models import ReflectionLabel, ReflectiveTrace
from kbvqa.retrieval import compress_query

logger = get_logger("reflection")

_TINY = 1e-300


def make_reflection_label(predicted: str, answers) -> ReflectionLabel:
    if not answers:
        raise ContractError("answer set is empty")
    return ReflectionLabel.correct if exact_match(predicted, answers) else ReflectionLabel.incorrect


def reflection_bce(correct_prob: float, label: ReflectionLabel) -> float:
    if not 0.0 <= correct_prob <= 1.0:
        raise ContractError(f"reflect probability {correct_prob} outside [0, 1]")
    if label is ReflectionLabel.correct:
        return -math.log(max(correct_prob, _TINY))
    return -math.log1p(-min(correct_prob, 1.0 - 1e-16))


def reflective_losses(gen, context: GeneratorContext, answers, step: int, config: ReflectiveTrainConfig,
                      rng=None) -> tuple[float, dict]:
    """L_SR for one question at training step ``step`` (1-based)."""
    if not 1 <= step <= config.total_steps:
        raise ContractError(f"step {step} outside [1, {config.total_steps}]")
    if rng is None:
        rng = np.random.default_rng([config.seed, step])
    bare = context.without_document()
    parts = {"l_gen": rag_loss(gen, bare, sample_target_answer(answers, rng))}
    if config.joined(step):
        self_answer, _ = gen.generate(bare)
        label = make_reflection_label(self_answer, answers)
        parts["l_reflect"] = reflection_bce(gen.reflect(bare, self_answer), label)
    return sum(parts.values()), parts


def joint_loss(l_r: float, l_rag: float, l_sr: float) -> float:
    if not all(math.isfinite(x) for x in (l_r, l_rag, l_sr)):
        raise NumericError("joint loss terms must be finite")
    return l_r + l_rag + l_sr


@contextmanager
def _stage(name):
    with observe_stage(name):
        try:
            yield
        except StageError:
            raise
        except (EngineError, ValueError) as e:
            raise StageError(name, e) from e


def reflective_answer(gen, head, index, query, context: GeneratorContext, k: int, threshold: float = 0.5,
                      documents=None, mode="reflective", workers=1) -> ReflectiveTrace:
    """Answer one question, retrieving only when the self-answer is judged incorrect.

    ``mode`` may force the gate open ("always_retrieve") or shut ("never_retrieve").
    """
    if k < 1:
        raise ContractError("k must be at least 1")
    bare = context.without_document()
    with _stage("self-answer"):
        self_answer, _ = gen.generate(bare)
        correct_prob = float(gen.reflect(bare, self_answer))
    label = ReflectionLabel.correct if correct_prob >= threshold else ReflectionLabel.incorrect
    if mode == "always_retrieve":
        triggered = True
    elif mode == "never_retrieve":
        triggered = False
    else:
        triggered = label is ReflectionLabel.incorrect
    increment_gate("open" if triggered else "closed")
    logger.info(
        f"gate {'open' if triggered else 'closed'} (p_correct={correct_prob:.4f})",
        extra={"stage": "gate", "query_id": context.query_id},
    )
    if not triggered:
        return ReflectiveTrace(query_id=context.query_id, self_answer=self_answer, predicted_label=label,
                               correct_prob=correct_prob, retrieval_triggered=False,
                               final_answer=self_answer, mode=mode)
    with _stage("retrieval"):
        ranked = retrieve_topk(index, compress_query(head, query), k, workers=workers)
    with _stage("rerank"):
        candidates = generate_candidates(gen, bare, ranked, documents or {})
        final = select_answer(candidates)[0] if candidates else self_answer
    return ReflectiveTrace(query_id=context.query_id, self_answer=self_answer, predicted_label=label,
                           correct_prob=correct_prob, retrieval_triggered=True, final_answer=final,
                           retrieved_doc_ids=[s.doc_id for s in ranked], candidates=candidates, mode=mode)
