"""Answer generation behind a pluggable contract, plus RAG loss and joint selection.

A generator implements three calls over a ``GeneratorContext``:

* ``generate(ctx)`` -> (answer, total log-prob)
* ``score_answer(ctx, answer)`` -> total log-prob of ``answer``
* ``reflect(ctx, answer)`` -> probability that ``answer`` is correct

``MockGenerator`` answers from lookup tables; ``RemoteGenerator`` speaks JSON
over HTTP to an external generation service.
"""

from __future__ import annotations

import json
import math
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

import httpx
import numpy as np
from pydantic import BaseModel, ValidationError

from kbvqa.config import RemoteGeneratorConfig
from kbvqa.errors import (
    ContractError,
    GeneratorConnectionError,
    GeneratorError,
    GeneratorProtocolError,
    GeneratorTimeout,
    NumericError,
)
from kbvqa.index import retrieval_log_probabilities
from kbvqa.logging_config import get_logger
from kbvqa.metrics import increment_generator_request
from kbvqa.models import AnswerCandidate

logger = get_logger("generation")


@dataclass(frozen=True)
class GeneratorContext:
    query_id: str
    question: str
    image: str = ""
    doc_id: Optional[str] = None
    document: Optional[str] = None

    def with_document(self, doc_id, document):
        return GeneratorContext(self.query_id, self.question, self.image, doc_id, document)

    def without_document(self):
        return GeneratorContext(self.query_id, self.question, self.image)


class GeneratorContract(Protocol):
    def generate(self, context: GeneratorContext) -> tuple[str, float]: ...

    def score_answer(self, context: GeneratorContext, answer: str) -> float: ...

    def reflect(self, context: GeneratorContext, answer: str) -> float: ...


class MockGenerator:
    """Table-driven generator for desk-scale runs and tests.

    ``answers`` maps ``(query_id, doc_id or None)`` to ``(answer, log_prob)``.
    ``scores`` maps ``(query_id, doc_id or None, answer)`` to a log-prob; when a
    key is missing, the generated answer for the context scores at its own
    log-prob and anything else at ``default_log_prob``.
    """

    def __init__(self, answers=None, reflect=None, scores=None, *, default_answer="unknown",
                 default_log_prob=-10.0, default_reflect=0.5):
        self.answers = dict(answers or {})
        self.scores = dict(scores or {})
        self.reflections = dict(reflect or {})
        self.default_answer = default_answer
        self.default_log_prob = default_log_prob
        self.default_reflect = default_reflect
        for key, (_, lp) in self.answers.items():
            if lp > 0:
                raise ContractError(f"mock answer log-prob for {key} is positive")
        for key, lp in self.scores.items():
            if lp > 0:
                raise ContractError(f"mock score for {key} is positive")
        if default_log_prob > 0:
            raise ContractError("default log-prob must be <= 0")
        for key, p in list(self.reflections.items()) + [("default", default_reflect)]:
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"reflect probability for {key} outside [0, 1]")

    @classmethod
    def from_file(cls, path):
        data = json.loads(Path(path).read_text())
        answers = {(a["query_id"], a.get("doc_id")): (a["answer"], float(a["log_prob"])) for a in data.get("answers", [])}
        scores = {
            (s["query_id"], s.get("doc_id"), s["answer"]): float(s["log_prob"]) for s in data.get("scores", [])
        }
        return cls(
            answers,
            reflect=data.get("reflect", {}),
            scores=scores,
            default_answer=data.get("default_answer", "unknown"),
            default_log_prob=data.get("default_log_prob", -10.0),
            default_reflect=data.get("default_reflect", 0.5),
        )

    def generate(self, context):
        return self.answers.get((context.query_id, context.doc_id), (self.default_answer, self.default_log_prob))

    def score_answer(self, context, answer):
        key = (context.query_id, context.doc_id, answer)
        if key in self.scores:
            return self.scores[key]
        generated, lp = self.generate(context)
        return lp if generated == answer else self.default_log_prob

    def reflect(self, context, answer):
        return self.reflections.get(context.query_id, self.default_reflect)


class GeneratorResponse(BaseModel):
    answer: Optional[str] = None
    log_prob: float
    correct_prob: Optional[float] = None
    error: Optional[str] = None


class RemoteGenerator:
    """HTTP client for an external generation service.

    Requests carry an ``X-Request-ID`` correlation id; a response echoing a
    different id is rejected. 5xx replies, timeouts and connection failures are
    retried up to ``config.retries`` times; malformed bodies and 4xx are not.
    """

    def __init__(self, config: RemoteGeneratorConfig, client: httpx.Client | None = None):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout_ms / 1000.0)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def close(self):
        self.client.close()

    def _headers(self, request_id):
        headers = {"Content-Type": "application/json", "X-Request-ID": request_id}
        if self.config.auth_token:
            headers["Authorization"] = f"Bearer {self.config.auth_token}"
        return headers

    def call(self, payload: dict) -> GeneratorResponse:
        mode = payload["mode"]
        request_id = str(uuid.uuid4())
        last_error = None
        with self._slots:
            for attempt in range(self.config.retries + 1):
                if attempt:
                    time.sleep(self.config.backoff_ms / 1000.0 * (2 ** (attempt - 1)))
                try:
                    resp = self.client.post(
                        self.config.endpoint,
                        content=json.dumps(payload),
                        headers=self._headers(request_id),
                        timeout=self.config.timeout_ms / 1000.0,
                    )
                except httpx.TimeoutException as e:
                    last_error = GeneratorTimeout(f"generator timed out after {self.config.timeout_ms} ms: {e}")
                except httpx.TransportError as e:
                    last_error = GeneratorConnectionError(f"cannot reach generator: {e}")
                else:
                    if resp.status_code >= 500:
                        last_error = GeneratorProtocolError(f"generator returned HTTP {resp.status_code}")
                    else:
                        increment_generator_request(mode, "ok" if resp.is_success else "error")
                        return self._parse(resp, request_id)
                increment_generator_request(mode, "retry")
                logger.warning(
                    f"generator attempt failed: {last_error.message}",
                    extra={"request_id": request_id, "attempt": attempt + 1, "stage": mode},
                )
        increment_generator_request(mode, "failed")
        raise last_error

    def _parse(self, resp, request_id) -> GeneratorResponse:
        if not resp.is_success:
            raise GeneratorProtocolError(f"generator returned HTTP {resp.status_code}")
        echoed = resp.headers.get("X-Request-ID")
        if echoed is not None and echoed != request_id:
            raise GeneratorProtocolError(f"response correlation id {echoed} does not match {request_id}")
        try:
            body = GeneratorResponse.model_validate_json(resp.content)
        except ValidationError as e:
            raise GeneratorProtocolError(f"malformed generator response: {e}") from e
        if body.error:
            raise GeneratorError(f"generator reported: {body.error}")
        if not math.isfinite(body.log_prob) or body.log_prob > 0:
            raise GeneratorProtocolError(f"invalid log_prob {body.log_prob}")
        return body

    def _payload(self, mode, context, answer=None):
        return {
            "mode": mode,
            "question": context.question,
            "image": context.image,
            "document": context.document,
            "answer": answer,
        }

    def generate(self, context):
        body = self.call(self._payload("generate", context))
        if body.answer is None:
            raise GeneratorProtocolError("generate response has no answer")
        return body.answer, body.log_prob

    def score_answer(self, context, answer):
        return self.call(self._payload("score", context, answer)).log_prob

    def reflect(self, context, answer):
        body = self.call(self._payload("reflect", context, answer))
        if body.correct_prob is None or not 0.0 <= body.correct_prob <= 1.0:
            raise GeneratorProtocolError(f"invalid correct_prob {body.correct_prob}")
        return body.correct_prob


def remote_generate(config: RemoteGeneratorConfig, request: dict, client: httpx.Client | None = None):
    """Send one wire-format request and return the validated response."""
    return RemoteGenerator(config, client=client).call(request)


def rag_loss(gen: GeneratorContract, context: GeneratorContext, target: str) -> float:
    if not target:
        raise ContractError("target answer must be non-empty")
    log_prob = gen.score_answer(context, target)
    if log_prob > 0:
        raise ContractError(f"generator returned positive log-prob {log_prob}")
    return -float(log_prob)


def joint_rag_loss(l_r: float, l_rag: float) -> float:
    if not (math.isfinite(l_r) and math.isfinite(l_rag)):
        raise NumericError("joint RAG loss terms must be finite")
    return l_r + l_rag


def sample_target_answer(answers, rng) -> str:
    """Uniform draw over the distinct strings of ``answers``.

    ``rng`` is a seed or a ``numpy.random.Generator`` (consecutive draws).
    """
    distinct = list(dict.fromkeys(answers))
    if not distinct:
        raise ContractError("answer set is empty")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return distinct[int(rng.integers(len(distinct)))]


def select_answer(candidates) -> tuple[str, AnswerCandidate]:
    """Highest joint log-probability; ties go to the smaller answer, then doc_id."""
    candidates = list(candidates)
    if not candidates:
        raise ContractError("no answer candidates to select from")
    best = min(candidates, key=lambda c: (-c.joint_log_prob, c.answer, c.doc_id or ""))
    return best.answer, best


def generate_candidates(gen: GeneratorContract, context: GeneratorContext, ranked, documents) -> list[AnswerCandidate]:
    """One generated answer per retrieved document, paired with its retrieval log-prob."""
    log_probs = retrieval_log_probabilities(ranked)
    out = []
    for score, lp in zip(ranked, log_probs):
        answer, gen_lp = gen.generate(context.with_document(score.doc_id, documents.get(score.doc_id, "")))
        out.append(AnswerCandidate(answer=answer, doc_id=score.doc_id,
                                   retrieval_log_prob=float(lp), generation_log_prob=float(gen_lp)))
    return out
