"""Answer normalization and the three evaluation metrics (EM, VQAScore, PRR@K)."""

import re

from kbvqa.models import MetricsReport, QuestionResult

ARTICLES = {"a", "an", "the"}
_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")
_WS = re.compile(r"\s+")


def normalize_answer(s: str) -> str:
    words = (_EDGE_PUNCT.sub("", w) for w in s.lower().split())
    return " ".join(w for w in words if w and w not in ARTICLES)


def normalize_text(s: str) -> str:
    return _WS.sub(" ", s.lower()).strip()


def _count(answer, answers):
    target = normalize_answer(answer)
    return sum(1 for a in answers if normalize_answer(a) == target)


def exact_match(answer: str, answers) -> int:
    return min(_count(answer, answers), 1)


def vqa_score(answer: str, answers) -> float:
    return min(_count(answer, answers) / 3.0, 1.0)


def prr_at_k(retrieved_texts, answers) -> int:
    """1 when any normalized gold answer occurs as a substring of any retrieved text."""
    needles = {normalize_answer(a) for a in answers} - {""}
    haystacks = [normalize_text(t) for t in retrieved_texts]
    return int(any(n in h for n in needles for h in haystacks))


def prr_curve(ranked_texts, answers, ks) -> dict[int, int]:
    """PRR for every K in ``ks`` over one ranked list."""
    return {k: prr_at_k(ranked_texts[:k], answers) for k in sorted(set(ks))}


def aggregate(results: list[QuestionResult], ks) -> MetricsReport:
    """Plain means over per-question values, reduced in query_id order."""
    results = sorted(results, key=lambda r: r.query_id)
    n = len(results)
    if n == 0:
        return MetricsReport(n_questions=0, em_mean=0.0, vqa_mean=0.0,
                             prr_at_k={k: 0.0 for k in sorted(set(ks))}, retrieval_trigger_rate=0.0)
    return MetricsReport(
        n_questions=n,
        em_mean=sum(r.exact_match for r in results) / n,
        vqa_mean=sum(r.vqa_score for r in results) / n,
        prr_at_k={k: sum(r.prr[k] for r in results) / n for k in sorted(set(ks))},
        retrieval_trigger_rate=sum(r.retrieval_triggered for r in results) / n,
    )
