from enum import Enum as PyEnum
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class ReflectionLabel(PyEnum):
    correct = "correct"
    incorrect = "incorrect"


class QaExample(BaseModel):
    query_id: str
    question: str = Field(min_length=1)
    image_descriptor: str = ""
    answers: list[str] = Field(min_length=1)
    gold_doc_ids: list[str] = Field(default_factory=list)


class KbDocument(BaseModel):
    doc_id: str
    text: str


class AnswerCandidate(BaseModel):
    answer: str
    doc_id: Optional[str] = None
    retrieval_log_prob: float = 0.0
    generation_log_prob: float

    @field_validator("retrieval_log_prob", "generation_log_prob")
    @classmethod
    def _finite_log_prob(cls, v):
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("log-probabilities must be finite")
        if v > 1e-12:
            raise ValueError(f"log-probability {v} is positive")
        return v

    @property
    def joint_log_prob(self):
        return self.retrieval_log_prob + self.generation_log_prob


class ReflectiveTrace(BaseModel):
    query_id: str
    self_answer: str
    predicted_label: ReflectionLabel
    correct_prob: float = Field(ge=0.0, le=1.0)
    retrieval_triggered: bool
    final_answer: str
    retrieved_doc_ids: list[str] = Field(default_factory=list)
    candidates: list[AnswerCandidate] = Field(default_factory=list)
    mode: Literal["reflective", "always_retrieve", "never_retrieve"] = "reflective"

    @model_validator(mode="after")
    def _consistent(self):
        # ablation modes force the gate regardless of the label
        if self.mode == "reflective" and self.retrieval_triggered != (self.predicted_label is ReflectionLabel.incorrect):
            raise ValueError("retrieval must be triggered exactly when the self-answer is judged incorrect")
        if not self.retrieval_triggered and (self.final_answer != self.self_answer or self.retrieved_doc_ids):
            raise ValueError("closed gate must keep the self-answer and retrieve nothing")
        return self


class QuestionResult(BaseModel):
    query_id: str
    exact_match: int
    vqa_score: float
    prr: dict[int, int]
    retrieval_triggered: bool
    final_answer: str


class MetricsReport(BaseModel):
    n_questions: int = Field(ge=0)
    em_mean: float = Field(ge=0.0, le=1.0)
    vqa_mean: float = Field(ge=0.0, le=1.0)
    prr_at_k: dict[int, float]
    retrieval_trigger_rate: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _vqa_bounded_by_em(self):
        if self.vqa_mean > self.em_mean + 1e-12:
            raise ValueError("vqa_mean cannot exceed em_mean")
        for k, v in self.prr_at_k.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"PRR@{k}={v} outside [0, 1]")
        return self
