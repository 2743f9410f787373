import time
from contextlib import contextmanager

from prometheus_client import CollectorRegistry, Counter, Histogram, generate_latest

registry = CollectorRegistry()

generator_requests_total = Counter(
    "generator_requests_total", "Generator calls", ["mode", "outcome"], registry=registry
)
retrieval_gate_total = Counter(
    "retrieval_gate_total", "Reflective gate decisions", ["decision"], registry=registry
)
training_steps_total = Counter(
    "training_steps_total", "Optimizer steps taken", ["kind"], registry=registry
)
stage_duration_seconds = Histogram(
    "stage_duration_seconds", "Pipeline stage duration", ["stage"], registry=registry
)


@contextmanager
def observe_stage(stage):
    start = time.perf_counter()
    try:
        yield
    finally:
        stage_duration_seconds.labels(stage).observe(time.perf_counter() - start)


def increment_generator_request(mode, outcome):
    generator_requests_total.labels(mode, outcome).inc()


def increment_gate(decision):
    retrieval_gate_total.labels(decision).inc()


def increment_training_step(kind="contrastive"):
    training_steps_total.labels(kind).inc()


def metrics_text():
    return generate_latest(registry).decode("utf-8")
