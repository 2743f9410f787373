import json
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from kbvqa.errors import FormatError
from kbvqa.models import KbDocument, QaExample


def _read_jsonl(path, model):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(model.model_validate_json(line))
            except ValidationError as e:
                raise FormatError(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
    return records


def load_dataset(path) -> list[QaExample]:
    examples = _read_jsonl(path, QaExample)
    ids = [e.query_id for e in examples]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate query_id")
    return examples


def load_kb(path) -> list[KbDocument]:
    docs = _read_jsonl(path, KbDocument)
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate doc_id")
    return docs


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")


def write_report(path, report):
    Path(path).write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")


def write_loss_trace(path, rows):
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.10g")


def read_loss_trace(path) -> pd.DataFrame:
    return pd.read_csv(path)
