import json

import pytest

from kbvqa.cli import main
from kbvqa.repository import read_loss_trace

from conftest import planted_corpus, write_corpus, write_mock_table


@pytest.fixture
def workspace(tmp_path):
    examples, kb = planted_corpus(n_docs=20)
    dataset, kb_path = write_corpus(tmp_path, examples, kb)
    mock = write_mock_table(tmp_path / "mock.json", {
        "answers": [{"query_id": ex.query_id, "doc_id": None, "answer": ex.answers[0], "log_prob": -0.1}
                    for ex in examples],
        "reflect": {ex.query_id: 1.0 for ex in examples},
    })
    config = tmp_path / "exp.json"
    config.write_text(json.dumps({
        "dataset_path": str(dataset), "kb_path": str(kb_path), "output_dir": str(tmp_path / "out"),
        "generator": {"mock_table": str(mock)},
    }))
    return tmp_path, dataset, kb_path, mock, config


def last_json_line(text):
    return json.loads([line for line in text.splitlines() if line.strip()][-1])


def test_encode_train_index_retrieve(workspace, capsys):
    tmp, dataset, kb, _, _ = workspace
    emb, head, idx = tmp / "emb", tmp / "head.lirh", tmp / "idx"
    assert main(["encode", "--dataset", str(dataset), "--kb", str(kb), "--out-dir", str(emb)]) == 0
    assert json.loads(capsys.readouterr().out) == {"queries": 20, "documents": 20, "dim": 32}

    assert main(["train-retriever", "--dataset", str(dataset), "--embeddings-dir", str(emb),
                 "--out", str(head), "--loss-trace", str(tmp / "loss.csv"), "--steps", "5"]) == 0
    trace = read_loss_trace(tmp / "loss.csv")
    assert list(trace.columns) == ["step", "loss"] and len(trace) == 5

    assert main(["index", "--embeddings-dir", str(emb), "--head", str(head), "--out-dir", str(idx)]) == 0
    capsys.readouterr()

    assert main(["retrieve", "--index", str(idx), "--head", str(head), "--question", "d3w0 d3w1 d3w2 d3w3 d3w4 d3w5",
                 "--image", "img3", "--k", "3", "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["rank"] for r in rows] == [1, 2, 3]
    assert rows[0]["doc_id"] == "doc003"
    assert sum(r["prob"] for r in rows) == pytest.approx(1.0)

    assert main(["retrieve", "--index", str(idx), "--head", str(head), "--question", "d3w0", "--exact"]) == 0
    assert "doc_id" in capsys.readouterr().out


def test_joint_training_trace(workspace):
    tmp, dataset, kb, mock, _ = workspace
    emb = tmp / "emb"
    main(["encode", "--dataset", str(dataset), "--kb", str(kb), "--out-dir", str(emb)])
    assert main(["train-retriever", "--dataset", str(dataset), "--embeddings-dir", str(emb),
                 "--out", str(tmp / "h.lirh"), "--loss-trace", str(tmp / "joint.csv"), "--steps", "4",
                 "--joint", "--mock-table", str(mock), "--kb", str(kb), "--join-step", "2"]) == 0
    trace = read_loss_trace(tmp / "joint.csv")
    assert list(trace.columns) == ["step", "l_r", "l_rag", "l_rag_joint", "l_sr", "l_joint", "reflect_joined"]
    assert trace["reflect_joined"].tolist() == [False, True, True, True]


def test_answer_prints_trace(workspace, capsys):
    tmp, dataset, kb, _, config = workspace
    emb, head, idx = tmp / "emb", tmp / "head.lirh", tmp / "idx"
    main(["encode", "--dataset", str(dataset), "--kb", str(kb), "--out-dir", str(emb)])
    main(["train-retriever", "--dataset", str(dataset), "--embeddings-dir", str(emb), "--out", str(head),
          "--loss-trace", str(tmp / "loss.csv"), "--steps", "2"])
    main(["index", "--embeddings-dir", str(emb), "--head", str(head), "--out-dir", str(idx)])
    capsys.readouterr()
    assert main(["answer", "--config", str(config), "--head", str(head), "--index", str(idx),
                 "--question", "d1w0 d1w1", "--query-id", "q001"]) == 0
    trace = json.loads(capsys.readouterr().out)
    assert trace["final_answer"] == "answer1"
    assert trace["retrieval_triggered"] is False


def test_evaluate_writes_report_and_metrics(workspace, capsys):
    tmp, _, _, _, config = workspace
    metrics = tmp / "metrics.prom"
    assert main(["--metrics-out", str(metrics), "evaluate", "--config", str(config), "--k", "3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_questions"] == 20 and report["em_mean"] == 1.0
    assert (tmp / "out" / "metrics.json").exists()
    assert "retrieval_gate_total" in metrics.read_text()


def test_engine_errors_exit_with_envelope(workspace, capsys):
    tmp = workspace[0]
    assert main(["evaluate", "--config", str(tmp / "nope.json")]) == 1
    err = last_json_line(capsys.readouterr().err)["error"]
    assert err["code"] == "BAD_CONFIG" and err["stage"] == "evaluate"

    assert main(["answer", "--config", str(workspace[4]), "--question", "q?"]) == 1
    assert "head checkpoint" in last_json_line(capsys.readouterr().err)["error"]["message"]


def test_pipeline_stage_is_reported(workspace, capsys):
    tmp, _, _, _, config = workspace
    assert main(["evaluate", "--config", str(config), "--head", str(tmp / "missing.lirh")]) == 1
    err = last_json_line(capsys.readouterr().err)["error"]
    assert err["stage"] == "head"


def test_unexpected_errors_exit_2(workspace, capsys):
    tmp = workspace[0]
    assert main(["retrieve", "--index", str(tmp), "--head", str(tmp / "missing.lirh"), "--question", "x"]) == 2
    assert last_json_line(capsys.readouterr().err)["error"]["code"] == "INTERNAL_ERROR"


def test_training_on_empty_document_file_is_an_engine_error(workspace, capsys):
    tmp, dataset, _, _, _ = workspace
    empty_kb, emb = tmp / "empty_kb.jsonl", tmp / "emb"
    empty_kb.write_text("")
    assert main(["encode", "--dataset", str(dataset), "--kb", str(empty_kb), "--out-dir", str(emb)]) == 0
    assert json.loads(capsys.readouterr().out)["documents"] == 0
    assert main(["train-retriever", "--dataset", str(dataset), "--embeddings-dir", str(emb),
                 "--out", str(tmp / "head.lirh"), "--loss-trace", str(tmp / "loss.csv")]) == 1
    err = last_json_line(capsys.readouterr().err)["error"]
    assert err["code"] == "BAD_CONFIG" and err["stage"] == "train-retriever"
    assert not (tmp / "head.lirh").exists()
