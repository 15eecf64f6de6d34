import io
import json

import pytest

from topicrefine.cli import main

TRAIN = ["--d-model", "8", "--layers", "1", "--heads", "2", "--max-context", "40",
         "--max-decode", "8", "--warmup", "2", "--lr", "1e-3", "--test-fraction", "0.25",
         "--seed", "1"]


def read_log(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.json"
    assert main(["gen-data", "--dialogues", "16", "--topics", "8", "--seed", "7",
                 "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_file):
    run = tmp_path_factory.mktemp("run")
    assert main(["train", "--corpus", str(corpus_file), "--out", str(run), "--steps", "6",
                 "--checkpoint-every", "3", *TRAIN]) == 0
    return run


def test_gen_data_deterministic_with_stats(tmp_path, corpus_file):
    again = tmp_path / "again.json"
    main(["gen-data", "--dialogues", "16", "--topics", "8", "--seed", "7", "--out", str(again)])
    assert again.read_bytes() == corpus_file.read_bytes()
    data = json.loads(again.read_text())
    stats = data["stats"]
    assert stats["dialogues"] == 16 == len(data["dialogues"])
    assert stats["utterances"] == 16 * 4 == sum(len(d["turns"]) for d in data["dialogues"])
    assert stats["topics"] == 8 and stats["mode"] == "multi-label"


def test_missing_corpus_exits_2(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope.json"), "--out",
                 str(tmp_path / "r")]) == 2
    assert "corpus" in capsys.readouterr().err


def test_mode_mismatch_refuses(tmp_path, corpus_file):
    assert main(["train", "--corpus", str(corpus_file), "--out", str(tmp_path / "r"),
                 "--mode", "multi-class", "--steps", "1", *TRAIN]) == 2
    assert not list((tmp_path / "r").glob("checkpoint-*"))


def test_bad_corpus_exits_3(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mode": "multi-label", "topics": ["a"], "dialogues": [
        {"turns": [{"speaker": "A", "text": "x", "topics": [4]},
                   {"speaker": "B", "text": "y", "topics": []}]}]}))
    assert main(["train", "--corpus", str(bad), "--out", str(tmp_path / "r"), *TRAIN]) == 3


def test_run_directory_layout(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.json", "vocab.json", "train_log.jsonl"} <= names
    assert {"checkpoint-0000003.bin", "checkpoint-0000006.manifest.json"} <= names
    log = read_log(run_dir / "train_log.jsonl")
    assert [r["step"] for r in log] == list(range(1, 7))
    assert set(log[0]) == {"step", "l_one", "l_topic", "l_refine", "l_total", "lr"}


def test_gpt2dh_logs_zero_refine(tmp_path, corpus_file):
    run = tmp_path / "dh"
    assert main(["train", "--corpus", str(corpus_file), "--out", str(run), "--steps", "3",
                 "--ablation", "gpt2dh", *TRAIN]) == 0
    assert all(r["l_refine"] == 0 for r in read_log(run / "train_log.jsonl"))


def test_resume_reproduces_losses(tmp_path, run_dir):
    run = tmp_path / "resumed"
    run.mkdir()
    for name in ("config.json", "checkpoint-0000003.bin", "checkpoint-0000003.manifest.json"):
        (run / name).write_bytes((run_dir / name).read_bytes())
    lines = (run_dir / "train_log.jsonl").read_text().splitlines(keepends=True)
    (run / "train_log.jsonl").write_text("".join(lines[:4]))  # includes a stale step 4
    assert main(["train", "--config", str(run / "config.json"), "--out", str(run),
                 "--resume", str(run / "checkpoint-0000003")]) == 0
    assert read_log(run / "train_log.jsonl") == read_log(run_dir / "train_log.jsonl")


def test_config_round_trip_reproduces_log(tmp_path, run_dir):
    run = tmp_path / "again"
    assert main(["train", "--config", str(run_dir / "config.json"), "--out", str(run)]) == 0
    assert (run / "train_log.jsonl").read_bytes() == (run_dir / "train_log.jsonl").read_bytes()


def test_eval_and_rescore(tmp_path, run_dir):
    out = tmp_path / "ev"
    assert main(["eval", "--run", str(run_dir), "--out", str(out),
                 "--buckets", "0,5,10,inf"]) == 0
    report = json.loads((out / "report.json").read_text())
    rows = [json.loads(x) for x in (out / "generations.jsonl").read_text().splitlines()]
    assert report["n_samples"] == len(rows) > 0
    assert report["topic_f1"] is not None and not report["hits"]
    assert report["length_buckets"][-1]["range"][1] is None
    re_out = tmp_path / "re"
    assert main(["eval", "--run", str(run_dir), "--rescore", str(out / "generations.jsonl"),
                 "--out", str(re_out), "--buckets", "0,5,10,inf"]) == 0
    assert json.loads((re_out / "report.json").read_text()) == report


def test_eval_stage_one_scores_coarse(tmp_path, run_dir):
    out = tmp_path / "one"
    assert main(["eval", "--run", str(run_dir), "--variant", "stage-one", "--out", str(out)]) == 0
    rows = [json.loads(x) for x in (out / "generations.jsonl").read_text().splitlines()]
    assert all(r["refined"] is None and r["topics"] == [] for r in rows)


def test_oracle_gold_is_perfect(tmp_path, run_dir):
    out = tmp_path / "gold"
    assert main(["eval", "--run", str(run_dir), "--oracle-gold", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert all(v == 1.0 for v in report["bleu"].values())
    assert report["topic_f1"] == 1.0


def test_multiclass_eval_reports_hits(tmp_path):
    corpus = tmp_path / "mc.json"
    main(["gen-data", "--dialogues", "12", "--mode", "multi-class", "--out", str(corpus)])
    run = tmp_path / "mc"
    assert main(["train", "--corpus", str(corpus), "--out", str(run), "--steps", "2",
                 *TRAIN]) == 0
    assert main(["eval", "--run", str(run), "--out", str(run)]) == 0
    report = json.loads((run / "report.json").read_text())
    hits = report["hits"]
    assert set(hits) == {"hit@1", "hit@3", "hit@5"}
    assert hits["hit@1"] <= hits["hit@3"] <= hits["hit@5"]
    assert report["topic_f1"] is None


def test_generate_from_file_is_deterministic(tmp_path, run_dir, capsys):
    hist = tmp_path / "h.json"
    hist.write_text(json.dumps({"turns": [{"speaker": "A", "text": "w9 w1 w30", "topics": [1]}]}))
    outs = []
    for _ in range(2):
        assert main(["generate", "--run", str(run_dir), "--history", str(hist), "--json"]) == 0
        outs.append(json.loads(capsys.readouterr().out))
    assert outs[0] == outs[1]
    topics = json.loads((run_dir / "vocab.json").read_text())["topics"].values()
    assert set(outs[0]["topics"]) <= set(topics)
    assert set(outs[0]) == {"coarse", "topics", "refined"}


def test_generate_from_stdin(run_dir, capsys, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO("A: w9 w1 || w1\n"))
    assert main(["generate", "--run", str(run_dir)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("coarse:") and "refined:" in text


def test_generate_unknown_topic_exits_3(run_dir, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO("A: hi || nonsense\n"))
    assert main(["generate", "--run", str(run_dir)]) == 3


def test_inspect(run_dir, capsys):
    assert main(["inspect", str(run_dir / "checkpoint-0000006"), "--tensors"]) == 0
    text = capsys.readouterr().out
    assert "step: 6" in text and "wte" in text and "__opt_" not in text
