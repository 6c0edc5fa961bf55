"""End-to-end command-line pipeline: artifacts, manifests, error paths."""

import hashlib
import json
import os

import pytest

from tabletext.cli import main
from tabletext.datamodel import Vocabulary, parse_dataset
from tabletext.decoder import greedy_decode
from tabletext.encoder import ModelConfig
from tabletext.training import TrainConfig, flat_config, load_model

TRAIN_FLAGS = [
    "--scenario", "hier-kv", "--d", "8", "--key-dim", "4", "--value-dim", "8",
    "--layers", "1", "--heads", "2", "--dropout", "0.0", "--batch-size", "8",
    "--total-updates", "6", "--lr", "0.002", "--lr-halving-period", "3",
    "--checkpoint-every", "3", "--average-last-k", "2", "--seed", "1",
]


def _digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """corpus -> train -> generate, shared read-only by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    corpus = str(root / "corpus")
    run = str(root / "run")
    gen = str(root / "gen")
    assert main(["gen-data", "--out", corpus, "--seed", "2",
                 "--num-train", "32", "--num-valid", "6", "--num-test", "6"]) == 0
    before = {p: _digest(os.path.join(corpus, p)) for p in os.listdir(corpus)}
    assert main(["train", "--data", corpus, "--out", run] + TRAIN_FLAGS) == 0
    assert main(["generate", "--checkpoint", os.path.join(run, "checkpoint-averaged.ckpt"),
                 "--data", corpus, "--split", "test", "--out", gen,
                 "--beam", "2", "--max-len", "30",
                 "--attention-trace", os.path.join(gen, "trace.jsonl")]) == 0
    after = {p: _digest(os.path.join(corpus, p)) for p in before}
    assert after == before  # inputs are read-only
    return root, corpus, run, gen


def test_corpus_command_writes_splits_and_manifest(pipeline):
    _, corpus, _, _ = pipeline
    names = set(os.listdir(corpus))
    assert {"train.jsonl", "valid.jsonl", "test.jsonl", "manifest.json"} <= names
    manifest = json.load(open(os.path.join(corpus, "manifest.json")))
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 2
    assert manifest["config"]["num_train"] == 32


def test_train_command_artifacts(pipeline):
    _, _, run, _ = pipeline
    names = set(os.listdir(run))
    assert {"checkpoint-000000.ckpt", "checkpoint-000003.ckpt", "checkpoint-000006.ckpt",
            "checkpoint-averaged.ckpt", "loss_curve.csv", "loss_curve.png",
            "vocab.json", "manifest.json"} <= names
    assert os.path.getsize(os.path.join(run, "loss_curve.png")) > 0
    manifest = json.load(open(os.path.join(run, "manifest.json")))
    # the manifest records the fully resolved configuration plus input digests
    expected = flat_config(
        ModelConfig(scenario="hier-kv", d=8, key_dim=4, value_dim=8, layers=1, heads=2, dropout=0.0),
        TrainConfig(batch_size=8, total_updates=6, lr=0.002, lr_halving_period=3, dropout=0.0,
                    checkpoint_every=3, average_last_k=2, seed=1),
    )
    assert manifest["config"] == expected
    assert len(manifest["inputs"]["train"]["sha256"]) == 64


def test_generate_command_writes_jsonl_and_trace(pipeline):
    _, corpus, _, gen = pipeline
    rows = [json.loads(l) for l in open(os.path.join(gen, "generations.jsonl"))]
    test_ds = parse_dataset(os.path.join(corpus, "test.jsonl"), "test")
    assert [r["index"] for r in rows] == list(range(len(test_ds.examples)))
    for row in rows:
        assert isinstance(row["tokens"], list)
        assert isinstance(row["logprob"], float)
    traces = [json.loads(l) for l in open(os.path.join(gen, "trace.jsonl"))]
    assert len(traces) == len(rows)
    for trace in traces:
        for step in trace["steps"]:
            assert set(step) == {"t", "token", "alpha", "beta"}
            assert abs(sum(step["alpha"]) - 1.0) < 1e-9


def test_generate_beam_one_equals_greedy(pipeline, tmp_path):
    _, corpus, run, _ = pipeline
    ckpt = os.path.join(run, "checkpoint-averaged.ckpt")
    out = str(tmp_path / "g1")
    assert main(["generate", "--checkpoint", ckpt, "--data", corpus, "--split", "test",
                 "--out", out, "--beam", "1", "--max-len", "30"]) == 0
    rows = [json.loads(l) for l in open(os.path.join(out, "generations.jsonl"))]
    _, model_cfg, store = load_model(ckpt)
    vocab = Vocabulary.load(os.path.join(run, "vocab.json"))
    test_ds = parse_dataset(os.path.join(corpus, "test.jsonl"), "test")
    for row, example in zip(rows, test_ds.examples):
        direct = greedy_decode(store, model_cfg, vocab, example, max_len=30)
        assert row["tokens"] == direct.tokens
        assert row["logprob"] == direct.logprob


def test_evaluate_command_table_csv_and_figure(pipeline, tmp_path, capsys):
    _, corpus, _, gen = pipeline
    out = str(tmp_path / "eval")
    assert main(["evaluate", "--data", corpus, "--split", "test", "--out", out,
                 "--generations", f"sys={tmp_path / 'missing.jsonl'}", "--include-gold"]) == 1
    assert main(["evaluate", "--data", corpus, "--split", "test", "--out", out,
                 "--generations", f"sys={gen}/generations.jsonl", "--include-gold"]) == 0
    stdout = capsys.readouterr().out
    assert "BLEU" in stdout and "gold" in stdout and "sys" in stdout
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert lines[0] == "system,BLEU,RG-P%,RG-#,CS-P%,CS-R%,CS-F1,CO"
    by_label = {l.split(",")[0]: l.split(",")[1:] for l in lines[1:]}
    # references scored as a candidate are perfect on overlap metrics
    gold = [float(v) for v in by_label["gold"]]
    assert gold[0] == 100.0  # BLEU
    assert gold[3] == gold[4] == 100.0  # CS-P, CS-R
    assert gold[6] == 100.0  # CO
    assert os.path.getsize(os.path.join(out, "metrics.png")) > 0
    report = json.load(open(os.path.join(out, "sys.report.json")))
    assert report["num_examples"] == 6


def test_dump_attention_writes_trace_and_figures(pipeline, tmp_path):
    _, corpus, run, _ = pipeline
    out = str(tmp_path / "dump")
    assert main(["dump-attention", "--checkpoint", os.path.join(run, "checkpoint-averaged.ckpt"),
                 "--data", corpus, "--split", "test", "--index", "1", "--out", out,
                 "--beam", "2", "--max-len", "20"]) == 0
    trace = json.load(open(os.path.join(out, "trace.json")))
    assert trace["index"] == 1
    steps = sorted(os.listdir(os.path.join(out, "steps")))
    assert len(steps) == len(trace["steps"])
    assert all(name.endswith(".png") for name in steps)
    for step in trace["steps"]:
        assert abs(sum(step["alpha"]) - 1.0) < 1e-9
        for row in step["beta"]:
            assert abs(sum(row) - 1.0) < 1e-9


def test_cli_flags_override_config_file(pipeline, tmp_path):
    _, corpus, _, _ = pipeline
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "scenario = flat\nd = 8\nkey_dim = 4\nvalue_dim = 8\nlayers = 1\nheads = 2\n"
        "dropout = 0.0\nbatch_size = 8\ntotal_updates = 2\nlr = 0.002\n"
        "lr_halving_period = 2\ncheckpoint_every = 2\naverage_last_k = 1\nseed = 0\n"
    )
    out = str(tmp_path / "run")
    assert main(["train", "--data", corpus, "--out", out,
                 "--config", str(cfg_path), "--d", "12", "--seed", "3"]) == 0
    header, model_cfg, _ = load_model(os.path.join(out, "checkpoint-000002.ckpt"))
    assert model_cfg.d == 12
    assert model_cfg.scenario == "flat"
    assert header["config"]["seed"] == 3


def test_failures_exit_nonzero_with_diagnostics(pipeline, tmp_path, capsys):
    _, corpus, run, _ = pipeline
    ckpt = os.path.join(run, "checkpoint-averaged.ckpt")

    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o1")]) == 1
    assert "train split" in capsys.readouterr().err

    assert main(["generate", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--data", corpus, "--out", str(tmp_path / "o2")]) == 1
    assert "none.ckpt" in capsys.readouterr().err

    assert main(["evaluate", "--data", corpus, "--out", str(tmp_path / "o3")]) == 1
    assert "nothing to evaluate" in capsys.readouterr().err

    assert main(["evaluate", "--data", corpus, "--out", str(tmp_path / "o4"),
                 "--generations", "missing-the-separator"]) == 1
    assert "LABEL=PATH" in capsys.readouterr().err

    assert main(["dump-attention", "--checkpoint", ckpt, "--data", corpus,
                 "--index", "99", "--out", str(tmp_path / "o5")]) == 1
    assert "out of range" in capsys.readouterr().err

    assert main(["train", "--data", corpus, "--out", str(tmp_path / "o6"),
                 "--total-updates", "not-a-number"]) == 1
    assert "total_updates" in capsys.readouterr().err
