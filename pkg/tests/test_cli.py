from __future__ import annotations

import csv
import json

import pytest

from genkie.cli import DEFAULTS, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run

TINY = [
    "--set", "model.d=12", "--set", "model.heads=2", "--set", "model.enc_layers=1", "--set", "model.dec_layers=1",
    "--set", "model.d_ff=24", "--set", "model.conv_channels=[2,2,2]", "--set", "train.batch_size=8",
    "--set", "data.test_docs=4", "--set", "decode.max_len=24",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny corpus, vocabulary and checkpoint built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    common = ["--seed", "3", "--out", str(d), "--corpus", str(d / "corpus.jsonl"), "--vocab", str(d / "vocab.txt"),
              "--checkpoint", str(d / "model.ckpt")]
    assert run(["gen-corpus", "--n", "14", *common, *TINY]) == EXIT_OK
    assert run(["train-bpe", "--vocab-size", "300", *common, *TINY]) == EXIT_OK
    assert run(["train", "--epochs", "1", "--lr", "1e-3", *common, *TINY]) == EXIT_OK
    return d, common


def test_gen_corpus_outputs(workdir):
    d, _ = workdir
    lines = (d / "corpus.jsonl").read_text().splitlines()
    assert len(lines) == 14
    first = json.loads(lines[0])
    assert (d / first["image"]).exists()
    manifest = json.loads((d / "manifest-gen-corpus.json").read_text())
    assert manifest["config"]["seed"] == 3 and len(manifest["corpus_sha256"]) == 64


def test_train_outputs(workdir):
    d, _ = workdir
    assert (d / "model.ckpt").exists() and (d / "vocab.txt").exists()
    log = json.loads((d / "train_log.json").read_text())
    assert log["epochs"] == 1 and log["steps"] >= 1
    assert json.loads((d / "manifest-train.json").read_text())["vocab_hash"]


def test_evaluate_and_infer(workdir, capsys):
    d, common = workdir
    assert run(["evaluate", "--width", "2", *common, *TINY]) == EXIT_OK
    m = json.loads((d / "metrics.json").read_text())
    assert 0.0 <= m["f1"] <= 1.0
    assert run(["infer", "--width", "1", *common, *TINY]) == EXIT_OK
    rows = [json.loads(x) for x in (d / "predictions.jsonl").read_text().splitlines()]
    assert rows and {"id", "output", "entities"} <= set(rows[0])


def test_sweep_noise(workdir):
    d, common = workdir
    assert run(["sweep-noise", "--levels", "0,50", "--width", "1", *common, *TINY]) == EXIT_OK
    rows = list(csv.reader((d / "sweep.csv").read_text().splitlines()))
    assert rows[0] == ["level", "precision", "recall", "f1"] and [r[0] for r in rows[1:]] == ["0", "50"]


def test_fewshot_and_ablate(workdir):
    d, common = workdir
    assert run(["fewshot", "--unseen-type", "date", "--k", "2", "--epochs", "1", "--width", "1", *common, *TINY]) == EXIT_OK
    assert json.loads((d / "fewshot-date-k2.json").read_text())["k"] == 2
    assert run(["ablate", "--epochs", "1", "--width", "1", *common, *TINY,
                "--set", 'ablate.modalities=["T","T+L"]', "--set", 'ablate.prompts=["template"]']) == EXIT_OK
    rows = list(csv.reader((d / "ablation.csv").read_text().splitlines()))
    assert rows[0] == ["modality", "prompt", "prefix", "precision", "recall", "f1"]
    assert [(r[0], r[2]) for r in rows[1:]] == [("T", "on"), ("T", "off"), ("T+L", "on"), ("T+L", "off")]


def test_print_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 1, "train.lr": 0.01, "decode.width": 3}))
    assert run(["train", "--config", str(cfg), "--lr", "0.002", "--set", "decode.width=7", "--print-config"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["seed"] == 1 and out["train.lr"] == 0.002 and out["decode.width"] == 7
    assert set(out) == set(DEFAULTS) | {"seed"}


@pytest.mark.parametrize(
    "argv",
    [
        ["train"],  # no seed
        ["train", "--seed", "1", "--set", "bogus.key=1"],
        ["train", "--seed", "1", "--set", "novalue"],
        ["train", "--seed", "1", "--epochs", "many"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == EXIT_USAGE


def test_bad_json_config_is_usage_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{oops")
    assert run(["train", "--config", str(p)]) == EXIT_USAGE


def test_missing_inputs_exit_2(tmp_path):
    assert run(["train-bpe", "--seed", "0", "--corpus", str(tmp_path / "none.jsonl")]) == EXIT_DATA
    assert run(["train", "--seed", "0", "--config", str(tmp_path / "none.json")]) == EXIT_DATA
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run(["train-bpe", "--seed", "0", "--corpus", str(bad)]) == EXIT_DATA


def test_vocab_mismatch_exit_2(workdir, tmp_path):
    d, common = workdir
    other = tmp_path / "v.txt"
    assert run(["train-bpe", "--seed", "3", "--corpus", str(d / "corpus.jsonl"), "--vocab", str(other), "--out", str(tmp_path),
                "--vocab-size", "280", *TINY]) == EXIT_OK
    args = [a if a != str(d / "vocab.txt") else str(other) for a in common]
    assert run(["evaluate", *args, *TINY]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(workdir, tmp_path):
    d, common = workdir
    args = [a if a != str(d / "model.ckpt") else str(tmp_path / "m.ckpt") for a in common]
    args = [a if a != str(d) else str(tmp_path) for a in args]
    assert run(["train", "--epochs", "3", "--lr", "1e30", *args, *TINY]) == EXIT_NUMERIC
