import json
import subprocess
import sys
from pathlib import Path

import pytest

from bislu.checkpoint import load_checkpoint
from bislu.cli import main
from bislu.config import format_config
from bislu.data import AnnotatedUtterance, parse_corpus, synth_corpus, write_corpus
from bislu.encoder import EncoderConfig
from bislu.losses import ContrastiveConfig
from bislu.model import ModelConfig
from bislu.training import TrainConfig

TWO_INTENTS = AnnotatedUtterance(
    tuple("Show the cheapest round trip tickets and airlines fly from atlanta to washington DC".split()),
    ("atis_airfare", "atis_airline"),
    ((3, 3, "cost_relative"), (4, 5, "round_trip"), (11, 11, "fromloc.city_name"),
     (13, 13, "toloc.city_name"), (14, 14, "toloc.state_code")))

SMALL = TrainConfig(epochs=60, batch_size=4, lr=3e-3,
                    model=ModelConfig(EncoderConfig(d=32, layers=1, heads=2, ffn_dim=64, dropout_rate=0.0),
                                      k=32, s=16, max_span_len=4),
                    contrastive=ContrastiveConfig(views=2, normalize=True, tau=0.3))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """An overfitted checkpoint: validation is the training split, so selection tracks training fit."""
    root = tmp_path_factory.mktemp("cli")
    splits = synth_corpus(0, 30, 10, 10)
    train = splits.train + [TWO_INTENTS]
    data = root / "data"
    data.mkdir()
    write_corpus(data / "train.txt", train)
    write_corpus(data / "dev.txt", train)
    write_corpus(data / "test.txt", splits.test)
    (root / "small.ini").write_text(format_config(SMALL))
    assert run("train", "--config", root / "small.ini", "--data-dir", data, "--out-dir", root / "run") == 0
    return root


def test_synth_defaults_write_parseable_files(tmp_path):
    assert run("synth", "--out-dir", tmp_path) == 0
    sizes = {name: len(parse_corpus(tmp_path / name)) for name in ("train.txt", "dev.txt", "test.txt")}
    assert sizes == {"train.txt": 500, "dev.txt": 100, "test.txt": 100}
    train = parse_corpus(tmp_path / "train.txt")
    counts = [sum(len(u.intents) == k for u in train) / 500 for k in (1, 2, 3)]
    assert counts == pytest.approx([0.3, 0.5, 0.2], abs=0.03)


def test_synth_is_seeded(tmp_path):
    run("synth", "--out-dir", tmp_path / "a", "--train", 20, "--val", 5, "--test", 5, "--seed", 3)
    run("synth", "--out-dir", tmp_path / "b", "--train", 20, "--val", 5, "--test", 5, "--seed", 3)
    for name in ("train.txt", "dev.txt", "test.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_bad_sizes(tmp_path, capsys):
    assert run("synth", "--out-dir", tmp_path, "--train", 0) == 1
    assert "error" in capsys.readouterr().err


def test_synth_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("synth", "--out-dir", blocker / "sub") == 1
    assert "cannot write" in capsys.readouterr().err


def test_missing_config_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("train", "--data-dir", tmp_path, "--out-dir", tmp_path)
    assert info.value.code == 2


def test_unknown_gradcheck_component_is_usage_error():
    with pytest.raises(SystemExit) as info:
        run("gradcheck", "--component", "crf")
    assert info.value.code == 2


def test_bad_config_one_line_error(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[train]\nlearnign_rate = 1\n")
    run("synth", "--out-dir", tmp_path / "d", "--train", 5, "--val", 2, "--test", 2)
    assert run("train", "--config", tmp_path / "bad.ini", "--data-dir", tmp_path / "d", "--out-dir", tmp_path) == 1
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and "learnign_rate" in err


def test_quickstart_outputs(workdir):
    out = workdir / "run"
    ck = load_checkpoint(out / "model.ckpt")
    assert ck.config == SMALL
    lines = (out / "report.jsonl").read_text().splitlines()
    assert len(lines) == SMALL.epochs and json.loads(lines[0])["epoch"] == 1
    assert json.loads((out / "load_report.json").read_text())


def test_eval_on_training_split_after_overfit(workdir, capsys):
    capsys.readouterr()
    assert run("eval", "--checkpoint", workdir / "run/model.ckpt", "--data", workdir / "data",
               "--split", "train", "--json") == 0
    assert json.loads(capsys.readouterr().out)["sentence_accuracy"] >= 0.95


def test_eval_twice_identical(workdir, capsys):
    capsys.readouterr()
    args = ("eval", "--checkpoint", workdir / "run/model.ckpt", "--data", workdir / "data", "--json")
    run(*args)
    first = capsys.readouterr().out
    run(*args)
    assert capsys.readouterr().out == first


def test_high_threshold_without_fallback_degrades(workdir, capsys):
    base = ("eval", "--checkpoint", workdir / "run/model.ckpt", "--data", workdir / "data", "--split", "train",
            "--json")
    capsys.readouterr()
    run(*base, "--threshold", 0.5, "--no-fallback")
    mid = json.loads(capsys.readouterr().out)["intent_accuracy"]
    run(*base, "--threshold", 0.99, "--no-fallback")
    high = json.loads(capsys.readouterr().out)["intent_accuracy"]
    assert high < mid


def test_eval_label_diff(workdir, tmp_path, capsys):
    odd = [AnnotatedUtterance(("book", "a", "taxi"), ("atis_taxi",), ((3, 3, "vehicle"),))]
    write_corpus(tmp_path / "odd.txt", odd)
    assert run("eval", "--checkpoint", workdir / "run/model.ckpt", "--data", tmp_path / "odd.txt") == 1
    err = capsys.readouterr().err
    assert "atis_taxi" in err and "vehicle" in err


def test_predict_two_intent_example_and_unknown_words(workdir, tmp_path, capsys):
    lines = [" ".join(TWO_INTENTS.words), "", "qwerty zxcv to boston", "show me flights from atlanta to denver"]
    (tmp_path / "in.txt").write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert run("predict", "--checkpoint", workdir / "run/model.ckpt", "--input", tmp_path / "in.txt") == 0
    records = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert len(records) == 3  # one per non-empty input line
    first = records[0]
    assert set(first["intents"]) == {"atis_airfare", "atis_airline"}
    assert [(s["start"], s["end"], s["label"]) for s in first["slots"]] == [tuple(x) for x in TWO_INTENTS.spans]
    assert set(first["intent_probs"]) >= {"atis_airfare", "atis_airline"}
    assert records[1]["text"] == "qwerty zxcv to boston" and records[1]["intents"]


def test_predict_stdin_subprocess(workdir):
    proc = subprocess.run([sys.executable, "-m", "bislu.cli", "predict", "--checkpoint",
                           str(workdir / "run/model.ckpt")], input="list flights to boston\n\n",
                          capture_output=True, text=True, check=True)
    assert len(proc.stdout.splitlines()) == 1
    assert "empty" in proc.stderr


def test_same_seed_same_report(tmp_path):
    run("synth", "--out-dir", tmp_path / "d", "--train", 8, "--val", 3, "--test", 3)
    cfg = TrainConfig(epochs=2, batch_size=4,
                      model=ModelConfig(EncoderConfig(d=16, layers=1, heads=2, ffn_dim=16), k=8, s=4))
    (tmp_path / "c.ini").write_text(format_config(cfg))
    for name in ("a", "b"):
        run("train", "--config", tmp_path / "c.ini", "--data-dir", tmp_path / "d", "--out-dir", tmp_path / name,
            "--seed", 7)
    strip = [[{k: v for k, v in json.loads(x).items() if k != "seconds"} for x in
              (tmp_path / n / "report.jsonl").read_text().splitlines()] for n in ("a", "b")]
    assert strip[0] == strip[1]
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()


def test_gradcheck_single_component(capsys):
    assert run("gradcheck", "--component", "sd", "--trials", 3) == 0
    assert capsys.readouterr().out.startswith("PASS sd")


def test_defaults_parse(capsys):
    run("defaults")
    from bislu.config import parse_config
    assert parse_config(capsys.readouterr().out) == TrainConfig()
