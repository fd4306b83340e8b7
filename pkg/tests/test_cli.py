import json
import struct
import subprocess
import sys

import pytest

from nlvr_pointer.cli import EXIT_CHECKPOINT, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from nlvr_pointer.synth import generate, write_jsonl

TINY_FLAGS = ["--embed-dim", "4", "--hidden", "3", "--object-dim", "5", "--joint-dim", "6", "--mlp-dim", "5"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_jsonl(generate(24, seed=0, max_objects=4), root / "train.jsonl")
    write_jsonl(generate(8, seed=1, max_objects=4), root / "dev.jsonl")
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    ckpt = corpus / "model.bapt"
    code = main([
        "train", "--train", str(corpus / "train.jsonl"), "--dev", str(corpus / "dev.jsonl"),
        "--vocab", str(corpus / "vocab.txt"), "--checkpoint", str(ckpt),
        "--max-epochs", "1", "--batch-size", "8", "--lr", "1e-3", *TINY_FLAGS,
    ])
    assert code == EXIT_OK
    return ckpt


def lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


# ---------------------------------------------------------------- build-vocab


def test_build_vocab(corpus, tmp_path, capsys):
    out = tmp_path / "vocab.txt"
    assert main(["build-vocab", "--train", str(corpus / "train.jsonl"), "--vocab", str(out)]) == EXIT_OK
    stdout = capsys.readouterr().out.strip()
    assert stdout.startswith("vocab_size=")
    assert int(stdout.split("=")[1]) == len(out.read_text().splitlines())


def test_build_vocab_is_byte_identical(corpus, tmp_path):
    for name in ("a.txt", "b.txt"):
        assert main(["build-vocab", "--train", str(corpus / "train.jsonl"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_build_vocab_missing_file(tmp_path, capsys):
    code = main(["build-vocab", "--train", str(tmp_path / "nope.jsonl"), "--vocab", str(tmp_path / "v")])
    assert code == EXIT_IO
    assert "nope.jsonl" in capsys.readouterr().err


def test_unknown_flag_rejected(corpus):
    with pytest.raises(SystemExit) as info:
        main(["build-vocab", "--train", str(corpus / "train.jsonl"), "--bogus"])
    assert info.value.code == 2


def test_subcommand_required():
    with pytest.raises(SystemExit):
        main([])


# ---------------------------------------------------------------- train


def test_train_zero_epochs_writes_checkpoint(corpus, tmp_path, capsys):
    ckpt = tmp_path / "init.bapt"
    code = main([
        "train", "--train", str(corpus / "train.jsonl"), "--dev", str(corpus / "dev.jsonl"),
        "--checkpoint", str(ckpt), "--max-epochs", "0", *TINY_FLAGS,
    ])
    assert code == EXIT_OK and ckpt.exists()
    records = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert len(records) == 1 and records[0]["epoch"] == 0 and "dev_accuracy" in records[0]
    assert lines(tmp_path / "metrics.jsonl") == records


@pytest.mark.parametrize("flags, scorer, pointer", [
    (["--model", "bienc"], "bienc", False),
    (["--no-pointer"], "biatt", False),
    ([], "biatt", True),
])
def test_train_model_routing(corpus, tmp_path, flags, scorer, pointer):
    from nlvr_pointer.checkpoint import load_checkpoint

    ckpt = tmp_path / "m.bapt"
    code = main([
        "train", "--train", str(corpus / "train.jsonl"), "--checkpoint", str(ckpt),
        "--max-epochs", "1", "--batch-size", "12", *TINY_FLAGS, *flags,
    ])
    assert code == EXIT_OK
    loaded = load_checkpoint(ckpt)
    assert loaded.model_config["scorer"] == scorer
    assert loaded.config["pointer_enabled"] is pointer
    assert any(k.startswith("pointer.") for k in loaded.params) is pointer


def test_train_nan_exits_numeric(corpus, tmp_path, capsys, monkeypatch):
    from nlvr_pointer import training

    real = training.comprehension_loss
    calls = []

    def poisoned(prob, labels):
        calls.append(1)
        loss = real(prob, labels)
        return loss * float("nan") if len(calls) > 4 else loss

    monkeypatch.setattr(training, "comprehension_loss", poisoned)
    code = main([
        "train", "--train", str(corpus / "train.jsonl"), "--checkpoint", str(tmp_path / "n.bapt"),
        "--max-epochs", "3", "--batch-size", "4", *TINY_FLAGS,
    ])
    assert code == EXIT_NUMERIC
    assert "non-finite loss at step" in capsys.readouterr().err


def test_train_is_reproducible(corpus, tmp_path):
    for name in ("a", "b"):
        main([
            "train", "--train", str(corpus / "train.jsonl"), "--dev", str(corpus / "dev.jsonl"),
            "--checkpoint", str(tmp_path / f"{name}.bapt"), "--metrics", str(tmp_path / f"{name}.jsonl"),
            "--max-epochs", "1", "--seed", "3", *TINY_FLAGS,
        ])
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()


# ---------------------------------------------------------------- eval


def test_eval_output(trained, corpus, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl")]) == EXIT_OK
    first = capsys.readouterr().out
    head, record = first.splitlines()
    assert head.startswith("accuracy=") and head.endswith(" n=8")
    assert len(head.split()[0].split("=")[1].split(".")[1]) == 4
    assert json.loads(record)["count"] == 8
    main(["eval", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl")])
    assert capsys.readouterr().out == first


def test_eval_all_correct(trained, corpus, tmp_path, capsys):
    main(["predict", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl"), "--out", str(tmp_path / "p")])
    predicted = {r["identifier"]: r["label"] for r in lines(tmp_path / "p")}
    relabeled = []
    for rec in generate(8, seed=1, max_objects=4):
        rec["label"] = "true" if predicted[rec["identifier"]] else "false"
        relabeled.append(rec)
    write_jsonl(relabeled, tmp_path / "agree.jsonl")
    capsys.readouterr()
    main(["eval", "--checkpoint", str(trained), "--data", str(tmp_path / "agree.jsonl")])
    assert capsys.readouterr().out.splitlines()[0] == "accuracy=1.0000 n=8"


def test_eval_empty_file(trained, tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["eval", "--checkpoint", str(trained), "--data", str(tmp_path / "empty.jsonl")]) == EXIT_IO


def test_eval_malformed_file(trained, tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text("{broken\n")
    assert main(["eval", "--checkpoint", str(trained), "--data", str(tmp_path / "bad.jsonl")]) == EXIT_IO


def test_eval_version_mismatch(trained, corpus, tmp_path):
    raw = bytearray(trained.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "old.bapt").write_bytes(bytes(raw))
    code = main(["eval", "--checkpoint", str(tmp_path / "old.bapt"), "--data", str(corpus / "dev.jsonl")])
    assert code == EXIT_CHECKPOINT


def test_eval_corrupt_checkpoint(trained, corpus, tmp_path):
    raw = bytearray(trained.read_bytes())
    raw[-100] ^= 1
    (tmp_path / "bad.bapt").write_bytes(bytes(raw))
    code = main(["eval", "--checkpoint", str(tmp_path / "bad.bapt"), "--data", str(corpus / "dev.jsonl")])
    assert code == EXIT_IO


# ---------------------------------------------------------------- predict / dump-orders


def test_predict_records(trained, corpus, tmp_path):
    out = tmp_path / "pred.jsonl"
    assert main(["predict", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl"), "--out", str(out)]) == 0
    records = lines(out)
    source = lines(corpus / "dev.jsonl")
    assert [r["identifier"] for r in records] == [s["identifier"] for s in source]
    for r in records:
        assert 0.0 < r["probability"] < 1.0
        assert r["label"] == int(r["probability"] >= 0.5)
        assert len(r["scores"]) == 3
        assert r["chosen_subimage"] == max(range(3), key=lambda j: r["scores"][j])
        assert "orders" not in r


def test_dump_orders_are_permutations(trained, corpus, tmp_path):
    out = tmp_path / "orders.jsonl"
    assert main(["dump-orders", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl"), "--out", str(out)]) == 0
    source = lines(corpus / "dev.jsonl")
    records = lines(out)
    assert len(records) == len(source)
    for rec, src in zip(records, source):
        assert len(rec["orders"]) == 3
        for order, box in zip(rec["orders"], src["structured_rep"]):
            assert sorted(order) == list(range(len(box)))


def test_predict_to_stdout(trained, corpus, capsys):
    capsys.readouterr()
    main(["predict", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl")])
    assert len(capsys.readouterr().out.splitlines()) == 8


def test_module_entry_point(trained, corpus):
    result = subprocess.run(
        [sys.executable, "-m", "nlvr_pointer", "eval", "--checkpoint", str(trained), "--data", str(corpus / "dev.jsonl")],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert result.stdout.startswith("accuracy=")
