import hashlib

import pytest

from genmc.cli import run

TINY = "\n".join([
    "d_model = 16", "n_heads = 2", "n_enc_layers = 1", "n_dec_layers = 1", "d_ff = 32",
    "max_source_len = 24", "max_target_len = 4", "learning_rate = 0.001", "batch_size = 8",
    "max_epochs = 2", "clue_max_len = 3",
]) + "\n"


def _synth(tmp_path, name, *extra):
    out = tmp_path / name
    assert run(["synth", "--task", "copy", "--n", "24", "--options", "3", "--vocab", "30",
                "--out", str(out), *extra]) == 0
    return out


def test_synth_twohop_is_byte_reproducible(tmp_path):
    digests = []
    for i in range(2):
        out = tmp_path / f"t{i}.jsonl"
        assert run(["synth", "--task", "twohop", "--n", "100", "--options", "4", "--vocab", "200",
                    "--seed", "1", "--out", str(out)]) == 0
        digests.append(hashlib.sha256(out.read_bytes()).hexdigest())
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# ") and len(lines) == 101
    assert digests[0] == digests[1]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    train = _synth(tmp, "train.jsonl", "--seed", "1")
    dev = _synth(tmp, "dev.jsonl", "--seed", "2")
    test = _synth(tmp, "test.jsonl", "--seed", "3")
    cfg = tmp / "tiny.cfg"
    cfg.write_text(TINY)
    outs = {}
    for kind in ("genmc", "t2t-enc"):
        out = tmp / "runs" / kind
        argv = ["train", "--model", kind, "--train", str(train), "--dev", str(dev), "--test", str(test),
                "--config", str(cfg), "--set", "seeds = 1, 10", "--out", str(out)]
        assert run(argv) == 0
        outs[kind] = out
    return tmp, outs, test


def test_train_writes_run_layout(trained):
    _, outs, _ = trained
    d = outs["genmc"]
    assert (d / "config.txt").exists() and (d / "MANIFEST").read_text().split() == ["config.txt", "seed-1/", "seed-10/"]
    for f in ("config.txt", "vocab.txt", "model.ckpt", "metrics.txt", "history.tsv", "MANIFEST"):
        assert (d / "seed-1" / f).exists()


def test_eval_reproduces_recorded_test_accuracy(trained, capsys):
    _, outs, test = trained
    seed_dir = outs["genmc"] / "seed-10"
    recorded = [l for l in (seed_dir / "metrics.txt").read_text().splitlines() if l.startswith("test_accuracy")]
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(seed_dir), "--data", str(test)]) == 0
    printed = capsys.readouterr().out.split("\t")[1]
    assert recorded == [f"test_accuracy = {printed}"]


def test_clue_dump_format(trained, tmp_path):
    _, outs, test = trained
    out = tmp_path / "clues.tsv"
    assert run(["clue", "--ckpt", str(outs["genmc"] / "seed-1"), "--data", str(test), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 24 and all(l.count("\t") == 1 and l.startswith("copy-3-") for l in lines)


def test_clue_dump_escapes_delimiter(trained, tmp_path, monkeypatch):
    from genmc.data import DELIM
    from genmc.model import GenMC
    _, outs, test = trained
    monkeypatch.setattr(GenMC, "clues", lambda self, batch: [[DELIM, 7]] * len(batch.answers))
    out = tmp_path / "clues.tsv"
    assert run(["clue", "--ckpt", str(outs["genmc"] / "seed-1"), "--data", str(test), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 24 and all(l.split("\t")[1].startswith("\\n ") for l in lines)


def test_report_rows_and_figures(trained, capsys):
    tmp, _, _ = trained
    capsys.readouterr()
    assert run(["report", "--runs", str(tmp / "runs")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("model\t") and [r.split("\t")[0] for r in table[1:]] == ["genmc", "t2t-enc"]
    assert all("(±" in r for r in table[1:])
    for f in ("report.tsv", "accuracy.png", "dev_curves.png"):
        assert (tmp / "runs" / f).stat().st_size > 0


def test_bench_prints_hash(trained, capsys):
    _, outs, test = trained
    capsys.readouterr()
    assert run(["bench", "--ckpt", str(outs["t2t-enc"] / "seed-1"), "--data", str(test), "--limit", "3"]) == 0
    row = capsys.readouterr().out.splitlines()[1].split("\t")
    assert row[0] == "t2t-enc" and row[1] == "3" and len(row[4]) == 12


def test_missing_file_exit_2(tmp_path, capsys):
    assert run(["eval", "--ckpt", str(tmp_path / "nope"), "--data", str(tmp_path / "x.jsonl")]) == 2
    assert "nope" in capsys.readouterr().err


def test_validation_exit_3_with_line_number(trained, tmp_path, capsys):
    _, outs, _ = trained
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "question": "q", "options": ["x", "y"], "answer_idx": 5}\n')
    assert run(["eval", "--ckpt", str(outs["genmc"] / "seed-1"), "--data", str(bad)]) == 3
    assert "bad.jsonl:1:" in capsys.readouterr().err


def test_unknown_config_key_exit_3(trained, tmp_path):
    tmp, _, test = trained
    argv = ["train", "--model", "genmc", "--train", str(test), "--dev", str(test),
            "--set", "dmodel = 3", "--out", str(tmp_path / "o")]
    assert run(argv) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exit_4(trained, tmp_path):
    tmp, _, test = trained
    cfg = tmp / "tiny.cfg"
    argv = ["train", "--model", "t2t-enc", "--train", str(test), "--dev", str(test), "--config", str(cfg),
            "--set", "learning_rate = 1e300", "--set", "weight_decay = 0", "--seed", "1",
            "--out", str(tmp_path / "o")]
    assert run(argv) == 4


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as info:
        run(["synth", "--task", "copy", "--n", "3", "--bogus"])
    assert info.value.code == 2
