import json
import subprocess
import sys

import pytest

from bidirep.cli import main
from bidirep.datagen import write_conll_corpus, write_pretrain_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny corpus + config + fully trained pipeline artifacts."""
    root = tmp_path_factory.mktemp("cli")
    write_pretrain_corpus(root / "corpus.txt", seed=0, target_bytes=60_000)
    write_conll_corpus(root / "ner", seed=0, n_train=40, n_dev=12, n_test=12)
    cfg = root / "run.cfg"
    cfg.write_text(
        f"""
# tiny end-to-end configuration
seed = 1234
corpus.paths = {root / 'corpus.txt'}
corpus.seg_len = 32
tokenizer.vocab_size = 600
model.d_model = 32
model.n_layers = 1
model.n_heads = 2
model.d_ff = 64
model.max_seq_len = 64
train.batch_size = 8
train.total_steps = 30
train.base_lr = 1e-3
train.eval_every = 10
probe.epochs = 2
probe.batch_size = 16
task = ner
setting = concat
data.train = {root / 'ner' / 'train.conll'}
data.dev = {root / 'ner' / 'dev.conll'}
data.test = {root / 'ner' / 'test.conll'}
"""
    )
    out = root / "run"
    base = ["--config", str(cfg), "--out", str(out)]
    assert main(["train-tokenizer", *base]) == 0
    assert main(["train-lm", "--direction", "forward", *base]) == 0
    assert main(["train-lm", "--direction", "backward", *base]) == 0
    assert main(["extract", *base]) == 0
    assert main(["train-probe", *base]) == 0
    return root, cfg, out, base


def test_artifacts_exist(workdir):
    _, _, out, _ = workdir
    assert (out / "vocab.txt").exists()
    assert (out / "forward.ckpt").exists()
    assert (out / "backward.ckpt").exists()
    assert (out / "reps" / "train.forward.reps").exists()
    assert (out / "reps" / "test.backward.reps").exists()
    assert (out / "probe.bin").exists()
    assert (out / "manifest.json").exists()
    assert (out / "train_forward.log.jsonl").exists()


def test_eval_prints_metrics_json(workdir, capsys):
    _, _, out, base = workdir
    assert main(["eval", *base]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"per_type", "micro", "accuracy", "seeds", "config_digest"}
    assert 0.0 <= report["micro"]["f1"] <= 1.0
    assert report["seeds"] == [1234]
    assert (out / "metrics.json").exists()


def test_eval_pred_equals_gold_is_perfect(workdir, capsys):
    root, _, _, base = workdir
    gold = root / "ner" / "test.conll"
    assert main(["eval", *base, "--pred-conll", str(gold)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["micro"]["f1"] == 1.0
    assert report["accuracy"] == 1.0


def test_eval_rerun_byte_identical(workdir, capsys):
    _, _, out, base = workdir
    assert main(["eval", *base]) == 0
    first = (out / "metrics.json").read_bytes()
    assert main(["eval", *base]) == 0
    capsys.readouterr()
    assert (out / "metrics.json").read_bytes() == first


def test_tokenizer_rerun_byte_identical(workdir):
    _, _, out, base = workdir
    vocab_bytes = (out / "vocab.txt").read_bytes()
    assert main(["train-tokenizer", *base]) == 0
    assert (out / "vocab.txt").read_bytes() == vocab_bytes


def test_extract_rerun_byte_identical(workdir):
    _, _, out, base = workdir
    path = out / "reps" / "dev.forward.reps"
    before = path.read_bytes()
    assert main(["extract", *base]) == 0
    assert path.read_bytes() == before


def test_fewshot_command(workdir, capsys):
    _, _, out, base = workdir
    rc = main(
        ["fewshot", *base, "--jobs", "2",
         "--set", "fewshot.k=2", "--set", "fewshot.n_trials=3",
         "--set", "probe.epochs=1"]
    )
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["k"] == 2
    assert summary["n_samples"] == 8
    assert 0.0 <= summary["top3_test_f1_mean"] <= 1.0
    lines = (out / "fewshot_trials.jsonl").read_text().splitlines()
    assert len(lines) == 3
    row = json.loads(lines[0])
    assert set(row) == {"trial_id", "lr", "seed", "dropout", "dev_f1", "test_f1"}


def test_synth_command(workdir, capsys):
    _, _, out, base = workdir
    rc = main(
        ["synth", *base, "--set", "synth.n_sentences=60", "--set", "probe.epochs=1"]
    )
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["micro"]["f1"] <= 1.0
    assert (out / "synth_next_token_concat_metrics.json").exists()
    assert (out / "synth_data" / "train.conll").exists()


def test_missing_artifact_is_reported(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("task = ner\n")
    rc = main(["extract", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "vocab" in err and "error:" in err


def test_vocab_hash_mismatch_detected(workdir, tmp_path, capsys):
    # checkpoint trained against a different vocabulary is refused
    root, cfg, out, base = workdir
    other = tmp_path / "other"
    otherbase = ["--config", str(cfg), "--out", str(other)]
    assert main(["train-tokenizer", *otherbase,
                 "--set", "tokenizer.vocab_size=500"]) == 0
    rc = main(["extract", *otherbase,
               "--set", f"ckpt.forward={out / 'forward.ckpt'}",
               "--set", f"ckpt.backward={out / 'backward.ckpt'}"])
    assert rc == 1
    assert "vocabulary not shared" in capsys.readouterr().err


def test_manifest_detects_tampering(workdir, capsys):
    _, _, out, base = workdir
    vocab_path = out / "vocab.txt"
    original = vocab_path.read_bytes()
    try:
        vocab_path.write_bytes(original + b"# tampered\n")
        rc = main(["extract", *base])
        assert rc == 1
        assert "digest mismatch" in capsys.readouterr().err
    finally:
        vocab_path.write_bytes(original)


def test_seed_env_var_used_when_config_has_none(workdir, monkeypatch, capsys):
    root, _, out, base = workdir
    monkeypatch.setenv("BIDIREP_SEED", "777")
    cfg2 = root / "noseed.cfg"
    cfg2.write_text((root / "run.cfg").read_text().replace("seed = 1234", ""))
    assert main(["eval", "--config", str(cfg2), "--out", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["seeds"] == [777]


def test_blackbox_external_forward_reps(workdir, tmp_path, capsys):
    # dump the forward reps, then run a pipeline that fuses them with the
    # local backward model without touching forward.ckpt
    root, cfg, out, base = workdir
    bb = tmp_path / "bb"
    bb.mkdir()
    ext_sets = []
    for split in ("train", "dev", "test"):
        src = out / "reps" / f"{split}.forward.reps"
        dst = bb / f"{split}.forward.reps"
        dst.write_bytes(src.read_bytes())
        ext_sets += ["--set", f"external.{split}={dst}"]
    bbase = ["--config", str(cfg), "--out", str(bb / "run")]
    assert main(["train-tokenizer", *bbase]) == 0
    assert main(["train-lm", "--direction", "backward", *bbase]) == 0
    assert main(["extract", *bbase, *ext_sets]) == 0
    assert not (bb / "run" / "forward.ckpt").exists()
    assert main(["train-probe", *bbase]) == 0
    assert main(["eval", *bbase]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["micro"]["f1"] <= 1.0


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "bidirep.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    for cmd in ("train-tokenizer", "train-lm", "extract", "train-probe",
                "eval", "fewshot", "synth"):
        assert cmd in proc.stdout
