"""Command-line pipeline.

Commands: train-tokenizer, train-lm, extract, train-probe, eval, fewshot,
synth. Each command reads a line-oriented ``key = value`` config (plus
``--set`` overrides), writes its artifacts under ``--out``, and records them
in the run directory's manifest. Metrics are emitted as JSON on stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import torch

from . import fewshot as FS
from . import fusion as F
from .config import Manifest, RunConfig, component_seed, file_digest
from .corpus import (
    LabeledSentence,
    ingest_documents,
    load_segments,
    make_labeled_sentence,
    read_conll,
    save_segments,
    segment_stream,
)
from .evaluation import (
    MetricsReport,
    gen_directional_dataset,
    span_f1,
    tags_to_report,
    token_accuracy,
)
from .model import ModelConfig
from .probe import load_probe, predict_tags, save_probe, train_probe
from .tokenizer import Vocab, train_bpe
from .training import (
    DivergenceError,
    ModelCheckpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_lm,
)

TAG_COLUMNS = {"pos": 1, "chunk": 2, "ner": 3}
SETTING_DIRECTIONS = {
    "forward_only": ("forward",),
    "backward_only": ("backward",),
    "concat": ("forward", "backward"),
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- config plumbing -----------------------------------------------------------


def _setup(args) -> tuple[RunConfig, Path, Manifest]:
    cfg = RunConfig.load(args.config, args.set or [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out, Manifest(out)


def _vocab_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.get("tokenizer.vocab") or out / "vocab.txt")


def _ckpt_path(cfg: RunConfig, out: Path, direction: str) -> Path:
    return Path(cfg.get(f"ckpt.{direction}") or out / f"{direction}.ckpt")


def _load_vocab(cfg: RunConfig, out: Path, manifest: Manifest) -> Vocab:
    path = _vocab_path(cfg, out)
    if not path.exists():
        raise FileNotFoundError(f"missing vocabulary file: {path} (run train-tokenizer)")
    manifest.verify(path)
    return Vocab.load(path)


def _load_ckpt(
    cfg: RunConfig, out: Path, manifest: Manifest, direction: str, vocab: Vocab
) -> ModelCheckpoint:
    path = _ckpt_path(cfg, out, direction)
    if not path.exists():
        raise FileNotFoundError(
            f"missing checkpoint: {path} (run train-lm --direction {direction})"
        )
    manifest.verify(path)
    ckpt = load_checkpoint(path)
    if ckpt.vocab_hash != vocab.hash:
        raise ValueError("vocabulary not shared")
    return ckpt


def _model_config(cfg: RunConfig, vocab: Vocab, direction: str) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab.size,
        d_model=cfg.get_int("model.d_model", 128),
        n_layers=cfg.get_int("model.n_layers", 4),
        n_heads=cfg.get_int("model.n_heads", 4),
        d_ff=cfg.get_int("model.d_ff", 512),
        max_seq_len=cfg.get_int("model.max_seq_len", 256),
        dropout_rate=cfg.get_float("model.dropout", 0.1),
        direction=direction,  # type: ignore[arg-type]
    )


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.get_int("train.batch_size", 16),
        total_steps=cfg.get_int("train.total_steps", 1000),
        base_lr=cfg.get_float("train.base_lr", 3e-4),
        schedule=cfg.get("train.schedule", "cosine"),
        weight_decay=cfg.get_float("train.weight_decay", 0.01),
        grad_clip_norm=cfg.get_float("train.grad_clip_norm", 1.0),
        eval_every=cfg.get_int("train.eval_every", 50),
        warmup_steps=cfg.get_int("train.warmup_steps", 0),
        seed=seed,
    )


def _probe_train_config(cfg: RunConfig, seed: int, lr: float | None = None) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.get_int("probe.batch_size", 32),
        total_steps=1,  # stretched over epochs inside train_probe
        base_lr=lr if lr is not None else cfg.get_float("probe.base_lr", 1e-3),
        schedule=cfg.get("probe.schedule", "linear_to_zero"),
        weight_decay=cfg.get_float("probe.weight_decay", 0.01),
        grad_clip_norm=cfg.get_float("probe.grad_clip_norm", 1.0),
        seed=seed,
    )


def _task(cfg: RunConfig) -> str:
    task = cfg.get("task", "ner")
    if task not in ("ner", "chunk", "pos", "synth"):
        raise ValueError(f"unknown task {task!r}")
    return task


def _setting(cfg: RunConfig) -> str:
    setting = cfg.get("setting", "concat")
    if setting not in SETTING_DIRECTIONS:
        raise ValueError(f"unknown setting {setting!r}")
    return setting


def _scorer(task: str):
    if task == "pos":
        return lambda gold, pred: token_accuracy(
            [t for s in gold for t in s], [t for s in pred for t in s]
        )
    return span_f1


def _data_splits(cfg: RunConfig, vocab: Vocab, task: str, which: Sequence[str]):
    col = TAG_COLUMNS.get(task, int(cfg.get("data.tag_column", "3")))
    splits = {}
    for split in which:
        path = cfg.get(f"data.{split}")
        if path is None:
            raise KeyError(f"missing config key: data.{split}")
        if not Path(path).exists():
            raise FileNotFoundError(f"missing dataset file: {path}")
        splits[split] = read_conll(path, vocab, tag_column=col)
    return splits


# -- representation plumbing -----------------------------------------------------


def _reps_path(out: Path, split: str, direction: str) -> Path:
    return out / "reps" / f"{split}.{direction}.reps"


def _extract_split(
    ckpt: ModelCheckpoint, sentences: Sequence[LabeledSentence], pool: str
) -> F.RepMatrix:
    """Word-level representations for a whole split, stacked row-wise."""
    extract = F.extract_forward if ckpt.direction == "forward" else F.extract_backward
    pooled = [
        F.word_pool(extract(ckpt, s.encoding.ids), s.encoding, mode=pool)
        for s in sentences
    ]
    values = torch.cat([p.values for p in pooled], dim=0)
    return F.RepMatrix(
        values=values, provenance=pooled[0].provenance, vocab_hash=ckpt.vocab_hash
    )


def _split_rows(
    matrix: F.RepMatrix, sentences: Sequence[LabeledSentence]
) -> list[F.RepMatrix]:
    total = sum(len(s.words) for s in sentences)
    if matrix.rows != total:
        raise ValueError(
            f"representation rows ({matrix.rows}) do not match dataset word "
            f"count ({total}); re-run extract"
        )
    out = []
    offset = 0
    for s in sentences:
        n = len(s.words)
        out.append(
            F.RepMatrix(
                values=matrix.values[offset : offset + n],
                provenance=matrix.provenance,
                vocab_hash=matrix.vocab_hash,
            )
        )
        offset += n
    return out


def _fused_split(
    cfg: RunConfig,
    out: Path,
    manifest: Manifest,
    setting: str,
    split: str,
    sentences: Sequence[LabeledSentence],
) -> list[F.RepMatrix]:
    """Load dumped reps for a split and fuse them according to the setting."""

    def load(direction: str, provenance: str) -> F.RepMatrix:
        path = _reps_path(out, split, direction)
        if not path.exists():
            raise FileNotFoundError(f"missing representations: {path} (run extract)")
        manifest.verify(path)
        return F.load_reps(path, provenance=provenance)

    if setting == "forward_only":
        matrix = load("forward", "forward")
    elif setting == "backward_only":
        matrix = load("backward", "backward-aligned")
    else:
        matrix = F.concat_reps(
            load("forward", "forward"), load("backward", "backward-aligned")
        )
    return _split_rows(matrix, sentences)


# -- commands --------------------------------------------------------------------


def cmd_train_tokenizer(args) -> int:
    cfg, out, manifest = _setup(args)
    paths = cfg.get_list("corpus.paths")
    if not paths:
        raise KeyError("missing config key: corpus.paths")
    store = ingest_documents(paths, seed=component_seed(cfg.seed, "corpus"))
    vocab = train_bpe(
        iter(store.docs),
        vocab_size=cfg.get_int("tokenizer.vocab_size", 2048),
        seed=component_seed(cfg.seed, "tokenizer"),
    )
    path = _vocab_path(cfg, out)
    vocab.save(path)
    manifest.record(path, "train-tokenizer", cfg.digest())
    manifest.save("train-tokenizer", cfg.digest(), cfg.seed)
    _log(f"wrote {path} ({vocab.size} ids, hash {vocab.hash[:12]})")
    return 0


def _segments_for(cfg: RunConfig, out: Path, vocab: Vocab, seg_len: int):
    paths = cfg.get_list("corpus.paths")
    if not paths:
        raise KeyError("missing config key: corpus.paths")
    seed = component_seed(cfg.seed, "corpus")
    key_src = ":".join([vocab.hash, str(seed), str(seg_len)] + [file_digest(p) for p in paths])
    key = hashlib.sha256(key_src.encode()).hexdigest()[:12]
    cache = out / "cache" / f"segments_{key}.segs"
    if cache.exists():
        return load_segments(cache)
    store = ingest_documents(paths, seed=seed)
    segments = list(segment_stream(store, vocab, seg_len))
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_segments(cache, segments, seg_len)
    return segments


def cmd_train_lm(args) -> int:
    cfg, out, manifest = _setup(args)
    direction = args.direction
    vocab = _load_vocab(cfg, out, manifest)
    seg_len = cfg.get_int("corpus.seg_len", 128)
    segments = _segments_for(cfg, out, vocab, seg_len)
    model_cfg = _model_config(cfg, vocab, direction)
    train_cfg = _train_config(cfg, seed=component_seed(cfg.seed, f"train.{direction}"))
    log_path = out / f"train_{direction}.log.jsonl"
    _log(f"training {direction} LM: {len(segments)} segments of {seg_len}")
    try:
        ckpt = train_lm(
            direction,
            store=None,  # segments already materialized
            vocab=vocab,
            model_cfg=model_cfg,
            train_cfg=train_cfg,
            seg_len=seg_len,
            segments=segments,
            log_path=log_path,
            log_fn=lambda step, loss, lr: _log(
                f"  step {step:>6}  loss {loss:.4f}  lr {lr:.2e}"
            ),
        )
    except DivergenceError as e:
        if e.last_good is not None:
            rescue = out / f"{direction}.diverged.ckpt"
            save_checkpoint(e.last_good, rescue)
            raise RuntimeError(f"{e}; last good checkpoint saved to {rescue}") from None
        raise
    path = _ckpt_path(cfg, out, direction)
    save_checkpoint(ckpt, path)
    manifest.record(path, "train-lm", cfg.digest())
    manifest.record(log_path, "train-lm", cfg.digest())
    manifest.save("train-lm", cfg.digest(), cfg.seed)
    _log(f"wrote {path}")
    return 0


def cmd_extract(args) -> int:
    cfg, out, manifest = _setup(args)
    task = _task(cfg)
    setting = _setting(cfg)
    pool = cfg.get("pool", "first")
    vocab = _load_vocab(cfg, out, manifest)
    which = [s for s in ("train", "dev", "test") if cfg.get(f"data.{s}")]
    if not which:
        raise KeyError("missing config keys: data.train / data.dev / data.test")
    data = _data_splits(cfg, vocab, task, which)
    (out / "reps").mkdir(parents=True, exist_ok=True)

    # black-box mode: a split with external.<split> configured takes its
    # forward representations from that dump instead of a local checkpoint
    need_local_forward = "forward" in SETTING_DIRECTIONS[setting] and any(
        not cfg.get(f"external.{s}") for s in which
    )
    ckpts: dict[str, ModelCheckpoint] = {}
    for direction in SETTING_DIRECTIONS[setting]:
        if direction == "forward" and not need_local_forward:
            continue
        ckpts[direction] = _load_ckpt(cfg, out, manifest, direction, vocab)
    if len(ckpts) == 2 and ckpts["forward"].vocab_hash != ckpts["backward"].vocab_hash:
        raise ValueError("vocabulary not shared")

    for split, sentences in data.items():
        n_words = sum(len(s.words) for s in sentences)
        for direction in SETTING_DIRECTIONS[setting]:
            path = _reps_path(out, split, direction)
            if direction == "forward" and cfg.get(f"external.{split}"):
                ext = F.load_external_reps(cfg.require(f"external.{split}"))
                if ext.rows != n_words:
                    raise ValueError(
                        f"external reps for {split} have {ext.rows} rows, "
                        f"dataset has {n_words} words"
                    )
                F.dump_reps(ext, path)
            else:
                matrix = _extract_split(ckpts[direction], sentences, pool)
                F.dump_reps(matrix, path)
            manifest.record(path, "extract", cfg.digest())
            _log(f"wrote {path}")
    manifest.save("extract", cfg.digest(), cfg.seed)
    return 0


def cmd_train_probe(args) -> int:
    cfg, out, manifest = _setup(args)
    task = _task(cfg)
    setting = _setting(cfg)
    vocab = _load_vocab(cfg, out, manifest)
    data = _data_splits(cfg, vocab, task, ["train", "dev"])
    train_reps = _fused_split(cfg, out, manifest, setting, "train", data["train"])
    dev_reps = _fused_split(cfg, out, manifest, setting, "dev", data["dev"])
    pp, history = train_probe(
        train_reps,
        [s.tags for s in data["train"]],
        _probe_train_config(cfg, seed=component_seed(cfg.seed, "probe")),
        epochs=cfg.get_int("probe.epochs", 30),
        dev_reps=dev_reps,
        dev_labels=[s.tags for s in data["dev"]],
        dev_scorer=_scorer(task),
        dropout_rate=cfg.get_float("probe.dropout", 0.1),
    )
    path = Path(cfg.get("probe.path") or out / "probe.bin")
    save_probe(pp, path)
    hist_path = out / "probe_history.json"
    hist_path.write_text(
        json.dumps([{"epoch": e, "dev_score": s} for e, s in history], indent=2) + "\n",
        encoding="utf-8",
    )
    manifest.record(path, "train-probe", cfg.digest())
    manifest.record(hist_path, "train-probe", cfg.digest())
    manifest.save("train-probe", cfg.digest(), cfg.seed)
    best = max(history, key=lambda es: es[1])[1] if history else float("nan")
    _log(f"wrote {path} (best dev score {best:.4f})")
    return 0


def _report(cfg: RunConfig, task: str, gold: list[list[str]], pred: list[list[str]]) -> MetricsReport:
    report = tags_to_report(gold, pred, seeds=(cfg.seed,), config_digest=cfg.digest())
    return report


def cmd_eval(args) -> int:
    cfg, out, manifest = _setup(args)
    task = _task(cfg)
    vocab = _load_vocab(cfg, out, manifest)
    data = _data_splits(cfg, vocab, task, ["test"])
    gold = [list(s.tags) for s in data["test"]]
    if args.pred_conll:
        col = TAG_COLUMNS.get(task, 3)
        pred_sents = read_conll(args.pred_conll, vocab, tag_column=col)
        pred = [list(s.tags) for s in pred_sents]
    else:
        setting = _setting(cfg)
        probe_path = Path(cfg.get("probe.path") or out / "probe.bin")
        if not probe_path.exists():
            raise FileNotFoundError(f"missing probe file: {probe_path} (run train-probe)")
        manifest.verify(probe_path)
        pp = load_probe(probe_path)
        test_reps = _fused_split(cfg, out, manifest, setting, "test", data["test"])
        pred = [list(predict_tags(pp, rm)) for rm in test_reps]
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} sentences, predictions {len(pred)}")
    report = _report(cfg, task, gold, pred)
    metrics_path = out / "metrics.json"
    metrics_path.write_text(report.to_json() + "\n", encoding="utf-8")
    manifest.record(metrics_path, "eval", cfg.digest())
    manifest.save("eval", cfg.digest(), cfg.seed)
    print(report.to_json())
    return 0


def cmd_fewshot(args) -> int:
    cfg, out, manifest = _setup(args)
    task = _task(cfg)
    setting = _setting(cfg)
    vocab = _load_vocab(cfg, out, manifest)
    data = _data_splits(cfg, vocab, task, ["train", "dev", "test"])
    reps = {
        split: _fused_split(cfg, out, manifest, setting, split, data[split])
        for split in ("train", "dev", "test")
    }
    spec = FS.FewShotSpec(
        k=cfg.get_int("fewshot.k", 16),
        entity_types=tuple(cfg.get_list("fewshot.entity_types", FS.DEFAULT_ENTITY_TYPES)),
        seed=component_seed(cfg.seed, "fewshot"),
        n_trials=cfg.get_int("fewshot.n_trials", 20),
    )
    idx = FS.sample_kshot_indices(data["train"], spec)
    kshot_reps = [reps["train"][i] for i in idx]
    kshot_tags = [data["train"][i].tags for i in idx]
    label_set = sorted({t for s in data["train"] for t in s.tags})
    scorer = _scorer(task)
    trials = FS.random_hp_trials(spec)
    epochs = cfg.get_int("probe.epochs", 30)

    def run_trial(trial: FS.TrialConfig) -> dict:
        tc = dataclasses.replace(
            _probe_train_config(cfg, seed=trial.seed, lr=trial.lr),
            batch_size=trial.batch_size,
        )
        pp, _ = train_probe(
            kshot_reps,
            kshot_tags,
            tc,
            epochs=epochs,
            dev_reps=reps["dev"],
            dev_labels=[s.tags for s in data["dev"]],
            dev_scorer=scorer,
            label_set=label_set,
            dropout_rate=trial.dropout,
        )
        dev_pred = [list(predict_tags(pp, rm)) for rm in reps["dev"]]
        test_pred = [list(predict_tags(pp, rm)) for rm in reps["test"]]
        return {
            "trial_id": trial.trial_id,
            "lr": trial.lr,
            "seed": trial.seed,
            "dropout": trial.dropout,
            "dev_f1": scorer([list(s.tags) for s in data["dev"]], dev_pred),
            "test_f1": scorer([list(s.tags) for s in data["test"]], test_pred),
        }

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(run_trial, trials))
    else:
        results = [run_trial(t) for t in trials]
    results.sort(key=lambda r: r["trial_id"])
    ledger = out / "fewshot_trials.jsonl"
    with open(ledger, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    manifest.record(ledger, "fewshot", cfg.digest())
    manifest.save("fewshot", cfg.digest(), cfg.seed)
    summary = {
        "k": spec.k,
        "n_samples": len(idx),
        "n_trials": spec.n_trials,
        "top3_test_f1_mean": FS.top3_mean(results),
    }
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def cmd_synth(args) -> int:
    cfg, out, manifest = _setup(args)
    setting = _setting(cfg)
    vocab = _load_vocab(cfg, out, manifest)
    dependence = cfg.get("synth.dependence", "next_token")
    n = cfg.get_int("synth.n_sentences", 3000)
    ds = gen_directional_dataset(n, seed=component_seed(cfg.seed, "synth"), dependence=dependence)  # type: ignore[arg-type]
    splits = {
        name: [make_labeled_sentence(s.words, s.tags, vocab) for s in getattr(ds, name)]
        for name in ("train", "dev", "test")
    }
    data_dir = out / "synth_data"
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, sents in splits.items():
        with open(data_dir / f"{name}.conll", "w", encoding="utf-8") as f:
            for s in sents:
                for w, t in zip(s.words, s.tags):
                    f.write(f"{w} {t}\n")
                f.write("\n")

    ckpts = {
        d: _load_ckpt(cfg, out, manifest, d, vocab) for d in SETTING_DIRECTIONS[setting]
    }
    if len(ckpts) == 2 and ckpts["forward"].vocab_hash != ckpts["backward"].vocab_hash:
        raise ValueError("vocabulary not shared")
    pool = cfg.get("pool", "first")

    def fused(sentences: list[LabeledSentence]) -> list[F.RepMatrix]:
        per_dir = {
            d: _split_rows(_extract_split(ckpts[d], sentences, pool), sentences)
            for d in ckpts
        }
        if setting == "forward_only":
            return per_dir["forward"]
        if setting == "backward_only":
            return per_dir["backward"]
        return [
            F.concat_reps(f, b)
            for f, b in zip(per_dir["forward"], per_dir["backward"])
        ]

    _log(f"extracting representations for {sum(len(s) for s in splits.values())} sentences")
    reps = {name: fused(sents) for name, sents in splits.items()}
    pp, history = train_probe(
        reps["train"],
        [s.tags for s in splits["train"]],
        _probe_train_config(cfg, seed=component_seed(cfg.seed, "probe")),
        epochs=cfg.get_int("probe.epochs", 8),
        dev_reps=reps["dev"],
        dev_labels=[s.tags for s in splits["dev"]],
        dev_scorer=span_f1,
        dropout_rate=cfg.get_float("probe.dropout", 0.1),
    )
    pred = [list(predict_tags(pp, rm)) for rm in reps["test"]]
    gold = [list(s.tags) for s in splits["test"]]
    report = tags_to_report(gold, pred, seeds=(cfg.seed,), config_digest=cfg.digest())
    path = out / f"synth_{dependence}_{setting}_metrics.json"
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    manifest.record(path, "synth", cfg.digest())
    manifest.save("synth", cfg.digest(), cfg.seed)
    print(report.to_json())
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidirep",
        description="Backward-LM fusion toolkit: train a small right-to-left "
        "LM and concatenate its token representations with a forward LM's for "
        "token classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE", help="config override"
        )
        p.add_argument("--out", required=True, help="run directory for artifacts")

    p = sub.add_parser("train-tokenizer", help="train the shared BPE vocabulary")
    common(p)
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train-lm", help="pretrain a causal LM")
    common(p)
    p.add_argument("--direction", choices=("forward", "backward"), required=True)
    p.set_defaults(fn=cmd_train_lm)

    p = sub.add_parser("extract", help="dump word-level representations")
    common(p)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("train-probe", help="train the classification head")
    common(p)
    p.set_defaults(fn=cmd_train_probe)

    p = sub.add_parser("eval", help="score the test split (JSON to stdout)")
    common(p)
    p.add_argument(
        "--pred-conll",
        default=None,
        help="score this CoNLL predictions file instead of running the probe",
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fewshot", help="K-shot sampling + hyperparameter search")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="concurrent trials")
    p.set_defaults(fn=cmd_fewshot)

    p = sub.add_parser("synth", help="synthetic directional benchmark")
    common(p)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        raise
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        msg = e.args[0] if e.args else str(e)
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
