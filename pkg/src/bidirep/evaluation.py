"""Span-based scoring, word accuracy, checkpoint selection, multi-seed
aggregation, and the synthetic directional benchmark.

Span extraction follows conlleval conventions for IOB2: an I-X with no open
X span is repaired as if it were B-X. A predicted span counts as correct only
when label, start and end all match a gold span exactly.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Sequence


class Span(NamedTuple):
    label: str
    start: int  # word index, inclusive
    end: int  # word index, exclusive


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    support: int = 0


@dataclass(frozen=True)
class MetricsReport:
    per_type: dict[str, PRF]
    micro: PRF
    accuracy: float | None = None
    seeds: tuple[int, ...] = ()
    config_digest: str = ""

    def to_dict(self) -> dict:
        return {
            "per_type": {
                k: {"precision": v.precision, "recall": v.recall, "f1": v.f1,
                    "support": v.support}
                for k, v in sorted(self.per_type.items())
            },
            "micro": {
                "precision": self.micro.precision,
                "recall": self.micro.recall,
                "f1": self.micro.f1,
            },
            "accuracy": self.accuracy,
            "seeds": list(self.seeds),
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            per_type={
                k: PRF(v["precision"], v["recall"], v["f1"], v.get("support", 0))
                for k, v in d["per_type"].items()
            },
            micro=PRF(
                d["micro"]["precision"],
                d["micro"]["recall"],
                d["micro"]["f1"],
                support=sum(v.get("support", 0) for v in d["per_type"].values()),
            ),
            accuracy=d.get("accuracy"),
            seeds=tuple(d.get("seeds", ())),
            config_digest=d.get("config_digest", ""),
        )


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def bio_to_spans(tags: Sequence[str]) -> list[Span]:
    """Decode a BIO tag sequence into (label, start, end) spans.

    B-X opens a span, I-X extends a same-type open span, anything else closes
    it. An I-X without a matching open span opens one (conlleval repair).
    """
    spans: list[Span] = []
    open_label: str | None = None
    start = 0
    for i, tag in enumerate(tags):
        if tag.startswith("B-") or tag.startswith("I-"):
            label = tag[2:]
            if tag.startswith("I-") and open_label == label:
                continue
            if open_label is not None:
                spans.append(Span(open_label, start, i))
            open_label = label
            start = i
        else:
            if open_label is not None:
                spans.append(Span(open_label, start, i))
            open_label = None
    if open_label is not None:
        spans.append(Span(open_label, start, len(tags)))
    return spans


def span_prf(
    gold: Sequence[Sequence[Span]],
    pred: Sequence[Sequence[Span]],
    seeds: Sequence[int] = (),
    config_digest: str = "",
) -> MetricsReport:
    """Exact-match span precision/recall/F1, per type and micro-pooled."""
    if len(gold) != len(pred):
        raise ValueError(f"sentence count mismatch: {len(gold)} vs {len(pred)}")
    tp: Counter[str] = Counter()
    n_pred: Counter[str] = Counter()
    n_gold: Counter[str] = Counter()
    for g_spans, p_spans in zip(gold, pred):
        g = Counter(g_spans)
        p = Counter(p_spans)
        for span, k in (g & p).items():
            tp[span.label] += k
        for span, k in p.items():
            n_pred[span.label] += k
        for span, k in g.items():
            n_gold[span.label] += k
    per_type: dict[str, PRF] = {}
    for label in sorted(set(n_pred) | set(n_gold)):
        p = tp[label] / n_pred[label] if n_pred[label] else 0.0
        r = tp[label] / n_gold[label] if n_gold[label] else 0.0
        per_type[label] = PRF(p, r, _f1(p, r), support=n_gold[label])
    tp_all, pred_all, gold_all = sum(tp.values()), sum(n_pred.values()), sum(n_gold.values())
    p = tp_all / pred_all if pred_all else 0.0
    r = tp_all / gold_all if gold_all else 0.0
    return MetricsReport(
        per_type=per_type,
        micro=PRF(p, r, _f1(p, r), support=gold_all),
        seeds=tuple(seeds),
        config_digest=config_digest,
    )


def tags_to_report(
    gold_tags: Sequence[Sequence[str]],
    pred_tags: Sequence[Sequence[str]],
    seeds: Sequence[int] = (),
    config_digest: str = "",
) -> MetricsReport:
    """span_prf over BIO tag sequences, with word accuracy filled in."""
    gold_spans = [bio_to_spans(t) for t in gold_tags]
    pred_spans = [bio_to_spans(t) for t in pred_tags]
    report = span_prf(gold_spans, pred_spans, seeds=seeds, config_digest=config_digest)
    flat_gold = [t for sent in gold_tags for t in sent]
    flat_pred = [t for sent in pred_tags for t in sent]
    acc = token_accuracy(flat_gold, flat_pred) if flat_gold else None
    return MetricsReport(
        per_type=report.per_type,
        micro=report.micro,
        accuracy=acc,
        seeds=report.seeds,
        config_digest=report.config_digest,
    )


def span_f1(gold_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]]) -> float:
    return tags_to_report(gold_tags, pred_tags).micro.f1


def token_accuracy(gold: Sequence[str], pred: Sequence[str]) -> float:
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} vs {len(pred)}")
    if not gold:
        return 0.0
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


def select_best_epoch(dev_scores: Sequence[tuple[int, float]]) -> int:
    """Epoch with maximum dev score; ties go to the earliest epoch."""
    if not dev_scores:
        raise ValueError("no dev scores")
    best_epoch, best = dev_scores[0]
    for epoch, score in dev_scores[1:]:
        if score > best:
            best_epoch, best = epoch, score
    return best_epoch


def aggregate_seeds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of every metric across per-seed reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    label_sets = {tuple(sorted(r.per_type)) for r in reports}
    if len(label_sets) != 1:
        raise ValueError(f"label sets differ across reports: {sorted(label_sets)}")
    n = len(reports)

    def mean_prf(prfs: list[PRF]) -> PRF:
        return PRF(
            precision=sum(x.precision for x in prfs) / n,
            recall=sum(x.recall for x in prfs) / n,
            f1=sum(x.f1 for x in prfs) / n,
            support=round(sum(x.support for x in prfs) / n),
        )

    per_type = {
        label: mean_prf([r.per_type[label] for r in reports])
        for label in reports[0].per_type
    }
    accs = [r.accuracy for r in reports]
    accuracy = sum(accs) / n if all(a is not None for a in accs) else None
    seeds = tuple(s for r in reports for s in r.seeds)
    return MetricsReport(
        per_type=per_type,
        micro=mean_prf([r.micro for r in reports]),
        accuracy=accuracy,
        seeds=seeds,
        config_digest=reports[0].config_digest,
    )


# -- synthetic directional benchmark -------------------------------------------

# 50 short common words; all of them occur frequently in the bundled
# pretraining corpus so they tokenize compactly.
SYNTH_WORDS = (
    "time year people way day man thing life world hand "
    "part child eye woman place work week case point fact "
    "group number night home water room mother area money story "
    "month lot right study book job word side kind head "
    "house power hour game line end law car city name"
).split()

SYNTH_LABEL = "TRIG"

Dependence = Literal["next_token", "prev_token"]


@dataclass(frozen=True)
class RawSentence:
    words: tuple[str, ...]
    tags: tuple[str, ...]


@dataclass(frozen=True)
class DirectionalDataset:
    train: tuple[RawSentence, ...]
    dev: tuple[RawSentence, ...]
    test: tuple[RawSentence, ...]
    triggers: frozenset[str]
    dependence: Dependence


def gen_directional_dataset(
    n_sentences: int, seed: int, dependence: Dependence = "next_token"
) -> DirectionalDataset:
    """Random-word sentences whose labels require the missing direction.

    next_token: word i is B-TRIG iff word i+1 is in the trigger set (last
    word always O), so a forward-only representation of word i carries no
    information about the label. prev_token is the mirror image.

    Splits are 2/3 train, 1/6 dev, 1/6 test, disjoint by construction.
    """
    if n_sentences < 30:
        raise ValueError(f"need at least 30 sentences, got {n_sentences}")
    if dependence not in ("next_token", "prev_token"):
        raise ValueError(f"unknown dependence {dependence!r}")
    rng = random.Random(seed)
    triggers = frozenset(rng.sample(SYNTH_WORDS, 10))
    sentences = []
    for _ in range(n_sentences):
        n = rng.randint(6, 12)
        words = tuple(rng.choice(SYNTH_WORDS) for _ in range(n))
        tags = []
        for i in range(n):
            if dependence == "next_token":
                hit = i + 1 < n and words[i + 1] in triggers
            else:
                hit = i - 1 >= 0 and words[i - 1] in triggers
            tags.append(f"B-{SYNTH_LABEL}" if hit else "O")
        sentences.append(RawSentence(words=words, tags=tuple(tags)))
    n_train = (2 * n_sentences) // 3
    n_dev = (n_sentences - n_train) // 2
    return DirectionalDataset(
        train=tuple(sentences[:n_train]),
        dev=tuple(sentences[n_train : n_train + n_dev]),
        test=tuple(sentences[n_train + n_dev :]),
        triggers=triggers,
        dependence=dependence,
    )
