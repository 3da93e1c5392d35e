"""Deterministic generators for the bundled corpora.

Everything under data/ is produced by these functions (see
scripts/gen_corpus.py), so the whole pipeline runs without downloading
anything:

* a pretraining text corpus with second-order Markov structure over a closed
  word list, one sentence per line, documents separated by blank lines, with
  occasional heading-markup lines that ingestion is expected to drop;
* a synthetic CoNLL-format token-classification corpus (columns: word, POS,
  chunk, NER) in which an entity's NER type and its chunk label are revealed
  by the *following* cue word, so suffix context is required to tag the
  entity's first word correctly (the effect the toolkit exists to measure).
"""

from __future__ import annotations

import hashlib
import random
from pathlib import Path
from typing import Sequence

from .evaluation import SYNTH_WORDS

_COMMON_WORDS = (
    "about above after again against along among around because before begin "
    "below between both bring built call came carry center change clear close "
    "cold come could country course cover cross dark deep does done door down "
    "draw dream drive early earth east enough even ever every face fall far "
    "fast feel felt few fine fire firm float floor follow food foot force "
    "form forward four free fresh front full gave given glass goes gold gone "
    "grew ground grow half hall heard heart heat heavy held hill hold hope "
    "host hot huge idea inside iron island just keep kept king knew known "
    "land large late lead learn least leave left less letter level lift "
    "list live local long look loud love low main march mark matter maybe "
    "metal middle mind miss moon morning most move music near nearly never "
    "new north note nothing now ocean off often old once only open orange "
    "other our out over own page pair paper park pass past path peace pick "
    "plain plan plant play poem pool poor press print pull push quick quiet "
    "race rain ran reach read ready real rest rich ride ring rise river road "
    "rock roll roof round row rule run safe sail salt sand saw scale school "
    "sea seat second seen self sell send sense serve seven shade shape share "
    "sharp shell shine shore short show sign silver simple sing sister six "
    "size sky sleep slow small smart smooth snow soft soil song soon sort "
    "sound south space speed spell spend spot spread square stage star start "
    "state stay steam steel step stick still stone stood stop store storm "
    "straight strange stream street string strong such sudden sugar suit "
    "summer sure sweet table tail take talk tall team tell ten test than "
    "that them then thick thin third this those though thought thousand "
    "throw tide tiny together tone took tool top total touch toward trade "
    "train travel tree trip truck true turn twenty under unit upon use "
    "valley view village visit voice wait walk wall warm wash watch wave "
    "wear west wheel when where which while white whole wide wild will wind "
    "window wing winter wire wish with wonder wood wrote yard yellow yes yet"
).split()

AMBIG_NAMES = (
    "milan jordan casey avery logan morgan reese quinn harper sage "
    "ellis blake drew lane marley rowan shea skyler tatum devon "
    "kendall leslie payton emery finley hollis jules kerry lennon merritt"
).split()

TYPED_NAMES = {
    "PER": "smith johnson baker carter mason turner".split(),
    "ORG": "acme globex initech umbra vertex nexus".split(),
    "LOC": "delta harbor ridge summit mesa lagoon".split(),
    "MISC": "zephyr quartz onyx cobalt amber ivory".split(),
}

CUES = {
    "PER": "said spoke told argued smiled".split(),
    "ORG": "completes acquires employs announced ships".split(),
    "LOC": "lies borders spans sits stretches".split(),
    "MISC": "festival protocol award treaty engine".split(),
}

ENTITY_TYPES = ("PER", "LOC", "ORG", "MISC")

# NP when the cue is person/organization flavored, PP otherwise: the chunk
# label, like the NER type, is decided by the word *after* the span start.
CHUNK_OF_TYPE = {"PER": "NP", "ORG": "NP", "LOC": "PP", "MISC": "PP"}

CORPUS_WORDS = tuple(
    dict.fromkeys(
        list(SYNTH_WORDS)
        + _COMMON_WORDS
        + AMBIG_NAMES
        + [w for ws in TYPED_NAMES.values() for w in ws]
        + [w for ws in CUES.values() for w in ws]
    )
)

_name_words = set(AMBIG_NAMES) | {w for ws in TYPED_NAMES.values() for w in ws}
_cue_words = {w for ws in CUES.values() for w in ws}
FILLER_WORDS = tuple(w for w in CORPUS_WORDS if w not in _name_words | _cue_words)


def _successors(seed: int, w1: str, w2: str, k: int = 6) -> list[str]:
    """Fixed fan-out of successor words for the (w1, w2) context."""
    h = hashlib.sha256(f"{seed}:{w1}:{w2}".encode()).digest()
    n = len(CORPUS_WORDS)
    return [
        CORPUS_WORDS[int.from_bytes(h[4 * i : 4 * i + 4], "little") % n]
        for i in range(k)
    ]


def _sentence(rng: random.Random, seed: int, w1: str, w2: str) -> tuple[list[str], str, str]:
    n = rng.randint(5, 14)
    words = []
    for i in range(n):
        if rng.random() < 0.02:
            words.append(str(rng.randint(100, 9999)))
            continue
        if rng.random() < 0.15:
            nxt = CORPUS_WORDS[rng.randrange(len(CORPUS_WORDS))]
        else:
            nxt = rng.choice(_successors(seed, w1, w2))
        out = nxt
        if i == 0 and rng.random() < 0.35:
            out = nxt.capitalize()
        elif 0 < i < n - 1 and rng.random() < 0.08:
            out = nxt + ","
        words.append(out)
        w1, w2 = w2, nxt
    words.append(".")
    return words, w1, w2


def write_pretrain_corpus(
    path: str | Path, seed: int = 0, target_bytes: int = 5_000_000
) -> int:
    """Write the Markov pretraining corpus; returns the byte count."""
    rng = random.Random(seed)
    written = 0
    with open(path, "w", encoding="utf-8") as f:
        first = True
        while written < target_bytes:
            if not first:
                f.write("\n")
                written += 1
            first = False
            if rng.random() < 0.3:
                heading = f"= {rng.choice(CORPUS_WORDS)} {rng.choice(CORPUS_WORDS)} =\n"
                f.write(heading)
                written += len(heading)
            w1 = CORPUS_WORDS[rng.randrange(len(CORPUS_WORDS))]
            w2 = CORPUS_WORDS[rng.randrange(len(CORPUS_WORDS))]
            for _ in range(rng.randint(30, 60)):
                words, w1, w2 = _sentence(rng, seed, w1, w2)
                line = " ".join(words) + "\n"
                f.write(line)
                written += len(line)
    return written


# -- synthetic CoNLL corpus ------------------------------------------------------

_FILLER_POS = ("NN", "DT", "JJ", "RB", "VB")
_CUE_POS = {"PER": "VBD", "ORG": "VBZ", "LOC": "VBZ", "MISC": "NN"}


def _filler_pos(word: str) -> str:
    return _FILLER_POS[int(hashlib.sha256(word.encode()).hexdigest(), 16) % len(_FILLER_POS)]


def _fillers(rng: random.Random, lo: int, hi: int) -> list[str]:
    return [rng.choice(FILLER_WORDS) for _ in range(rng.randint(lo, hi))]


def _entity(rng: random.Random, etype: str) -> list[str]:
    pool = AMBIG_NAMES if rng.random() < 0.75 else TYPED_NAMES[etype]
    return [rng.choice(pool) for _ in range(rng.randint(1, 2))]


def gen_conll_sentence(rng: random.Random) -> list[tuple[str, str, str, str]]:
    """One sentence as (word, pos, chunk, ner) rows."""
    roll = rng.random()
    if roll < 0.15:
        entity_types: list[str] = []
    elif roll < 0.80:
        entity_types = [rng.choice(ENTITY_TYPES)]
    elif roll < 0.90:
        t = rng.choice(ENTITY_TYPES)
        entity_types = [t, t]
    else:
        entity_types = rng.sample(ENTITY_TYPES, 2)

    rows: list[tuple[str, str, str, str]] = []

    def add_fillers(lo: int, hi: int) -> None:
        for w in _fillers(rng, lo, hi):
            rows.append((w, _filler_pos(w), "O", "O"))

    add_fillers(0, 3)
    for etype in entity_types:
        names = _entity(rng, etype)
        cue = rng.choice(CUES[etype])
        chunk = CHUNK_OF_TYPE[etype]
        for j, w in enumerate(names):
            ner = ("B-" if j == 0 else "I-") + etype
            rows.append((w, "NNP", ("B-" if j == 0 else "I-") + chunk, ner))
        rows.append((cue, _CUE_POS[etype], "I-" + chunk, "O"))
        add_fillers(1, 4)
    rows.append((".", ".", "O", "O"))
    return rows


def write_conll_split(path: str | Path, n_sentences: int, rng: random.Random) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("-DOCSTART- -X- -X- O\n\n")
        for _ in range(n_sentences):
            for row in gen_conll_sentence(rng):
                f.write(" ".join(row) + "\n")
            f.write("\n")


def write_conll_corpus(
    out_dir: str | Path,
    seed: int = 0,
    n_train: int = 600,
    n_dev: int = 150,
    n_test: int = 150,
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    paths = {}
    for split, n in (("train", n_train), ("dev", n_dev), ("test", n_test)):
        p = out_dir / f"{split}.conll"
        write_conll_split(p, n, rng)
        paths[split] = p
    return paths
