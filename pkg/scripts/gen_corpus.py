#!/usr/bin/env python3
"""Regenerate the bundled corpora under data/. Fully deterministic; the
committed files were produced by exactly this script."""

import argparse
from pathlib import Path

from bidirep.datagen import write_conll_corpus, write_pretrain_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default="data", type=Path)
    parser.add_argument("--seed", default=0, type=int)
    parser.add_argument("--pretrain-bytes", default=5_000_000, type=int)
    args = parser.parse_args()

    pretrain_dir = args.data_dir / "pretrain"
    pretrain_dir.mkdir(parents=True, exist_ok=True)
    n = write_pretrain_corpus(
        pretrain_dir / "corpus.txt", seed=args.seed, target_bytes=args.pretrain_bytes
    )
    print(f"wrote {pretrain_dir / 'corpus.txt'} ({n} bytes)")

    paths = write_conll_corpus(args.data_dir / "synth_ner", seed=args.seed)
    for split, p in paths.items():
        print(f"wrote {p}")


if __name__ == "__main__":
    main()
