"""Run configuration, deterministic seed splitting, and the artifact manifest.

Config files are line-oriented ``key = value`` with dotted section keys;
``--set key=value`` overrides. All randomness flows from one top-level seed:
each component derives its own seed by hashing its name together with the
master seed (sha256, first 8 bytes, masked to 31 bits).

Every artifact a command writes is recorded in the out directory's
manifest.json with its sha256 and the digest of the config that produced it;
commands verify the recorded hash of every manifest-listed artifact they
consume and refuse mismatched pipelines.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping, Sequence

SEED_ENV_VAR = "BIDIREP_SEED"


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {s!r}")
        key, value = s.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Flat dotted-key configuration with typed access."""

    def __init__(self, values: Mapping[str, str]):
        self.values = dict(values)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "RunConfig":
        values: dict[str, str] = {}
        if path is not None:
            values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override must be key=value, got {item!r}")
            key, value = item.split("=", 1)
            values[key.strip()] = value.strip()
        return cls(values)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.values.get(key, default)

    def require(self, key: str) -> str:
        if key not in self.values:
            raise KeyError(f"missing config key: {key}")
        return self.values[key]

    def get_int(self, key: str, default: int) -> int:
        v = self.values.get(key)
        return default if v is None else int(v)

    def get_float(self, key: str, default: float) -> float:
        v = self.values.get(key)
        return default if v is None else float(v)

    def get_list(self, key: str, default: Sequence[str] = ()) -> list[str]:
        v = self.values.get(key)
        if v is None:
            return list(default)
        return [p for p in v.replace(",", " ").split() if p]

    @property
    def seed(self) -> int:
        v = self.values.get("seed") or os.environ.get(SEED_ENV_VAR)
        return int(v) if v is not None else 0

    def digest(self) -> str:
        canon = "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def component_seed(master: int, component: str) -> int:
    """Per-component seed: sha256("<component>:<master>") -> first 8 bytes,
    little-endian, masked to 31 bits."""
    digest = hashlib.sha256(f"{component}:{master}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFF


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Per-run-directory record of written artifacts and their digests."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        self.data: dict = {"artifacts": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
            self.data.setdefault("artifacts", {})

    def _rel(self, path: str | Path) -> str:
        p = Path(path).resolve()
        try:
            return str(p.relative_to(self.out_dir.resolve()))
        except ValueError:
            return str(p)

    def record(self, path: str | Path, command: str, config_digest: str) -> None:
        self.data["artifacts"][self._rel(path)] = {
            "sha256": file_digest(path),
            "command": command,
            "config_digest": config_digest,
        }

    def verify(self, path: str | Path) -> None:
        """If path was produced by an earlier command in this run directory,
        check it has not been altered since."""
        entry = self.data["artifacts"].get(self._rel(path))
        if entry is None:
            return
        actual = file_digest(path)
        if actual != entry["sha256"]:
            raise ValueError(
                f"artifact digest mismatch for {path}: manifest has "
                f"{entry['sha256'][:12]}..., file is {actual[:12]}... "
                "(pipeline out of sync; regenerate upstream artifacts)"
            )

    def save(self, command: str, config_digest: str, seed: int) -> None:
        import numpy
        import torch

        self.data["config_digest"] = config_digest
        self.data["seed"] = seed
        self.data["last_command"] = command
        self.data["versions"] = {
            "bidirep": "0.1.0",
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        }
        self.path.write_text(
            json.dumps(self.data, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
