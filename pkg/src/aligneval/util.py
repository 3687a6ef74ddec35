"""Small shared helpers: stable hashing for seed derivation and JSONL plumbing."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Iterator


def stable_hash64(*parts: object) -> int:
    """Deterministic 64-bit hash of the given parts.

    Unlike builtin hash(), the result does not depend on the process hash
    seed, so values derived from it are reproducible across runs and across
    worker processes.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def derive_seed(seed: int, *parts: object) -> int:
    """Per-item seed: master seed XORed with a stable hash of the item key."""
    return (int(seed) ^ stable_hash64(*parts)) & 0xFFFFFFFFFFFFFFFF


def dump_jsonl_line(obj: dict[str, Any]) -> str:
    """Serialize one record for a line-delimited JSON file (no trailing newline)."""
    return json.dumps(obj, ensure_ascii=False)


def iter_jsonl(path: str) -> Iterator[tuple[int, Any]]:
    """Yield (1-based line number, parsed object) for each non-blank line."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            yield lineno, json.loads(line)
