"""Pluggable token counters.

The heuristic counter (ceil of UTF-8 bytes / 4) is the default and is
deliberately conservative: summing per-segment counts never underestimates
the count of the concatenated text.  The BPE counter applies a merges file
for exact counts under a specific vocabulary.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Protocol, Tuple


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class HeuristicCounter:
    """Approximate counter: ceil(utf-8 bytes / 4)."""

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


class BpeCounter:
    """Greedy byte-pair-merge counter driven by a merges file.

    The merges file holds one merge per line ("left right"), most frequent
    first; lines starting with "#" are skipped.  Text is pre-tokenized on
    whitespace (each run of spaces folds into the following word) and each
    pre-token is merged independently.
    """

    def __init__(self, merges_path):
        self.ranks: Dict[Tuple[str, str], int] = {}
        path = Path(merges_path)
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise ValueError(f"malformed merge line: {line!r}")
                self.ranks[(parts[0], parts[1])] = len(self.ranks)

    def _merge_word(self, word: str) -> List[str]:
        symbols = list(word)
        while len(symbols) > 1:
            best_rank = None
            best_index = -1
            for i in range(len(symbols) - 1):
                rank = self.ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_index = i
            if best_rank is None:
                break
            symbols[best_index : best_index + 2] = [
                symbols[best_index] + symbols[best_index + 1]
            ]
        return symbols

    def count(self, text: str) -> int:
        if not text:
            return 0
        words = []
        current = ""
        for ch in text:
            if ch.isspace():
                if current and not current.isspace():
                    words.append(current)
                    current = ch
                else:
                    current += ch
            else:
                current += ch
        if current:
            words.append(current)
        return sum(len(self._merge_word(word)) for word in words)


def make_counter(spec: dict | None) -> TokenCounter:
    """Build a counter from a config mapping ({"type": "heuristic"} or
    {"type": "bpe", "merges_path": ...})."""
    if not spec or spec.get("type", "heuristic") == "heuristic":
        return HeuristicCounter()
    if spec["type"] == "bpe":
        return BpeCounter(spec["merges_path"])
    raise ValueError(f"unknown token counter type {spec.get('type')!r}")
