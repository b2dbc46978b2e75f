"""Word-aligned text stream with PAD / EPAD filler tokens."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InputError
from .layout import FRAME_RATE_HZ


@dataclass(frozen=True)
class SpecialTokens:
    pad_id: int = 1
    epad_id: int = 2

    def __post_init__(self):
        if self.pad_id == self.epad_id:
            raise InputError("PAD and EPAD must be distinct ids")

    def is_special(self, token: int) -> bool:
        return token == self.pad_id or token == self.epad_id


@dataclass(frozen=True)
class WordTiming:
    tokens: tuple[int, ...]
    start_time_s: float
    word: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise InputError(f"word {self.word!r} has no tokens")
        if self.start_time_s < 0:
            raise InputError(f"word {self.word!r} starts at negative time {self.start_time_s}")


@dataclass
class TextStream:
    tokens: list[int]
    frame_rate_hz: float = FRAME_RATE_HZ

    def __len__(self):
        return len(self.tokens)


def time_to_index(t: float, frame_rate_hz: float = FRAME_RATE_HZ) -> int:
    if t < 0:
        raise InputError(f"negative timestamp {t}")
    # The epsilon keeps 0.56 * 12.5 from landing on 6.999...
    return math.floor(t * frame_rate_hz + 1e-9)


def build_text_stream(
    words: Sequence[WordTiming],
    T: int,
    sp: SpecialTokens = SpecialTokens(),
    frame_rate_hz: float = FRAME_RATE_HZ,
) -> TextStream:
    """Lay out word tokens at their frame index, PAD elsewhere, EPAD before each word.

    A word starting at index 0 or 1 gets its EPAD at index 1 and its tokens
    shifted to start at index 2. EPAD is never written over a previous word's
    token. Overlapping word spans raise :class:`InputError`.
    """
    W = [sp.pad_id] * T
    owner = [-1] * T  # which word wrote each slot
    last_start = -1
    for i, w in enumerate(words):
        for tok in w.tokens:
            if sp.is_special(tok):
                raise InputError(f"word {i} ({w.word!r}) contains a special token id {tok}")
        t_i = time_to_index(w.start_time_s, frame_rate_hz)
        if t_i <= last_start:
            raise InputError(f"word {i} ({w.word!r}) does not start after word {i - 1}")
        last_start = t_i
        if t_i <= 1:
            epad_at, start = 1, 2
        else:
            epad_at, start = t_i - 1, t_i
        end = start + len(w.tokens)
        if end > T:
            raise InputError(f"word {i} ({w.word!r}) spans indices {start}..{end - 1}, beyond T={T}")
        clash = [owner[j] for j in range(start, end) if owner[j] >= 0]
        if clash:
            raise InputError(f"word {i} ({w.word!r}) overlaps word {clash[0]} ({words[clash[0]].word!r})")
        if epad_at < T and owner[epad_at] < 0:
            W[epad_at] = sp.epad_id
        for j, tok in enumerate(w.tokens):
            W[start + j] = tok
            owner[start + j] = i
    return TextStream(W, frame_rate_hz)


def extract_words(stream: TextStream | Sequence[int], sp: SpecialTokens = SpecialTokens()) -> list[tuple[list[int], int]]:
    tokens = stream.tokens if isinstance(stream, TextStream) else list(stream)
    out: list[tuple[list[int], int]] = []
    run: list[int] = []
    run_start = 0
    for i, tok in enumerate(tokens):
        if sp.is_special(tok):
            if run:
                out.append((run, run_start))
                run = []
            continue
        if not run:
            run_start = i
        run.append(int(tok))
    if run:
        out.append((run, run_start))
    return out


def pad_fraction(
    stream: TextStream | Sequence[int], sp: SpecialTokens = SpecialTokens(), include_epad: bool = False
) -> float:
    """Share of PAD tokens; EPAD counts as padding only with ``include_epad``."""
    tokens = stream.tokens if isinstance(stream, TextStream) else list(stream)
    if not tokens:
        raise InputError("pad fraction of an empty stream")
    fill = (sp.pad_id, sp.epad_id) if include_epad else (sp.pad_id,)
    return sum(1 for t in tokens if t in fill) / len(tokens)


def load_words_jsonl(lines: Iterable[str]) -> list[WordTiming]:
    words = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            words.append(WordTiming(tuple(obj["tokens"]), float(obj["start"]), str(obj.get("word", ""))))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"line {n}: bad word record ({exc})") from exc
    return words
