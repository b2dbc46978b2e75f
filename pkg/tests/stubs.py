"""Stub models exposing the engine's streaming interface.

Logits are a pure function of (prefix rows, partial row). The streaming path
accumulates the prefix one row at a time; ``forward_logits`` rebuilds every
prefix from the grid. Identical functions on identical inputs make the two
paths bit-identical exactly when the engine's bookkeeping is right.
"""

from __future__ import annotations

import zlib

import numpy as np

from duplexkit.layout import INITIAL_ID


class PrefixStub:
    def __init__(self, cardinalities, fn):
        self.cardinalities = tuple(cardinalities)
        self.fn = fn

    def new_cache(self):
        return {"rows": []}

    def temporal_step(self, cache, prev_row):
        cache["rows"].append(tuple(int(t) for t in prev_row))
        return tuple(cache["rows"])

    def step_logits(self, z, partial_row):
        return np.asarray(self.fn(z, tuple(int(t) for t in partial_row), self.cardinalities), dtype=np.float64)

    def forward_logits(self, grid):
        grid = np.asarray(grid, dtype=np.int64)
        S, K = grid.shape
        rows = [tuple([INITIAL_ID] * K)] + [tuple(int(t) for t in r) for r in grid]
        out = [np.empty((S, n)) for n in self.cardinalities]
        for s in range(S):
            prefix = tuple(rows[: s + 1])
            for k in range(K):
                out[k][s] = self.fn(prefix, tuple(int(t) for t in grid[s, :k]), self.cardinalities)
        return out


def random_logits(prefix, partial, cards):
    """Pseudo-random logits seeded by a checksum of everything visible."""
    raw = np.asarray([t for row in prefix for t in row] + [-1] + list(partial), dtype=np.int64).tobytes()
    rng = np.random.default_rng(zlib.crc32(raw))
    return 2.0 * rng.standard_normal(cards[len(partial)])


def random_stub(cardinalities):
    return PrefixStub(cardinalities, random_logits)


def one_hot(n, i, hi=10.0):
    out = np.zeros(n)
    out[i] = hi
    return out


def echo_asr_stub(cardinalities, text_delay):
    """Text logit peaks at the semantic token of the row ``text_delay`` steps back."""

    def fn(prefix, partial, cards):
        k = len(partial)
        if k == 0:
            s = len(prefix) - 1  # current step
            src = s - text_delay
            if src >= 0 and src + 1 < len(prefix):
                tok = prefix[src + 1][1]
                if tok > 0:
                    return one_hot(cards[0], tok - 1)
            return one_hot(cards[0], 0)
        return np.zeros(cards[k])

    return PrefixStub(cardinalities, fn)


def pad_stub(cardinalities, pad_logit=0.0, word_logit=0.0, epad_logit=-1e9, pad_id=1, epad_id=2):
    """Text distribution fixed: PAD vs a single word token vs EPAD; audio uniform."""

    def fn(prefix, partial, cards):
        k = len(partial)
        if k:
            return np.zeros(cards[k])
        lg = np.full(cards[0], -1e9)
        lg[pad_id - 1] = pad_logit
        lg[epad_id - 1] = epad_logit
        lg[max(pad_id, epad_id)] = word_logit
        return lg

    return PrefixStub(cardinalities, fn)
