"""Cross-matching a corpus into a fused duplicate-signature set, and filtering against it."""

from __future__ import annotations

import io
import struct
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InputError
from .hashing import M_MAX, M_MIN
from .index import SignatureIndex, _as_arrays, hough_votes

DEFAULT_THRESHOLD = 5
DEFAULT_MIN_MATCHES = 10

_DUP_MAGIC = b"SDUP"
_DUP_VERSION = 1


@dataclass
class DuplicateSet:
    threshold: int = DEFAULT_THRESHOLD
    m: int = M_MIN
    M: int = M_MAX
    entries: set[tuple[int, int]] = field(default_factory=set)
    _postings: dict[int, list[int]] = field(default_factory=lambda: defaultdict(list), repr=False)

    def __len__(self):
        return len(self.entries)

    def add(self, key: int, rel_time: int) -> bool:
        if (key, rel_time) in self.entries:
            return False
        self.entries.add((key, rel_time))
        self._postings[key].append(rel_time)
        return True

    def best_match(self, keys: np.ndarray, anchors: np.ndarray) -> tuple[int, int]:
        """(offset, votes) of the best temporally consistent alignment against the set."""
        offs = [t - a for k, a in zip(keys.tolist(), anchors.tolist()) for t in self._postings.get(k, ())]
        return hough_votes(offs)

    @property
    def span(self) -> int:
        return max((t for _, t in self.entries), default=-1)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_DUP_MAGIC)
        buf.write(struct.pack("<IIIII", _DUP_VERSION, self.m, self.M, self.threshold, len(self.entries)))
        for key, t in sorted(self.entries):
            buf.write(struct.pack("<Ii", key, t))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DuplicateSet":
        if data[:4] != _DUP_MAGIC:
            raise InputError("not a duplicate-set file (bad magic)")
        try:
            version, m, M, threshold, n = struct.unpack_from("<IIIII", data, 4)
            if version != _DUP_VERSION:
                raise InputError(f"unsupported duplicate-set version {version}")
            dup = cls(threshold, m, M)
            for i in range(n):
                dup.add(*struct.unpack_from("<Ii", data, 24 + 8 * i))
        except struct.error as exc:
            raise InputError(f"truncated duplicate-set file: {exc}") from exc
        return dup


def _frequent_signatures(
    index: SignatureIndex,
    audio_id: str,
    keys: np.ndarray,
    anchors: np.ndarray,
    min_matches: int,
    threshold: int,
) -> np.ndarray:
    """Indices of this clip's signatures found, consistently aligned, in >= min_matches audios."""
    hits: dict[str, list[tuple[int, int]]] = defaultdict(list)
    with index.lock.read():
        for i, (key, anchor) in enumerate(zip(keys.tolist(), anchors.tolist())):
            for other, db_anchor in index.postings.get(key, ()):
                if other != audio_id:
                    hits[other].append((i, db_anchor - anchor))
    support = np.ones(keys.size, dtype=np.int64)  # the clip itself
    for pairs in hits.values():
        offset, votes = hough_votes(o for _, o in pairs)
        if votes >= threshold:
            for i in {i for i, o in pairs if o == offset}:
                support[i] += 1
    return np.flatnonzero(support >= min_matches)


def build_duplicate_set(
    corpus: Sequence[tuple[str, object]],
    min_matches: int = DEFAULT_MIN_MATCHES,
    threshold: int = DEFAULT_THRESHOLD,
    m: int = M_MIN,
    M: int = M_MAX,
    workers: int = 1,
) -> DuplicateSet:
    """Fuse the signatures of segments repeated across at least ``min_matches`` audios.

    Signatures are mapped onto one shared timeline; copies that land on the same
    (key, relative time) are stored once.
    """
    if not corpus:
        raise InputError("empty corpus")
    arrays = [(aid, *_as_arrays(sigs, m, M)) for aid, sigs in corpus]
    index = SignatureIndex(m, M)
    for aid, keys, anchors in arrays:
        index.add(aid, (keys, anchors))

    def scan(chunk):
        return [(aid, keys, anchors, _frequent_signatures(index, aid, keys, anchors, min_matches, threshold))
                for aid, keys, anchors in chunk]

    workers = max(1, workers)
    size = -(-len(arrays) // workers)
    chunks = [arrays[i : i + size] for i in range(0, len(arrays), size)]
    if workers == 1:
        scanned = [scan(c) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as pool:
            scanned = list(pool.map(scan, chunks))

    dup = DuplicateSet(threshold, m, M)
    for aid, keys, anchors, idx in (row for part in scanned for row in part):
        if idx.size == 0:
            continue
        k, a = keys[idx], anchors[idx]
        offset, votes = dup.best_match(k, a)
        if votes >= threshold:
            rel = a + offset
        else:
            # New repeated segment: give it its own stretch of the timeline.
            base = dup.span + 2 * M + 1 if len(dup) else 0
            rel = a - a.min() + base
        for key, t in zip(k.tolist(), rel.tolist()):
            dup.add(key, t)
    return dup


def is_duplicate(sigs, dup: DuplicateSet) -> tuple[bool, int]:
    keys, anchors = _as_arrays(sigs, dup.m, dup.M)
    if keys.size == 0:
        return False, 0
    _, votes = dup.best_match(keys, anchors)
    return votes >= dup.threshold, votes
