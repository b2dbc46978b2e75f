"""Inverted index from signature keys to (audio, anchor) postings with Hough offset voting."""

from __future__ import annotations

import io
import struct
import threading
from collections import Counter, defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..errors import InputError
from .hashing import M_MAX, M_MIN, pack_signatures, tolerance_variants

_IDX_MAGIC = b"SIDX"
_IDX_VERSION = 1


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass(frozen=True)
class Match:
    audio_id: str
    offset: int
    votes: int


def _as_arrays(sigs, m: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(sigs, tuple) and len(sigs) == 2 and isinstance(sigs[0], np.ndarray):
        return np.asarray(sigs[0], dtype=np.uint32), np.asarray(sigs[1], dtype=np.int64)
    return pack_signatures(list(sigs), m, M)


def hough_votes(offsets: Iterable[int]) -> tuple[int, int]:
    """(best offset, votes); ties go to the offset closest to zero, then the smaller one."""
    hist = Counter(offsets)
    if not hist:
        return 0, 0
    best = max(hist.items(), key=lambda kv: (kv[1], -abs(kv[0]), -kv[0]))
    return best[0], best[1]


class SignatureIndex:
    def __init__(self, m: int = M_MIN, M: int = M_MAX):
        self.m, self.M = m, M
        self.postings: dict[int, list[tuple[str, int]]] = defaultdict(list)
        self.audio_ids: list[str] = []
        self._ids: set[str] = set()
        self.lock = RWLock()

    def __len__(self):
        return len(self.audio_ids)

    @property
    def n_postings(self) -> int:
        return sum(len(p) for p in self.postings.values())

    def add(self, audio_id: str, sigs) -> "SignatureIndex":
        keys, anchors = _as_arrays(sigs, self.m, self.M)
        with self.lock.write():
            if audio_id in self._ids:
                raise InputError(f"audio id {audio_id!r} already indexed")
            self._ids.add(audio_id)
            self.audio_ids.append(audio_id)
            touched = set()
            for key, anchor in zip(keys.tolist(), anchors.tolist()):
                self.postings[key].append((audio_id, anchor))
                touched.add(key)
            for key in touched:
                self.postings[key].sort()
        return self

    def offsets(self, sigs, tolerance: int = 0, exclude: str | None = None) -> dict[str, list[int]]:
        """Raw Hough offsets (db anchor - query anchor) per audio id."""
        if tolerance not in (0, 1):
            raise InputError("tolerance must be 0 or 1")
        keys, anchors = _as_arrays(sigs, self.m, self.M)
        out: dict[str, list[int]] = defaultdict(list)
        with self.lock.read():
            for key, anchor in zip(keys.tolist(), anchors.tolist()):
                variants = tolerance_variants(key, self.m, self.M) if tolerance else [key]
                for v in variants:
                    for audio_id, db_anchor in self.postings.get(v, ()):
                        if audio_id != exclude:
                            out[audio_id].append(db_anchor - anchor)
        return out

    def query(self, sigs, tolerance: int = 0, exclude: str | None = None) -> list[Match]:
        results = []
        for audio_id, offs in self.offsets(sigs, tolerance, exclude).items():
            offset, votes = hough_votes(offs)
            results.append(Match(audio_id, offset, votes))
        results.sort(key=lambda r: (-r.votes, r.audio_id))
        return results

    # -- persistence -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with self.lock.read():
            ids = {a: i for i, a in enumerate(self.audio_ids)}
            buf.write(_IDX_MAGIC)
            buf.write(struct.pack("<IIII", _IDX_VERSION, self.m, self.M, len(self.audio_ids)))
            for a in self.audio_ids:
                raw = a.encode()
                buf.write(struct.pack("<H", len(raw)))
                buf.write(raw)
            keys = sorted(self.postings)
            buf.write(struct.pack("<I", len(keys)))
            for key in keys:
                plist = sorted(self.postings[key])
                buf.write(struct.pack("<II", key, len(plist)))
                for audio_id, anchor in plist:
                    buf.write(struct.pack("<Ii", ids[audio_id], anchor))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignatureIndex":
        if data[:4] != _IDX_MAGIC:
            raise InputError("not a signature index file (bad magic)")
        try:
            version, m, M, n_ids = struct.unpack_from("<IIII", data, 4)
            if version != _IDX_VERSION:
                raise InputError(f"unsupported index version {version}")
            off = 20
            ids = []
            for _ in range(n_ids):
                (ln,) = struct.unpack_from("<H", data, off)
                off += 2
                ids.append(data[off : off + ln].decode())
                off += ln
            ix = cls(m, M)
            ix.audio_ids = ids
            ix._ids = set(ids)
            (n_keys,) = struct.unpack_from("<I", data, off)
            off += 4
            for _ in range(n_keys):
                key, count = struct.unpack_from("<II", data, off)
                off += 8
                plist = []
                for _ in range(count):
                    i, anchor = struct.unpack_from("<Ii", data, off)
                    off += 8
                    plist.append((ids[i], anchor))
                ix.postings[key] = plist
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise InputError(f"corrupt index file: {exc}") from exc
        return ix
