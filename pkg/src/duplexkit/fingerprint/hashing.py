"""Constellation keypoints and 26-bit triplet signatures."""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d

from ..errors import InputError
from .mel import N_BANDS, MelSpec

M_MIN = 4
M_MAX = 20
TIME_WINDOW = 9
KEY_BITS = 26


@dataclass(frozen=True, order=True)
class Keypoint:
    t: int
    f: int


@dataclass(frozen=True)
class Signature:
    f_b: int
    f_k: int
    f_f: int
    dt_b: int
    dt_f: int
    anchor: int = 0

    @property
    def fields(self) -> tuple[int, int, int, int, int]:
        return (self.f_b, self.f_k, self.f_f, self.dt_b, self.dt_f)


def extract_constellation(spec: MelSpec | np.ndarray, time_window: int = TIME_WINDOW) -> list[Keypoint]:
    """Keypoints passing the energy, time and frequency filters; at most one per frame."""
    S = np.asarray(getattr(spec, "values", spec), dtype=np.float64)
    if S.ndim != 2 or S.shape[0] == 0:
        return []
    energy = S > S.mean()
    local_max = S >= maximum_filter1d(S, size=time_window, axis=0, mode="constant", cval=-np.inf)
    best = np.argmax(S, axis=1)
    rows = np.arange(S.shape[0])
    keep = energy[rows, best] & local_max[rows, best]
    return [Keypoint(int(t), int(best[t])) for t in rows[keep]]


def extract_signatures(c: Sequence[Keypoint], m: int = M_MIN, M: int = M_MAX) -> list[Signature]:
    """Pair each keypoint with its time-closest backward and forward neighbours."""
    if not 0 <= m < M:
        raise InputError(f"need 0 <= m < M, got m={m}, M={M}")
    pts = sorted(c)
    times = [p.t for p in pts]
    sigs = []
    for p in pts:
        # backward: largest t_b with t_k - M < t_b <= t_k - m
        i = bisect.bisect_right(times, p.t - m) - 1
        if i < 0 or times[i] <= p.t - M:
            continue
        # forward: smallest t_f with t_k + m <= t_f < t_k + M
        j = bisect.bisect_left(times, p.t + m)
        if j >= len(times) or times[j] >= p.t + M:
            continue
        b, f = pts[i], pts[j]
        sigs.append(Signature(b.f, p.f, f.f, p.t - b.t, f.t - p.t, p.t))
    return sigs


def _check_layout(m: int, M: int):
    if M - m > 16:
        raise InputError(f"M - m = {M - m} does not fit in 4 bits")


def pack_key(s: Signature, m: int = M_MIN, M: int = M_MAX) -> int:
    _check_layout(m, M)
    for name, f in (("f_b", s.f_b), ("f_k", s.f_k), ("f_f", s.f_f)):
        if not 0 <= f < N_BANDS:
            raise InputError(f"{name}={f} outside 0..{N_BANDS - 1}")
    for name, dt in (("dt_b", s.dt_b), ("dt_f", s.dt_f)):
        if not m <= dt < M:
            raise InputError(f"{name}={dt} outside [{m}, {M})")
    return (s.f_b << 20) | (s.f_k << 14) | (s.f_f << 8) | ((s.dt_b - m) << 4) | (s.dt_f - m)


def unpack_key(key: int, m: int = M_MIN, M: int = M_MAX, anchor: int = 0) -> Signature:
    _check_layout(m, M)
    if not 0 <= key < (1 << KEY_BITS):
        raise InputError(f"key {key} outside 26-bit range")
    sig = Signature(
        (key >> 20) & 63, (key >> 14) & 63, (key >> 8) & 63, ((key >> 4) & 15) + m, (key & 15) + m, anchor
    )
    if sig.dt_b >= M or sig.dt_f >= M:
        raise InputError(f"key {key} encodes a time delta outside [{m}, {M})")
    return sig


def pack_signatures(sigs: Sequence[Signature], m: int = M_MIN, M: int = M_MAX) -> tuple[np.ndarray, np.ndarray]:
    """(keys uint32, anchors int64) arrays for bulk indexing."""
    keys = np.fromiter((pack_key(s, m, M) for s in sigs), dtype=np.uint32, count=len(sigs))
    anchors = np.fromiter((s.anchor for s in sigs), dtype=np.int64, count=len(sigs))
    return keys, anchors


def tolerance_variants(key: int, m: int = M_MIN, M: int = M_MAX) -> list[int]:
    """The key plus its dt_b / dt_f +-1 neighbours that stay inside [m, M)."""
    s = unpack_key(key, m, M)
    out = []
    for db in (-1, 0, 1):
        for df in (-1, 0, 1):
            b, f = s.dt_b + db, s.dt_f + df
            if m <= b < M and m <= f < M:
                out.append(pack_key(Signature(s.f_b, s.f_k, s.f_f, b, f), m, M))
    return out
