"""Plain, residual and split residual vector quantization.

Nearest-centroid search uses squared Euclidean distance with the lowest
index winning ties. Codebooks are learned level by level with seeded
k-means on the residuals of the previous levels.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InputError

_CB_MAGIC = b"RVQC"
_CB_VERSION = 1


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise InputError(f"codebook must be (N_A, D) with N_A >= 1, got {c.shape}")
        if not np.isfinite(c).all():
            raise InputError("codebook contains non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class RvqConfig:
    levels: int = 8
    codebook_size: int = 2048
    dim: int = 256
    frame_rate_hz: float = 12.5
    kmeans_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise InputError("levels must be >= 1")
        if self.codebook_size < 2:
            raise InputError("codebook_size must be >= 2")
        if self.frame_rate_hz <= 0:
            raise InputError("frame_rate_hz must be positive")


@dataclass(frozen=True)
class QuantizedFrame:
    """Codeword index per level; ``None`` marks a level dropped by quantizer dropout."""

    indices: tuple[int | None, ...]

    @property
    def present(self) -> list[int]:
        return [i for i in self.indices if i is not None]


@dataclass(frozen=True)
class SplitRvq:
    semantic: Codebook
    acoustic: tuple[Codebook, ...]
    # "residual": acoustic branch quantizes v - semantic centroid; "input": it quantizes v.
    acoustic_input: str = "residual"

    def __post_init__(self):
        object.__setattr__(self, "acoustic", tuple(self.acoustic))
        dims = {self.semantic.dim, *(cb.dim for cb in self.acoustic)}
        if len(dims) != 1:
            raise InputError(f"split RVQ codebooks disagree on dimension: {sorted(dims)}")
        if self.acoustic_input not in ("residual", "input"):
            raise InputError(f"acoustic_input must be 'residual' or 'input', got {self.acoustic_input!r}")

    @property
    def levels(self) -> int:
        return 1 + len(self.acoustic)


def _check_dim(v: np.ndarray, cb: Codebook) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != cb.dim:
        raise InputError(f"vector dimension {v.shape[-1]} != codebook dimension {cb.dim}")
    return v


def nearest(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest centroid for each row of ``x`` (lowest index on ties)."""
    x = np.atleast_2d(x)
    out = np.empty(x.shape[0], dtype=np.int64)
    c2 = np.einsum("ij,ij->i", centroids, centroids)
    for lo in range(0, x.shape[0], chunk):
        xb = x[lo : lo + chunk]
        # Expanded form can break exact ties; fall back to direct differences for small batches.
        if xb.shape[0] * centroids.shape[0] <= 1 << 16:
            d = ((xb[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        else:
            d = c2[None, :] - 2.0 * xb @ centroids.T
        out[lo : lo + chunk] = np.argmin(d, axis=1)
    return out


def vq_encode(v, cb: Codebook) -> tuple[int, np.ndarray]:
    v = _check_dim(v, cb)
    if v.ndim != 1:
        raise InputError("vq_encode takes a single vector")
    idx = int(nearest(v, cb.centroids)[0])
    return idx, v - cb.centroids[idx]


def rvq_encode(v, cbs: Sequence[Codebook], n_levels: int | None = None) -> QuantizedFrame:
    n_levels = len(cbs) if n_levels is None else n_levels
    if not 1 <= n_levels <= len(cbs):
        raise InputError(f"n_levels must be in 1..{len(cbs)}, got {n_levels}")
    residual = _check_dim(v, cbs[0])
    indices: list[int | None] = []
    for cb in cbs[:n_levels]:
        idx, residual = vq_encode(residual, cb)
        indices.append(idx)
    indices.extend([None] * (len(cbs) - n_levels))
    return QuantizedFrame(tuple(indices))


def rvq_decode(frame: QuantizedFrame, cbs: Sequence[Codebook]) -> np.ndarray:
    if len(frame.indices) > len(cbs):
        raise InputError("frame has more levels than codebooks")
    out = np.zeros(cbs[0].dim)
    for level, idx in enumerate(frame.indices):
        if idx is None:
            continue
        if not 0 <= idx < cbs[level].size:
            raise InputError(f"index {idx} out of range for level {level} (N_A={cbs[level].size})")
        out = out + cbs[level].centroids[idx]
    return out


def rvq_encode_batch(x: np.ndarray, cbs: Sequence[Codebook], n_levels: int | None = None) -> np.ndarray:
    """Vectorized :func:`rvq_encode`; returns ``(N, Q)`` indices with -1 for absent levels."""
    n_levels = len(cbs) if n_levels is None else n_levels
    if not 1 <= n_levels <= len(cbs):
        raise InputError(f"n_levels must be in 1..{len(cbs)}, got {n_levels}")
    residual = _check_dim(np.atleast_2d(x), cbs[0]).copy()
    codes = np.full((residual.shape[0], len(cbs)), -1, dtype=np.int64)
    for level, cb in enumerate(cbs[:n_levels]):
        idx = nearest(residual, cb.centroids)
        codes[:, level] = idx
        residual -= cb.centroids[idx]
    return codes


def rvq_decode_batch(codes: np.ndarray, cbs: Sequence[Codebook]) -> np.ndarray:
    codes = np.atleast_2d(codes)
    out = np.zeros((codes.shape[0], cbs[0].dim))
    for level, cb in enumerate(cbs[: codes.shape[1]]):
        col = codes[:, level]
        mask = col >= 0
        if (col[mask] >= cb.size).any():
            raise InputError(f"index out of range at level {level}")
        out[mask] += cb.centroids[col[mask]]
    return out


def rvq_quantize(v, cbs: Sequence[Codebook], n_levels: int | None = None, bypass: bool = False) -> np.ndarray:
    """Quantize-then-decode; ``bypass`` returns ``v`` untouched (no-quantization training branch)."""
    if bypass:
        return np.asarray(v, dtype=np.float64).copy()
    return rvq_decode(rvq_encode(v, cbs, n_levels), cbs)


def split_rvq_encode(v, q: SplitRvq) -> tuple[int, QuantizedFrame]:
    v = _check_dim(v, q.semantic)
    sem_idx, sem_residual = vq_encode(v, q.semantic)
    acoustic_in = sem_residual if q.acoustic_input == "residual" else v
    if not q.acoustic:
        return sem_idx, QuantizedFrame(())
    return sem_idx, rvq_encode(acoustic_in, q.acoustic)


def split_rvq_decode(semantic_index: int, acoustic: QuantizedFrame, q: SplitRvq) -> np.ndarray:
    if not 0 <= semantic_index < q.semantic.size:
        raise InputError(f"semantic index {semantic_index} out of range")
    out = q.semantic.centroids[semantic_index].copy()
    if q.acoustic:
        out += rvq_decode(acoustic, q.acoustic)
    return out


def kmeans(data: np.ndarray, k: int, iters: int = 20, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm seeded from ``k`` distinct data points; empty clusters keep their centroid."""
    rng = np.random.default_rng(seed)
    data = np.asarray(data, dtype=np.float64)
    centroids = data[rng.choice(data.shape[0], size=k, replace=False)].copy()
    for _ in range(iters):
        assign = nearest(data, centroids)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, data)
        counts = np.bincount(assign, minlength=k)
        filled = counts > 0
        new = centroids.copy()
        new[filled] = sums[filled] / counts[filled, None]
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids


def learn_codebooks(data, cfg: RvqConfig) -> list[Codebook]:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise InputError("training data must be (N, D)")
    if data.shape[0] < cfg.codebook_size:
        raise InputError(f"need at least {cfg.codebook_size} vectors, got {data.shape[0]}")
    residual = data.copy()
    books = []
    for level in range(cfg.levels):
        cb = Codebook(kmeans(residual, cfg.codebook_size, cfg.kmeans_iters, seed=cfg.seed + level))
        residual -= cb.centroids[nearest(residual, cb.centroids)]
        books.append(cb)
    return books


def learn_split_rvq(data, cfg: RvqConfig) -> SplitRvq:
    """Semantic VQ on the data, then a (levels-1)-deep RVQ on the semantic residual."""
    data = np.asarray(data, dtype=np.float64)
    if cfg.levels < 2:
        raise InputError("split RVQ needs at least 2 levels")
    sem = learn_codebooks(data, RvqConfig(1, cfg.codebook_size, data.shape[1], cfg.frame_rate_hz, cfg.kmeans_iters, cfg.seed))[0]
    residual = data - sem.centroids[nearest(data, sem.centroids)]
    rest = learn_codebooks(
        residual,
        RvqConfig(cfg.levels - 1, cfg.codebook_size, data.shape[1], cfg.frame_rate_hz, cfg.kmeans_iters, cfg.seed + 1),
    )
    return SplitRvq(sem, tuple(rest))


def bitrate_bps(cfg: RvqConfig) -> int | float:
    """``Q * log2(N_A) * frame_rate``; exact for power-of-two codebooks."""
    n = cfg.codebook_size
    if n & (n - 1) == 0:
        bits = Fraction(n.bit_length() - 1) * cfg.levels * Fraction(cfg.frame_rate_hz)
        return int(bits) if bits.denominator == 1 else float(bits)
    return cfg.levels * math.log2(n) * cfg.frame_rate_hz


def codebooks_to_bytes(cbs: Sequence[Codebook]) -> bytes:
    if not cbs:
        raise InputError("no codebooks to serialize")
    sizes = {(cb.size, cb.dim) for cb in cbs}
    if len(sizes) != 1:
        raise InputError("all codebooks must share (N_A, D) for the flat format")
    n, d = sizes.pop()
    buf = io.BytesIO()
    buf.write(_CB_MAGIC)
    buf.write(struct.pack("<IIII", _CB_VERSION, len(cbs), n, d))
    for cb in cbs:
        buf.write(cb.centroids.astype("<f4").tobytes())
    return buf.getvalue()


def codebooks_from_bytes(data: bytes) -> list[Codebook]:
    if data[:4] != _CB_MAGIC:
        raise InputError("not a codebook file (bad magic)")
    version, q, n, d = struct.unpack_from("<IIII", data, 4)
    if version != _CB_VERSION:
        raise InputError(f"unsupported codebook version {version}")
    expected = 20 + 4 * q * n * d
    if len(data) < expected:
        raise InputError(f"truncated codebook file: {len(data)} < {expected} bytes")
    flat = np.frombuffer(data, dtype="<f4", count=q * n * d, offset=20).astype(np.float64)
    return [Codebook(block) for block in flat.reshape(q, n, d)]
