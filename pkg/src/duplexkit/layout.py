"""Delay patterns, the joint multi-stream grid and latency arithmetic.

Grids are ``(S, K)`` integer arrays. Row ``i`` holds step ``s = i + 1``; the
all-zero row ``V_0`` is implicit and is what the temporal model sees before
the first step. Token id ``0`` is reserved as the initial token of every
stream, so real vocabulary ids live in ``1..N_k``.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

INITIAL_ID = 0
FRAME_RATE_HZ = 12.5
FRAME_MS = 80

_GRID_MAGIC = b"TGRD"
_GRID_VERSION = 1


@dataclass(frozen=True)
class DelayPattern:
    delays: tuple[int, ...]
    text_delay_steps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "delays", tuple(int(d) for d in self.delays))
        if not self.delays:
            raise InputError("delay pattern is empty")
        if any(d < 0 for d in self.delays):
            raise InputError(f"delays must be nonnegative, got {list(self.delays)}")

    @property
    def max_delay(self) -> int:
        return max(self.delays)

    @classmethod
    def parse(cls, text: str) -> "DelayPattern":
        try:
            return cls(tuple(int(x) for x in text.split(",") if x.strip()))
        except ValueError as exc:
            raise InputError(f"bad delay pattern {text!r}") from exc


@dataclass(frozen=True)
class StreamSpec:
    q_levels: int
    text_present: bool = True
    speakers: int = 2
    audio_cardinality: int = 2048
    text_cardinality: int = 32000
    frame_ms: int = FRAME_MS

    def __post_init__(self):
        if self.q_levels < 1:
            raise InputError("q_levels must be >= 1")
        if self.speakers not in (1, 2):
            raise InputError("speakers must be 1 or 2")
        if min(self.audio_cardinality, self.text_cardinality) < 2:
            raise InputError("cardinalities must be >= 2")

    @property
    def num_streams(self) -> int:
        return self.speakers * self.q_levels + int(self.text_present)

    @property
    def cardinalities(self) -> list[int]:
        text = [self.text_cardinality] if self.text_present else []
        return text + [self.audio_cardinality] * (self.speakers * self.q_levels)

    def generated_tokens_per_step(self) -> int:
        # Every stream in the joint grid is materialized at every step.
        return self.num_streams


@dataclass
class TokenGrid:
    tokens: np.ndarray
    cardinalities: list[int] = field(default_factory=list)
    initial_id: int = INITIAL_ID

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise InputError(f"grid must be 2-D, got shape {self.tokens.shape}")
        if not self.cardinalities:
            top = self.tokens.max(axis=0) if self.tokens.size else np.zeros(self.K, np.int64)
            self.cardinalities = [max(2, int(t)) for t in top]
        self.cardinalities = [int(n) for n in self.cardinalities]
        if len(self.cardinalities) != self.K:
            raise InputError("one cardinality per stream is required")
        if self.tokens.size:
            if self.tokens.min() < 0:
                raise InputError("negative token id in grid")
            over = self.tokens > np.asarray(self.cardinalities)[None, :]
            if over.any():
                s, k = map(int, np.argwhere(over)[0])
                raise InputError(
                    f"token {int(self.tokens[s, k])} at step {s} exceeds N_{k}={self.cardinalities[k]}"
                )

    @property
    def S(self) -> int:
        return self.tokens.shape[0]

    @property
    def K(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.tokens.shape == other.tokens.shape
            and bool(np.array_equal(self.tokens, other.tokens))
            and self.cardinalities == other.cardinalities
            and self.initial_id == other.initial_id
        )


def _as_streams(streams) -> np.ndarray:
    """Accept a (K, T) array or a list of K sequences; reject ragged input."""
    if isinstance(streams, np.ndarray):
        arr = streams
    else:
        lengths = {len(s) for s in streams}
        if len(lengths) > 1:
            raise InputError(f"ragged stream lengths: {sorted(lengths)}")
        arr = np.asarray([list(s) for s in streams], dtype=np.int64)
    if arr.ndim != 2:
        raise InputError("streams must be a list of equal-length sequences")
    return arr.astype(np.int64)


def apply_delay(streams, pattern: DelayPattern, cardinalities: Sequence[int] | None = None) -> TokenGrid:
    """Stagger each stream by its delay; padded cells hold the initial token.

    ``streams`` is ``(K, T)``. The output has ``S = T + max_delay`` rows so every
    input token stays representable.
    """
    arr = _as_streams(streams)
    K, T = arr.shape
    if len(pattern.delays) != K:
        raise InputError(f"pattern has {len(pattern.delays)} delays for {K} streams")
    if arr.size and arr.min() <= INITIAL_ID:
        raise InputError("stream tokens must be >= 1 (0 is the reserved initial token)")
    S = T + pattern.max_delay
    grid = np.full((S, K), INITIAL_ID, dtype=np.int64)
    for k, tau in enumerate(pattern.delays):
        grid[tau : tau + T, k] = arr[k]
    return TokenGrid(grid, list(cardinalities) if cardinalities is not None else [])


def remove_delay(grid: TokenGrid, pattern: DelayPattern) -> np.ndarray:
    """Inverse of :func:`apply_delay`; returns ``(K, T)`` with ``T = S - max_delay``."""
    if len(pattern.delays) != grid.K:
        raise InputError(f"pattern has {len(pattern.delays)} delays for {grid.K} streams")
    T = max(grid.S - pattern.max_delay, 0)
    out = np.empty((grid.K, T), dtype=np.int64)
    for k, tau in enumerate(pattern.delays):
        col = grid.tokens[:, k]
        head, body, tail = col[:tau], col[tau : tau + T], col[tau + T :]
        if (head != grid.initial_id).any() or (tail != grid.initial_id).any():
            raise InputError(f"stream {k}: padding does not match delay {tau}")
        if (body == grid.initial_id).any():
            raise InputError(f"stream {k}: initial token inside data region for delay {tau}")
        out[k] = body
    return out


def joint_pattern(q_levels: int, acoustic_delay: int, text_present: bool = True, speakers: int = 2) -> DelayPattern:
    speaker = [0] + [acoustic_delay] * (q_levels - 1)
    return DelayPattern(tuple(([0] if text_present else []) + speaker * speakers))


def joint_layout(
    text: Sequence[int] | None,
    own: np.ndarray,
    user: np.ndarray | None,
    acoustic_delay: int,
    text_cardinality: int = 32000,
    audio_cardinality: int = 2048,
) -> TokenGrid:
    """Build the joint grid: text, own semantic+acoustic, other semantic+acoustic.

    ``own`` and ``user`` are ``(T, Q)`` codec frames with ids in ``1..N_A``.
    Pass ``text=None`` to drop the text stream, ``user=None`` for one speaker.
    """
    own = np.asarray(own, dtype=np.int64)
    if own.ndim != 2:
        raise InputError("audio streams must be (T, Q)")
    T, Q = own.shape
    parts = []
    if text is not None:
        text_arr = np.asarray(text, dtype=np.int64)
        if text_arr.shape != (T,):
            raise InputError(f"text stream length {text_arr.shape[0]} != audio length {T}")
        parts.append(text_arr[None, :])
    parts.append(own.T)
    if user is not None:
        user = np.asarray(user, dtype=np.int64)
        if user.shape != (T, Q):
            raise InputError(f"user streams shape {user.shape} != {(T, Q)}")
        parts.append(user.T)
    streams = np.concatenate(parts, axis=0)
    pattern = joint_pattern(Q, acoustic_delay, text is not None, 2 if user is not None else 1)
    spec = StreamSpec(
        Q, text is not None, 2 if user is not None else 1, audio_cardinality, text_cardinality
    )
    return apply_delay(streams, pattern, spec.cardinalities)


def flatten(grid: TokenGrid | np.ndarray) -> np.ndarray:
    tokens = grid.tokens if isinstance(grid, TokenGrid) else np.asarray(grid)
    return tokens.reshape(-1).copy()


def unflatten(seq: Sequence[int], K: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if K < 1 or seq.size % K:
        raise InputError(f"sequence of length {seq.size} is not a multiple of K={K}")
    return seq.reshape(-1, K).copy()


def latency_ms(pattern: DelayPattern | Sequence[int], frame_ms: int = FRAME_MS) -> int:
    delays = pattern.delays if isinstance(pattern, DelayPattern) else tuple(pattern)
    return (max(delays) + 1) * frame_ms


def text_delay_steps(seconds: float, frame_rate_hz: float = FRAME_RATE_HZ) -> int:
    """Signed delay in whole steps, truncated toward zero (0.6 s -> 7 at 12.5 Hz)."""
    steps = math.floor(abs(seconds) * frame_rate_hz + 1e-9)
    return steps if seconds >= 0 else -steps


# -- serialization -----------------------------------------------------------

def grid_to_jsonl(grid: TokenGrid) -> str:
    header = {"S": grid.S, "K": grid.K, "cardinalities": grid.cardinalities, "initial_id": grid.initial_id}
    lines = [json.dumps(header)]
    lines.extend(json.dumps({"step": i + 1, "tokens": row.tolist()}) for i, row in enumerate(grid.tokens))
    return "\n".join(lines) + "\n"


def grid_from_jsonl(text: str | Iterable[str]) -> TokenGrid:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise InputError("empty grid file")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln)["tokens"] for ln in lines[1:]]
        tokens = np.asarray(rows, dtype=np.int64).reshape(len(rows), header["K"])
        cards = header["cardinalities"]
        initial = header.get("initial_id", INITIAL_ID)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise InputError(f"malformed grid JSONL: {exc}") from exc
    return TokenGrid(tokens, cards, initial)


def grid_to_bytes(grid: TokenGrid) -> bytes:
    if grid.tokens.size and grid.tokens.max() > 0xFFFF:
        raise InputError("token ids above 65535 do not fit the 16-bit grid format")
    buf = io.BytesIO()
    buf.write(_GRID_MAGIC)
    buf.write(struct.pack("<III", _GRID_VERSION, grid.S, grid.K))
    buf.write(struct.pack(f"<{grid.K}I", *grid.cardinalities))
    buf.write(grid.tokens.astype("<u2").tobytes())
    return buf.getvalue()


def grid_from_bytes(data: bytes) -> TokenGrid:
    if data[:4] != _GRID_MAGIC:
        raise InputError("not a token grid file (bad magic)")
    try:
        version, S, K = struct.unpack_from("<III", data, 4)
        if version != _GRID_VERSION:
            raise InputError(f"unsupported grid version {version}")
        cards = list(struct.unpack_from(f"<{K}I", data, 16))
        offset = 16 + 4 * K
        tokens = np.frombuffer(data, dtype="<u2", count=S * K, offset=offset)
    except (struct.error, ValueError) as exc:
        raise InputError(f"truncated grid file: {exc}") from exc
    return TokenGrid(tokens.reshape(S, K).astype(np.int64), cards)
