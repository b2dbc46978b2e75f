"""Streaming inference over a step-wise model: full-duplex dialogue, delayed-text ASR and TTS.

The engine drives any object exposing the streaming interface of
:class:`duplexkit.rqt.RQTransformer`:

* ``cardinalities`` -- N_k per stream
* ``new_cache()`` -- fresh per-session temporal state
* ``temporal_step(cache, prev_row) -> z``
* ``step_logits(z, partial_row) -> logits`` for stream ``len(partial_row)``
* ``forward_logits(grid) -> [ (S, N_k) ]`` teacher-forced offline pass

Grid ids follow :mod:`duplexkit.layout`: 0 is the initial token and a sampled
logit index ``i`` becomes token id ``i + 1``.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .alignment import SpecialTokens
from .errors import InputError, StateError
from .layout import FRAME_MS, FRAME_RATE_HZ, INITIAL_ID, joint_pattern
from .rqt import sample_token

SAMPLED, FORCED, CONTROLLED = 0, 1, 2


class Mode(str, enum.Enum):
    DIALOGUE = "dialogue"
    ASR = "asr"
    TTS = "tts"


@dataclass
class PadController:
    """Adds ``bonus`` to PAD/EPAD logits while the session's PAD fraction is below target."""

    target_rate: float = 0.65
    bonus: float = 2.0
    pad_count: int = 0
    total: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_rate <= 1.0:
            raise InputError("target_rate must be in [0, 1]")
        if self.bonus < 0:
            raise InputError("bonus must be >= 0")

    @property
    def running_fraction(self) -> float:
        return self.pad_count / self.total if self.total else 0.0

    def adjust(self, logits: np.ndarray, sp: SpecialTokens) -> np.ndarray:
        if self.bonus == 0 or self.running_fraction >= self.target_rate:
            return logits
        out = np.array(logits, dtype=np.float64)
        for tok in (sp.pad_id, sp.epad_id):
            if 1 <= tok <= out.size:
                out[tok - 1] += self.bonus
        return out

    def observe(self, token: int, sp: SpecialTokens):
        self.total += 1
        self.pad_count += token == sp.pad_id


@dataclass
class EngineConfig:
    q_levels: int
    acoustic_delay: int = 1
    text_delay_steps: int = 25
    temperature: float = 0.8
    text_temperature: float | None = None
    seed: int = 0
    special: SpecialTokens = field(default_factory=SpecialTokens)
    pad_target: float = 0.65
    pad_bonus: float = 2.0
    tts_tail_s: float = 1.0

    def __post_init__(self):
        if self.q_levels < 1:
            raise InputError("q_levels must be >= 1")
        if self.acoustic_delay < 0 or self.text_delay_steps < 0:
            raise InputError("delays must be >= 0")


@dataclass
class DialogueStep:
    text: int
    model_row: list[int]
    frame: list[int] | None  # model codec frame completed at this step (time s - tau)


def mode_delays(mode: Mode, cfg: EngineConfig) -> tuple[int, ...]:
    Q, tau, D = cfg.q_levels, cfg.acoustic_delay, cfg.text_delay_steps
    if mode is Mode.DIALOGUE:
        return joint_pattern(Q, tau).delays
    if mode is Mode.ASR:
        return (D, 0) + (tau,) * (Q - 1)
    return (0, D) + (D + tau,) * (Q - 1)


class DuplexEngine:
    """One inference session. Not thread-safe; run one engine per session."""

    def __init__(self, model, mode: Mode | str, cfg: EngineConfig):
        self.model = model
        self.mode = Mode(mode)
        self.cfg = cfg
        self.sp = cfg.special
        self.delays = mode_delays(self.mode, cfg)
        self.K = len(self.delays)
        cards = tuple(model.cardinalities)
        if len(cards) != self.K:
            raise InputError(f"{self.mode.value} mode needs a {self.K}-stream model, got {len(cards)}")
        self.cardinalities = cards
        self.cache = model.new_cache()
        self.step_counter = 0
        self.history: list[list[int]] = []
        self.kinds: list[list[int]] = []
        self.log: list[dict] = []
        self._inputs: list[list[int]] = []
        self._force_epad = False
        # ASR bookkeeping
        self.emitted: list[tuple[int, int]] = []
        # TTS bookkeeping
        self.controller = PadController(cfg.pad_target, cfg.pad_bonus)
        self.pending: deque[int] = deque()
        self.consumed: list[tuple[int, int]] = []
        self.words_consumed = 0
        self.queue_exhausted = False
        self._tail = 0

    # -- helpers -------------------------------------------------------------

    def _temperature(self, k: int) -> float:
        if k == 0 and self.cfg.text_temperature is not None:
            return self.cfg.text_temperature
        return self.cfg.temperature

    def _check_frame(self, frame: Sequence[int], first_stream: int) -> list[int]:
        frame = [int(t) for t in frame]
        if len(frame) != self.cfg.q_levels:
            raise InputError(f"expected {self.cfg.q_levels} audio tokens, got {len(frame)}")
        for q, tok in enumerate(frame):
            n = self.cardinalities[first_stream + q]
            if not 1 <= tok <= n:
                raise InputError(f"audio token {tok} at level {q} outside 1..{n}")
        return frame

    def _delayed_audio(self, first_stream: int) -> dict[int, int]:
        """Forced entries for one speaker's codec frames, applying the acoustic delay."""
        s = self.step_counter
        forced = {first_stream: self._inputs[s][0]}
        for q in range(1, self.cfg.q_levels):
            k = first_stream + q
            t = s - (self.delays[k] - self.delays[first_stream])
            forced[k] = self._inputs[t][q] if t >= 0 and s >= self.delays[k] else INITIAL_ID
        return forced

    def _advance(self, forced: dict[int, int], text_rule=None) -> list[int]:
        s = self.step_counter
        prev = self.history[-1] if self.history else [INITIAL_ID] * self.K
        z = self.model.temporal_step(self.cache, prev)
        row: list[int] = []
        kinds: list[int] = []
        for k in range(self.K):
            if k in forced:
                row.append(int(forced[k]))
                kinds.append(FORCED)
            elif s < self.delays[k]:
                row.append(INITIAL_ID)
                kinds.append(FORCED)
            else:
                logits = self.model.step_logits(z, row)
                if k == 0 and text_rule is not None:
                    tok, kind = text_rule(logits)
                else:
                    tok, kind = sample_token(logits, self._temperature(k), [self.cfg.seed, s, k]) + 1, SAMPLED
                row.append(tok)
                kinds.append(kind)
        self.history.append(row)
        self.kinds.append(kinds)
        self.step_counter += 1
        return row

    def _record(self, row: list[int], events: list[dict]):
        kinds = self.kinds[-1]
        self.log.append(
            {
                "step": self.step_counter - 1,
                "mode": self.mode.value,
                "forced": [[k, row[k]] for k in range(self.K) if kinds[k] == FORCED],
                "sampled": [[k, row[k]] for k in range(self.K) if kinds[k] != FORCED],
                "events": events,
            }
        )

    def _require(self, mode: Mode):
        if self.mode is not mode:
            raise StateError(f"operation requires {mode.value} mode, engine is in {self.mode.value} mode")

    # -- dialogue ------------------------------------------------------------

    def force_epad(self) -> "DuplexEngine":
        self._require(Mode.DIALOGUE)
        self._force_epad = True
        return self

    def step_dialogue(self, user_frame: Sequence[int]) -> DialogueStep:
        self._require(Mode.DIALOGUE)
        Q = self.cfg.q_levels
        self._inputs.append(self._check_frame(user_frame, Q + 1))
        forced = self._delayed_audio(Q + 1)
        events = []
        if self._force_epad:
            forced[0] = self.sp.epad_id
            self._force_epad = False
            events.append({"type": "force_epad"})
        row = self._advance(forced)
        self._record(row, events)
        s = self.step_counter - 1
        frame = None
        t = s - self.cfg.acoustic_delay
        if t >= 0:
            frame = [self.history[t][1]] + row[2 : Q + 1]
        return DialogueStep(row[0], row[1 : Q + 1], frame)

    # -- ASR -----------------------------------------------------------------

    def step_asr(self, audio_frame: Sequence[int]) -> int | None:
        self._require(Mode.ASR)
        self._inputs.append(self._check_frame(audio_frame, 1))
        forced = self._delayed_audio(1)
        row = self._advance(forced)
        s = self.step_counter - 1
        events = []
        token = None
        if s >= self.delays[0]:
            token = row[0]
            self.emitted.append((s, token))
            events.append({"type": "text", "token": token, "audio_step": s - self.delays[0]})
        self._record(row, events)
        return token

    def asr_words(self) -> list[dict]:
        """Word-token runs of the emitted text with start times on the 80 ms grid."""
        words: list[dict] = []
        current = None
        for s, tok in self.emitted:
            if self.sp.is_special(tok):
                current = None
                continue
            if current is None:
                current = {"tokens": [], "start_ms": (s - self.delays[0]) * FRAME_MS}
                words.append(current)
            current["tokens"].append(tok)
        return words

    # -- TTS -----------------------------------------------------------------

    @property
    def finished(self) -> bool:
        if self.mode is not Mode.TTS:
            return False
        return self.queue_exhausted and self._tail >= math.ceil(self.cfg.tts_tail_s * FRAME_RATE_HZ)

    def step_tts(self, word_queue: deque) -> list[int]:
        """Advance one step; returns the audio column (streams 2..K) of this row."""
        self._require(Mode.TTS)
        events: list[dict] = []
        s = self.step_counter

        def text_rule(logits):
            if self.pending:
                tok = self.pending.popleft()
            else:
                adjusted = self.controller.adjust(logits, self.sp)
                tok = sample_token(adjusted, self._temperature(0), [self.cfg.seed, s, 0]) + 1
                if not self.sp.is_special(tok):
                    if word_queue:
                        word = [int(t) for t in word_queue.popleft()]
                        if not word or any(self.sp.is_special(t) for t in word):
                            raise InputError(f"queued word {self.words_consumed} is empty or holds a special token")
                        self.pending.extend(word)
                        tok = self.pending.popleft()
                        self.consumed.append((self.words_consumed, s))
                        events.append({"type": "word_consumed", "word": self.words_consumed, "step": s})
                        self.words_consumed += 1
                    else:
                        tok = self.sp.pad_id
                        if not self.queue_exhausted:
                            events.append({"type": "queue_exhausted"})
                        self.queue_exhausted = True
            if not word_queue and not self.pending and not self.queue_exhausted:
                self.queue_exhausted = True
                events.append({"type": "queue_exhausted"})
            self.controller.observe(tok, self.sp)
            return tok, CONTROLLED

        row = self._advance({}, text_rule)
        if self.queue_exhausted and row[0] == self.sp.pad_id and not self.pending:
            self._tail += 1
        self._record(row, events)
        return row[1:]

    def tts_text(self) -> list[int]:
        return [row[0] for row in self.history]

    def word_times_ms(self) -> list[tuple[int, int]]:
        return [(w, s * FRAME_MS) for w, s in self.consumed]

    # -- inspection ----------------------------------------------------------

    @property
    def grid(self) -> np.ndarray:
        return np.asarray(self.history, dtype=np.int64).reshape(len(self.history), self.K)

    @property
    def kind_mask(self) -> np.ndarray:
        return np.asarray(self.kinds, dtype=np.int64).reshape(len(self.kinds), self.K)

    def log_jsonl(self) -> str:
        return "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.log)


def offline_replay(model, grid: np.ndarray, kinds: np.ndarray, cfg: EngineConfig) -> np.ndarray:
    """Re-derive every sampled cell from one teacher-forced pass; forced cells are copied.

    Controlled cells (TTS text) are copied too: their value depends on the
    word queue rather than on the model alone.
    """
    grid = np.asarray(grid, dtype=np.int64)
    out = grid.copy()
    if grid.shape[0] == 0:
        return out
    logits = model.forward_logits(grid)
    for s in range(grid.shape[0]):
        for k in range(grid.shape[1]):
            if kinds[s, k] == SAMPLED:
                temp = cfg.text_temperature if (k == 0 and cfg.text_temperature is not None) else cfg.temperature
                out[s, k] = sample_token(logits[k][s], temp, [cfg.seed, s, k]) + 1
    return out


def run_asr(model, frames: Iterable[Sequence[int]], cfg: EngineConfig) -> DuplexEngine:
    """Feed every frame, then flush the text lag with repeats of the last frame's semantic token."""
    eng = DuplexEngine(model, Mode.ASR, cfg)
    frames = [list(f) for f in frames]
    for f in frames:
        eng.step_asr(f)
    if frames:
        for _ in range(cfg.text_delay_steps):
            eng.step_asr(frames[-1])
    return eng


def run_tts(model, words: Iterable[Sequence[int]], cfg: EngineConfig, max_steps: int = 10_000) -> DuplexEngine:
    """Consume the whole queue, the PAD tail, then flush the audio lag."""
    eng = DuplexEngine(model, Mode.TTS, cfg)
    queue = deque(list(w) for w in words)
    while not eng.finished and eng.step_counter < max_steps:
        eng.step_tts(queue)
    for _ in range(cfg.text_delay_steps + cfg.acoustic_delay):
        if eng.step_counter >= max_steps:
            break
        eng.step_tts(queue)
    return eng
