"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class LatencyRequest(BaseModel):
    pattern: list[int] = Field(min_length=1)
    frame_ms: int = Field(80, ge=1)


class LatencyResponse(BaseModel):
    pattern: list[int]
    latency_ms: int


class WordIn(BaseModel):
    word: str = ""
    tokens: list[int] = Field(min_length=1)
    start: float = Field(ge=0)


class AlignRequest(BaseModel):
    words: list[WordIn]
    frames: int = Field(ge=1)
    frame_rate_hz: float = Field(12.5, gt=0)
    pad_id: int = Field(1, ge=1)
    epad_id: int = Field(2, ge=1)


class AlignResponse(BaseModel):
    tokens: list[int]
    pad_fraction: float


class EntropyRequest(BaseModel):
    grid: list[list[int]] = Field(description="(S, K) rows; column 0 text, then audio")
    n_audio: Optional[int] = Field(None, ge=1)
    context: int = Field(64, ge=1)
    window: int = Field(64, ge=1)
    eta_flat: float = 1e-3
    eta_audio_silence: float = 2.0
    eta_gibberish: float = 3.5
    eta_noise: float = 0.6


class EntropyResponse(BaseModel):
    windows: int
    labels: list[str]
    percentages: dict[str, float]


class AudioIn(BaseModel):
    """Either raw samples or precomputed signature keys with anchors."""

    samples: Optional[list[float]] = None
    sample_rate: Optional[int] = None
    keys: Optional[list[int]] = None
    anchors: Optional[list[int]] = None

    @model_validator(mode="after")
    def _one_source(self):
        has_audio = self.samples is not None
        has_sigs = self.keys is not None
        if has_audio == has_sigs:
            raise ValueError("give either samples+sample_rate or keys+anchors")
        if has_audio and self.sample_rate is None:
            raise ValueError("sample_rate is required with samples")
        if has_sigs and (self.anchors is None or len(self.anchors) != len(self.keys)):
            raise ValueError("anchors must match keys one to one")
        return self


class IndexRequest(AudioIn):
    audio_id: str = Field(min_length=1)


class IndexResponse(BaseModel):
    audio_id: str
    signatures: int
    indexed: int


class QueryRequest(AudioIn):
    tolerance: Literal[0, 1] = 0
    top: int = Field(10, ge=1)


class MatchOut(BaseModel):
    rank: int
    audio_id: str
    offset: int
    votes: int


class QueryResponse(BaseModel):
    results: list[MatchOut]


class SessionCreate(BaseModel):
    mode: Literal["dialogue", "asr", "tts"]
    acoustic_delay: int = Field(1, ge=0)
    text_delay_s: float = Field(2.0, ge=0)
    temperature: float = Field(0.8, ge=0)
    text_temperature: Optional[float] = Field(None, ge=0)
    seed: int = 0
    pad_id: int = Field(1, ge=1)
    epad_id: int = Field(2, ge=1)
    pad_target: float = Field(0.65, ge=0, le=1)
    pad_bonus: float = Field(2.0, ge=0)


class SessionInfo(BaseModel):
    session_id: str
    mode: str
    delays: list[int]
    steps: int


class StepRequest(BaseModel):
    frame: Optional[list[int]] = Field(None, description="audio tokens for dialogue/asr steps")
    words: list[list[int]] = Field(default_factory=list, description="words appended to the TTS queue")
    force_epad: bool = False


class StepResponse(BaseModel):
    step: int
    row: list[int]
    text: Optional[int] = None
    frame: Optional[list[int]] = None
    finished: bool = False
