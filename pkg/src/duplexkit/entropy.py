"""Sliding-window Shannon entropy of token streams and the artifact classifier built on it."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

_ZERO = 1e-12


class ArtifactLabel(str, enum.Enum):
    GIBBERISH = "Gibberish"
    NOISY_AUDIO = "NoisyAudio"
    BACKGROUND_NOISE = "BackgroundNoise"
    REPETITIVE_TEXT = "RepetitiveText"
    SILENCE = "Silence"
    NONE = "None"


# Report columns; silence is folded into "No artifacts".
REPORT_COLUMNS = (
    ("Gibberish audio", (ArtifactLabel.GIBBERISH,)),
    ("Noisy audio", (ArtifactLabel.NOISY_AUDIO,)),
    ("Background noise", (ArtifactLabel.BACKGROUND_NOISE,)),
    ("Repetitive text", (ArtifactLabel.REPETITIVE_TEXT,)),
    ("No artifacts", (ArtifactLabel.NONE, ArtifactLabel.SILENCE)),
)


@dataclass(frozen=True)
class EntropyParams:
    context: int = 64
    window: int = 64
    eta_flat: float = 1e-3
    eta_audio_silence: float = 2.0
    eta_gibberish: float = 3.5
    eta_noise: float = 0.6

    def __post_init__(self):
        if self.context < 1 or self.window < 1:
            raise InputError("context and window must be >= 1")
        if min(self.eta_flat, self.eta_audio_silence, self.eta_gibberish, self.eta_noise) <= 0:
            raise InputError("thresholds must be positive")


def windowed_entropy(tokens, context: int = 64) -> np.ndarray:
    """Entropy in bits of ``tokens[s-C:s]`` for ``s = C..N`` (length ``N - C + 1``)."""
    x = np.asarray(tokens).ravel()
    if context < 1:
        raise InputError("context must be >= 1")
    if x.size < context:
        raise InputError(f"need at least {context} tokens, got {x.size}")
    _, codes = np.unique(x, return_inverse=True)
    codes = codes.ravel()
    counts = np.bincount(codes[:context], minlength=codes.max() + 1).astype(np.int64)
    out = np.empty(x.size - context + 1)

    def h(c):
        p = c[c > 0] / context
        return float(-(p * np.log2(p)).sum()) + 0.0

    out[0] = h(counts)
    for i in range(1, out.size):
        counts[codes[i - 1]] -= 1
        counts[codes[i - 1 + context]] += 1
        out[i] = h(counts)
    return out


def _slope(y: np.ndarray) -> float:
    if y.size < 2:
        return 0.0
    t = np.arange(y.size, dtype=np.float64)
    t -= t.mean()
    return float((t * (y - y.mean())).sum() / (t * t).sum())


def classify_window(h_text, h_audio, p: EntropyParams = EntropyParams()) -> ArtifactLabel:
    """Label one window from its text entropies (omega,) and audio entropies (codebooks, omega)."""
    h_text = np.asarray(h_text, dtype=np.float64).ravel()
    h_audio = np.atleast_2d(np.asarray(h_audio, dtype=np.float64))
    if h_audio.shape[1] != h_text.size:
        raise InputError(f"audio window length {h_audio.shape[1]} != text window length {h_text.size}")
    mean_text = float(h_text.mean())
    if mean_text > p.eta_gibberish:
        return ArtifactLabel.GIBBERISH
    if np.all(np.abs(h_text) <= _ZERO):
        if float(np.median(h_audio)) <= p.eta_audio_silence:
            return ArtifactLabel.SILENCE
        return ArtifactLabel.BACKGROUND_NOISE
    if abs(_slope(h_text)) < p.eta_flat and mean_text > 0:
        return ArtifactLabel.REPETITIVE_TEXT
    if float(np.std(h_audio.mean(axis=1))) > p.eta_noise:
        return ArtifactLabel.NOISY_AUDIO
    return ArtifactLabel.NONE


@dataclass
class ArtifactReport:
    labels: list[ArtifactLabel]
    percentages: dict[str, float]
    windows: int

    def to_dict(self) -> dict:
        return {
            "windows": self.windows,
            "labels": [label.value for label in self.labels],
            "percentages": self.percentages,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_table(self, name: str = "sample") -> str:
        headers = ["Model / Artifacts"] + [col for col, _ in REPORT_COLUMNS]
        cells = [name] + [f"{self.percentages[col]:.1f}" for col, _ in REPORT_COLUMNS]
        widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        line = lambda row: "  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
        return "\n".join([line(headers), "  ".join("-" * w for w in widths), line(cells)]) + "\n"


def entropy_spectrum(text, audio, context: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Text entropies (L,) and per-codebook audio entropies (Q, L)."""
    audio = np.asarray(audio)
    if audio.ndim != 2:
        raise InputError("audio must be (S, Q)")
    h_text = windowed_entropy(text, context)
    h_audio = np.stack([windowed_entropy(audio[:, q], context) for q in range(audio.shape[1])])
    return h_text, h_audio


def artifact_report(grid, n_audio: int | None = None, p: EntropyParams = EntropyParams()) -> ArtifactReport:
    """Classify non-overlapping windows of a grid whose column 0 is text and columns 1..Q audio."""
    tokens = np.asarray(getattr(grid, "tokens", grid))
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise InputError("grid must be (S, K) with a text stream and at least one audio stream")
    n_audio = tokens.shape[1] - 1 if n_audio is None else n_audio
    if not 1 <= n_audio <= tokens.shape[1] - 1:
        raise InputError(f"n_audio must be in 1..{tokens.shape[1] - 1}")
    if tokens.shape[0] < p.context + p.window - 1:
        raise InputError(
            f"grid of {tokens.shape[0]} steps is too short for context {p.context} and window {p.window}"
        )
    h_text, h_audio = entropy_spectrum(tokens[:, 0], tokens[:, 1 : 1 + n_audio], p.context)
    n_windows = h_text.size // p.window
    labels = []
    for w in range(n_windows):
        sl = slice(w * p.window, (w + 1) * p.window)
        labels.append(classify_window(h_text[sl], h_audio[:, sl], p))
    percentages = {
        col: 100.0 * sum(label in members for label in labels) / n_windows for col, members in REPORT_COLUMNS
    }
    return ArtifactReport(labels, percentages, n_windows)
