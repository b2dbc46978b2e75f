"""Log-mel spectrogram at 40 frames per second, 64 bands over 200-3000 Hz."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError

N_BANDS = 64
FRAME_RATE = 40
FMIN, FMAX = 200.0, 3000.0
N_FFT = 1024
LOG_FLOOR = 1e-10
SUPPORTED_RATES = (16000, 24000)


@dataclass
class MelSpec:
    values: np.ndarray  # (frames, 64) log magnitudes
    sample_rate: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def band_edges_hz(n_bands: int = N_BANDS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """``n_bands + 2`` points equally spaced on the mel scale; band i peaks at point i+1."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))


def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_bands: int = N_BANDS) -> np.ndarray:
    """Triangular filters, shape (n_bands, n_fft // 2 + 1)."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = band_edges_hz(n_bands)
    fb = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_spectrogram(waveform, sample_rate: int) -> MelSpec:
    if sample_rate not in SUPPORTED_RATES:
        raise InputError(f"unsupported sample rate {sample_rate}; expected one of {SUPPORTED_RATES}")
    x = np.asarray(waveform, dtype=np.float64).ravel()
    if x.size == 0:
        raise InputError("empty waveform")
    hop = sample_rate // FRAME_RATE
    n_frames = x.size // hop
    padded = np.zeros(n_frames * hop + N_FFT)
    padded[: x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::hop][:n_frames]
    mag = np.abs(np.fft.rfft(frames * np.hanning(N_FFT), axis=-1))
    mel = mag @ mel_filterbank(sample_rate).T
    return MelSpec(np.log(np.maximum(mel, LOG_FLOOR)), sample_rate)
