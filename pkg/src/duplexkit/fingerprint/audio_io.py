"""WAV ingestion and the binary signature file."""

from __future__ import annotations

import io
import struct
import wave
from pathlib import Path

import numpy as np

from ..errors import InputError
from .hashing import M_MAX, M_MIN, Signature, extract_constellation, extract_signatures, pack_signatures
from .mel import mel_spectrogram

_SIG_MAGIC = b"SIGF"
_SIG_VERSION = 1


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM WAV as float samples in [-1, 1]; multi-channel input is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise InputError(f"{path}: only 16-bit PCM is supported")
            n_channels, rate = w.getnchannels(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a readable WAV file ({exc})") from exc
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        x = x.reshape(-1, n_channels).mean(axis=1)
    return x, rate


def write_wav(path, samples, sample_rate: int):
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767 / 32768)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes((x * 32768.0).round().astype("<i2").tobytes())


def fingerprint(samples, sample_rate: int, m: int = M_MIN, M: int = M_MAX) -> list[Signature]:
    return extract_signatures(extract_constellation(mel_spectrogram(samples, sample_rate)), m, M)


def fingerprint_file(path, m: int = M_MIN, M: int = M_MAX) -> list[Signature]:
    x, rate = read_wav(path)
    return fingerprint(x, rate, m, M)


def signatures_to_bytes(sigs, m: int = M_MIN, M: int = M_MAX) -> bytes:
    keys, anchors = sigs if isinstance(sigs, tuple) else pack_signatures(list(sigs), m, M)
    buf = io.BytesIO()
    buf.write(_SIG_MAGIC)
    buf.write(struct.pack("<IIII", _SIG_VERSION, m, M, len(keys)))
    rec = np.empty(len(keys), dtype=[("key", "<u4"), ("anchor", "<u4")])
    rec["key"] = keys
    rec["anchor"] = anchors
    buf.write(rec.tobytes())
    return buf.getvalue()


def signatures_from_bytes(data: bytes) -> tuple[np.ndarray, np.ndarray, int, int]:
    """(keys, anchors, m, M) from a signature file."""
    if data[:4] != _SIG_MAGIC:
        raise InputError("not a signature file (bad magic)")
    version, m, M, count = struct.unpack_from("<IIII", data, 4)
    if version != _SIG_VERSION:
        raise InputError(f"unsupported signature file version {version}")
    if len(data) < 20 + 8 * count:
        raise InputError("truncated signature file")
    rec = np.frombuffer(data, dtype=[("key", "<u4"), ("anchor", "<u4")], count=count, offset=20)
    return rec["key"].astype(np.uint32), rec["anchor"].astype(np.int64), m, M


def load_signatures(path: Path | str):
    """Signatures from a ``.sig`` file, or computed from a WAV file."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == _SIG_MAGIC:
        keys, anchors, _, _ = signatures_from_bytes(data)
        return keys, anchors
    return pack_signatures(fingerprint_file(path))
