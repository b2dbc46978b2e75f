"""Constellation-hash audio matching and corpus deduplication."""

from .audio_io import (
    fingerprint,
    fingerprint_file,
    load_signatures,
    read_wav,
    signatures_from_bytes,
    signatures_to_bytes,
    write_wav,
)
from .dedup import DEFAULT_MIN_MATCHES, DEFAULT_THRESHOLD, DuplicateSet, build_duplicate_set, is_duplicate
from .hashing import (
    Keypoint,
    Signature,
    extract_constellation,
    extract_signatures,
    pack_key,
    pack_signatures,
    tolerance_variants,
    unpack_key,
)
from .index import Match, SignatureIndex, hough_votes
from .mel import MelSpec, mel_filterbank, mel_spectrogram

__all__ = [
    "DEFAULT_MIN_MATCHES",
    "DEFAULT_THRESHOLD",
    "DuplicateSet",
    "Keypoint",
    "Match",
    "MelSpec",
    "Signature",
    "SignatureIndex",
    "build_duplicate_set",
    "extract_constellation",
    "extract_signatures",
    "fingerprint",
    "fingerprint_file",
    "hough_votes",
    "is_duplicate",
    "load_signatures",
    "mel_filterbank",
    "mel_spectrogram",
    "pack_key",
    "pack_signatures",
    "read_wav",
    "signatures_from_bytes",
    "signatures_to_bytes",
    "tolerance_variants",
    "unpack_key",
    "write_wav",
]
