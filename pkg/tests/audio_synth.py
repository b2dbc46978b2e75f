"""Synthetic audio: random tone sequences, and corpora with a planted shared segment."""

import numpy as np

from duplexkit.fingerprint import fingerprint, pack_signatures

SR = 16000
HOP = SR // 40


def tones(rng, seconds, sr=SR):
    n = int(seconds * sr)
    x = np.zeros(n)
    t = 0
    while t < n:
        length = int(rng.uniform(0.05, 0.25) * sr)
        seg = np.arange(min(length, n - t))
        x[t : t + seg.size] = np.sin(2 * np.pi * rng.uniform(220, 2900) * seg / sr) * rng.uniform(0.2, 1.0)
        t += length
    return x + 0.01 * rng.standard_normal(n)


def planted_corpus(n_clips=100, n_planted=12, clip_s=30.0, segment_s=16.0, seed=0):
    """Returns (corpus [(id, (keys, anchors))], planted ids, waveforms by id)."""
    rng = np.random.default_rng(seed)
    segment = tones(rng, segment_s)
    planted_idx = set(rng.choice(n_clips, size=n_planted, replace=False).tolist())
    corpus, waves, planted = [], {}, set()
    for i in range(n_clips):
        x = tones(rng, clip_s)
        aid = f"clip{i:03d}"
        if i in planted_idx:
            frames = int((clip_s - segment_s) * 40)
            off = int(rng.integers(0, frames)) * HOP
            x[off : off + segment.size] = segment
            planted.add(aid)
        waves[aid] = x
        corpus.append((aid, pack_signatures(fingerprint(x, SR))))
    return corpus, planted, waves
