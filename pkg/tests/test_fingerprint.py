import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from audio_synth import HOP, SR, planted_corpus, tones
from duplexkit.errors import InputError
from duplexkit.fingerprint import (
    DuplicateSet,
    Keypoint,
    MelSpec,
    Signature,
    SignatureIndex,
    build_duplicate_set,
    extract_constellation,
    extract_signatures,
    fingerprint,
    is_duplicate,
    load_signatures,
    mel_spectrogram,
    pack_key,
    pack_signatures,
    read_wav,
    signatures_from_bytes,
    signatures_to_bytes,
    tolerance_variants,
    unpack_key,
    write_wav,
)
from duplexkit.fingerprint.mel import LOG_FLOOR


# -- mel ---------------------------------------------------------------------

@pytest.mark.parametrize("sr", [16000, 24000])
def test_one_second_is_40_frames(sr):
    spec = mel_spectrogram(np.random.default_rng(0).standard_normal(sr), sr)
    assert spec.values.shape == (40, 64)


def test_silence_hits_floor():
    spec = mel_spectrogram(np.zeros(SR), SR)
    assert np.all(spec.values == np.log(LOG_FLOOR))


@pytest.mark.parametrize("sr", [16000, 24000])
def test_tone_lands_in_its_band(sr):
    t = np.arange(sr) / sr
    spec = mel_spectrogram(np.sin(2 * np.pi * 1000.0 * t), sr)
    # band centres from the HTK mel formula, 66 points evenly spaced over 200-3000 Hz
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    pts = np.linspace(mel(200), mel(3000), 66)
    centres = 700 * (10 ** (pts[1:-1] / 2595) - 1)
    expected = int(np.argmin(np.abs(centres - 1000.0)))
    assert np.bincount(spec.values.argmax(axis=1)).argmax() == expected


def test_mel_rejects_bad_input():
    with pytest.raises(InputError):
        mel_spectrogram(np.zeros(100), 44100)
    with pytest.raises(InputError):
        mel_spectrogram(np.zeros(0), SR)


# -- constellation -----------------------------------------------------------

def test_constant_spectrogram_has_no_keypoints():
    assert extract_constellation(np.ones((50, 64))) == []


def test_isolated_peak():
    s = np.zeros((30, 64))
    s[12, 40] = 5.0
    assert extract_constellation(MelSpec(s, SR)) == [Keypoint(12, 40)]


@given(st.integers(0, 2**32 - 1))
def test_at_most_one_keypoint_per_frame(seed):
    s = np.random.default_rng(seed).standard_normal((60, 64))
    c = extract_constellation(s)
    times = [k.t for k in c]
    assert times == sorted(set(times))
    for k in c:
        assert s[k.t, k.f] == s[k.t].max() and s[k.t, k.f] > s.mean()
        assert s[k.t, k.f] >= s[max(0, k.t - 4) : k.t + 5, k.f].max()


# -- signatures --------------------------------------------------------------

def test_hand_signature():
    c = [Keypoint(0, 10), Keypoint(5, 20), Keypoint(10, 30)]
    assert extract_signatures(c) == [Signature(10, 20, 30, 5, 5, 5)]


def test_single_keypoint_no_signature():
    assert extract_signatures([Keypoint(3, 3)]) == []


def test_bad_window():
    with pytest.raises(InputError):
        extract_signatures([], m=5, M=5)


@given(st.lists(st.integers(0, 200), unique=True, max_size=40), st.integers(0, 2**16))
def test_signatures_match_brute_force(times, seed):
    rng = np.random.default_rng(seed)
    c = [Keypoint(t, int(rng.integers(64))) for t in times]
    expected = []
    for k in sorted(c):
        back = [p for p in c if k.t - 20 < p.t <= k.t - 4]
        fwd = [p for p in c if k.t + 4 <= p.t < k.t + 20]
        if back and fwd:
            b = max(back, key=lambda p: p.t)
            f = min(fwd, key=lambda p: p.t)
            expected.append(Signature(b.f, k.f, f.f, k.t - b.t, f.t - k.t, k.t))
    assert extract_signatures(c) == expected


def test_key_extremes():
    assert pack_key(Signature(0, 0, 0, 4, 4)) == 0
    assert pack_key(Signature(63, 63, 63, 19, 19)) == 2**26 - 1
    assert 64**3 * 16**2 == 2**26


@given(st.integers(0, 63), st.integers(0, 63), st.integers(0, 63), st.integers(4, 19), st.integers(4, 19))
def test_pack_round_trip(fb, fk, ff, db, df):
    s = Signature(fb, fk, ff, db, df, 0)
    key = pack_key(s)
    assert 0 <= key < 2**26
    assert unpack_key(key) == s


@pytest.mark.parametrize("sig", [Signature(64, 0, 0, 4, 4), Signature(0, 0, 0, 3, 4), Signature(0, 0, 0, 4, 20)])
def test_pack_rejects_out_of_range(sig):
    with pytest.raises(InputError):
        pack_key(sig)


def test_unpack_rejects_bad_key():
    with pytest.raises(InputError):
        unpack_key(2**26)


def test_tolerance_variants_clip():
    assert len(tolerance_variants(pack_key(Signature(1, 2, 3, 10, 10)))) == 9
    assert len(tolerance_variants(pack_key(Signature(1, 2, 3, 4, 19)))) == 4


# -- index -------------------------------------------------------------------

def sigs_from(seed, seconds=10.0):
    return pack_signatures(fingerprint(tones(np.random.default_rng(seed), seconds), SR))


def test_index_add_rules():
    ix = SignatureIndex()
    ix.add("empty", [])
    assert ix.n_postings == 0
    keys, anchors = sigs_from(1)
    ix.add("a", (keys, anchors))
    assert ix.n_postings == len(keys)
    with pytest.raises(InputError):
        ix.add("a", (keys, anchors))
    assert all(p == sorted(p) for p in ix.postings.values())


def test_self_query_and_empty_query():
    ix = SignatureIndex()
    data = {f"a{i}": sigs_from(i) for i in range(5)}
    for aid, s in data.items():
        ix.add(aid, s)
    for aid, s in data.items():
        top = ix.query(s)[0]
        assert (top.audio_id, top.offset) == (aid, 0)
        assert top.votes == len(s[0])
    assert ix.query([]) == []


def test_excised_clip_found_at_offset():
    x = tones(np.random.default_rng(7), 20.0)
    c = extract_constellation(mel_spectrogram(x, SR))
    full = extract_signatures(c)
    ix = SignatureIndex()
    ix.add("src", full)
    o, L = 230, 300
    window = [Keypoint(k.t - o, k.f) for k in c if o <= k.t < o + L]
    clip = extract_signatures(window)
    inside = sum(1 for s in full if o <= s.anchor - s.dt_b and s.anchor + s.dt_f < o + L)
    top = ix.query(clip)[0]
    assert top.offset == o and top.votes >= inside > 0


def test_query_shift_equivariance():
    x = tones(np.random.default_rng(8), 12.0)
    ix = SignatureIndex()
    ix.add("src", pack_signatures(fingerprint(x, SR)))
    for w in (0, 7, 40):
        top = ix.query(pack_signatures(fingerprint(x[w * HOP :], SR)))[0]
        assert top.offset == w


def test_tolerance_recovers_jittered_deltas():
    ix = SignatureIndex()
    db = [Signature(1, 2, 3, 8, 9, t) for t in (10, 30, 50)]
    ix.add("a", db)
    q = [Signature(1, 2, 3, 9, 8, t) for t in (10, 30, 50)]
    assert ix.query(q, tolerance=0) == []
    top = ix.query(q, tolerance=1)[0]
    assert (top.audio_id, top.offset, top.votes) == ("a", 0, 3)
    with pytest.raises(InputError):
        ix.query(q, tolerance=2)


def test_index_persistence_round_trip():
    ix = SignatureIndex()
    ix.add("a", sigs_from(1))
    ix.add("ü-b", sigs_from(2))
    back = SignatureIndex.from_bytes(ix.to_bytes())
    assert back.audio_ids == ix.audio_ids
    assert dict(back.postings) == {k: sorted(v) for k, v in ix.postings.items()}
    with pytest.raises(InputError):
        SignatureIndex.from_bytes(b"SIDX" + bytes(3))
    with pytest.raises(InputError):
        SignatureIndex.from_bytes(b"nope")


def test_concurrent_readers_and_writer():
    ix = SignatureIndex()
    base = sigs_from(3)
    ix.add("base", base)
    errors = []

    def reader():
        for _ in range(20):
            top = ix.query(base)[0]
            if top.audio_id != "base":
                errors.append(top)

    def writer():
        for i in range(10):
            ix.add(f"w{i}", sigs_from(100 + i, 2.0))

    threads = [threading.Thread(target=reader) for _ in range(4)] + [threading.Thread(target=writer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len(ix) == 11


# -- dedup -------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    return planted_corpus(n_clips=24, n_planted=12, clip_s=12.0, segment_s=6.0, seed=1)


def test_planted_segment_flagged(small_corpus):
    corpus, planted, _ = small_corpus
    dup = build_duplicate_set(corpus)
    assert len(dup) > 0
    flags = {aid: is_duplicate(s, dup)[0] for aid, s in corpus}
    assert {a for a, f in flags.items() if f} == planted


def test_parallel_build_matches_serial(small_corpus):
    corpus, _, _ = small_corpus
    assert build_duplicate_set(corpus, workers=3).entries == build_duplicate_set(corpus).entries


def test_negative_corpus_gives_empty_set():
    corpus = [(f"n{i}", sigs_from(200 + i, 6.0)) for i in range(12)]
    dup = build_duplicate_set(corpus)
    assert len(dup) == 0
    flag, score = is_duplicate(sigs_from(999, 6.0), dup)
    assert not flag and score == 0


def test_min_matches_above_corpus_size(small_corpus):
    corpus, _, _ = small_corpus
    assert len(build_duplicate_set(corpus, min_matches=len(corpus) + 1)) == 0


def test_fresh_clip_and_empty_input(small_corpus):
    corpus, _, _ = small_corpus
    dup = build_duplicate_set(corpus)
    flag, score = is_duplicate(sigs_from(4242, 12.0), dup)
    assert not flag and score <= 1
    assert is_duplicate([], dup) == (False, 0)


def test_empty_corpus_rejected():
    with pytest.raises(InputError):
        build_duplicate_set([])


def test_duplicate_set_unique_entries_and_persistence(small_corpus):
    corpus, _, _ = small_corpus
    dup = build_duplicate_set(corpus)
    assert dup.add(*next(iter(dup.entries))) is False
    back = DuplicateSet.from_bytes(dup.to_bytes())
    assert back.entries == dup.entries and back.threshold == dup.threshold
    with pytest.raises(InputError):
        DuplicateSet.from_bytes(b"XXXX")


# -- files -------------------------------------------------------------------

def test_wav_round_trip_and_downmix(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 100, SR))
    write_wav(tmp_path / "a.wav", x, SR)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == SR and np.max(np.abs(x - y)) < 1e-4
    import wave

    with wave.open(str(tmp_path / "st.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(SR)
        w.writeframes(np.array([[1000, 3000]] * 10, dtype="<i2").tobytes())
    y, _ = read_wav(tmp_path / "st.wav")
    assert np.allclose(y, 2000 / 32768)


def test_bad_wav(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"not a wav")
    with pytest.raises(InputError):
        read_wav(tmp_path / "x.wav")


def test_signature_file_round_trip(tmp_path):
    keys, anchors = sigs_from(5)
    data = signatures_to_bytes((keys, anchors))
    k2, a2, m, M = signatures_from_bytes(data)
    assert np.array_equal(k2, keys) and np.array_equal(a2, anchors) and (m, M) == (4, 20)
    with pytest.raises(InputError):
        signatures_from_bytes(data[:-3])
    x = tones(np.random.default_rng(5), 10.0)
    write_wav(tmp_path / "c.wav", x, SR)
    (tmp_path / "c.sig").write_bytes(signatures_to_bytes(load_signatures(tmp_path / "c.wav")))
    a, b = load_signatures(tmp_path / "c.wav"), load_signatures(tmp_path / "c.sig")
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
