import pytest
from hypothesis import given
from hypothesis import strategies as st

from duplexkit.alignment import (
    SpecialTokens,
    TextStream,
    WordTiming,
    build_text_stream,
    extract_words,
    load_words_jsonl,
    pad_fraction,
    time_to_index,
)
from duplexkit.errors import InputError

SP = SpecialTokens()
PAD, EPAD = SP.pad_id, SP.epad_id


@pytest.mark.parametrize("t,idx", [(0.8, 10), (0.0, 0), (0.079, 0), (0.56, 7), (0.16, 2)])
def test_time_to_index(t, idx):
    assert time_to_index(t) == idx


def test_negative_time():
    with pytest.raises(InputError):
        time_to_index(-0.1)


def test_empty_words_all_pad():
    assert build_text_stream([], 8).tokens == [PAD] * 8


def test_worked_example():
    words = [WordTiming((7,), 0.16, "hi"), WordTiming((8, 9), 0.40, "there")]
    s = build_text_stream(words, 8)
    assert s.tokens == [PAD, EPAD, 7, PAD, EPAD, 8, 9, PAD]
    assert pad_fraction(s) == 0.375
    assert extract_words(s) == [([7], 2), ([8, 9], 5)]


def test_worked_example_pad_count_with_epad():
    s = build_text_stream([WordTiming((7,), 0.16), WordTiming((8, 9), 0.40)], 8)
    assert pad_fraction(s, include_epad=True) == 0.625


@pytest.mark.parametrize("start", [0.0, 0.08])
def test_boundary_rule_shifts_word(start):
    s = build_text_stream([WordTiming((5,), start)], 6)
    assert s.tokens[:3] == [PAD, EPAD, 5]


def test_boundary_rule_multi_token():
    s = build_text_stream([WordTiming((5, 6), 0.0)], 6)
    assert s.tokens == [PAD, EPAD, 5, 6, PAD, PAD]


def test_epad_skipped_when_it_would_overwrite():
    # second word starts right after the first ends
    s = build_text_stream([WordTiming((5, 6), 0.16), WordTiming((7,), 0.32)], 8)
    assert s.tokens == [PAD, EPAD, 5, 6, 7, PAD, PAD, PAD]


def test_overlap_rejected():
    with pytest.raises(InputError, match="overlap"):
        build_text_stream([WordTiming((5, 6, 7), 0.16, "a"), WordTiming((8,), 0.24, "b")], 10)


def test_span_past_end_rejected():
    with pytest.raises(InputError):
        build_text_stream([WordTiming((5, 6), 0.48)], 7)


def test_special_token_in_word_rejected():
    with pytest.raises(InputError):
        build_text_stream([WordTiming((PAD,), 0.4)], 10)


def test_special_tokens_distinct():
    with pytest.raises(InputError):
        SpecialTokens(3, 3)


def test_extract_simple_cases():
    assert extract_words([PAD, EPAD, 7, PAD]) == [([7], 2)]
    assert extract_words([PAD] * 5) == []


def test_pad_fraction_bounds():
    assert pad_fraction([PAD] * 4) == 1.0
    assert pad_fraction([5, 6, EPAD]) == 0.0
    with pytest.raises(InputError):
        pad_fraction([])


def test_load_words_jsonl():
    words = load_words_jsonl(['{"word": "a", "tokens": [5, 6], "start": 0.4}', "", '{"tokens": [7], "start": 1}'])
    assert words[0] == WordTiming((5, 6), 0.4, "a") and words[1].tokens == (7,)
    with pytest.raises(InputError):
        load_words_jsonl(['{"tokens": [], "start": 0}'])


@st.composite
def word_lists(draw, min_start=2):
    """Non-overlapping words with at least one free slot before each (room for EPAD)."""
    T = draw(st.integers(4, 80))
    words, pos = [], min_start
    while True:
        gap = draw(st.integers(0, 6))
        start = pos + gap
        n = draw(st.integers(1, 4))
        if start + n > T or not draw(st.booleans()) and words:
            break
        toks = tuple(draw(st.lists(st.integers(3, 500), min_size=n, max_size=n)))
        words.append((toks, start))
        pos = start + n + 1
    return T, words


@given(word_lists())
def test_round_trip(case):
    T, words = case
    timings = [WordTiming(toks, start / 12.5) for toks, start in words]
    s = build_text_stream(timings, T)
    assert len(s) == T
    assert extract_words(s) == [(list(t), i) for t, i in words]


@given(word_lists(min_start=0))
def test_runs_preceded_by_epad(case):
    T, words = case
    timings = [WordTiming(toks, start / 12.5) for toks, start in words]
    try:
        s = build_text_stream(timings, T)
    except InputError:
        return  # boundary shift pushed a word into its neighbour or past T
    toks = s.tokens
    for i, t in enumerate(toks):
        if not SP.is_special(t) and (i == 0 or SP.is_special(toks[i - 1])):
            assert i > 0 and toks[i - 1] == EPAD
    # every word token survives
    assert sum(not SP.is_special(t) for t in toks) == sum(len(w) for w, _ in words)


def test_text_stream_len():
    assert len(TextStream([1, 2, 3])) == 3
