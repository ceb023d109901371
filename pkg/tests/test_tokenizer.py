import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtext.tokenizer import (CLS, MASK, PAD, SEP, SPECIAL_TOKENS, UNK, Vocabulary, build_vocab,
                                decode, encode, mlm_mask, pre_tokenize, tokenize, wordpiece)

SENT = ("Flow Duration=1605449, Flow Pkts/s=159.4569494, Flow IAT Mean=6295.878431, "
        "Init Bwd Win Byts=64240")


def hand_vocab(extra=()):
    chars = "abcdefghijklmnopqrstuvwxyz0123456789"
    tokens = [PAD, UNK, CLS, SEP, MASK, "=", ",", ".", "/", "-"]
    tokens += list(chars) + ["##" + c for c in chars]
    return Vocabulary(tokens + [t for t in extra if t not in tokens])


def test_pre_tokenize_splits_punctuation():
    assert pre_tokenize("Flow Pkts/s=159.45, X") == ["flow", "pkts", "/", "s", "=", "159", ".", "45", ",", "x"]


def test_wordpiece_greedy_longest_match():
    v = hand_vocab(["160", "1605", "##54", "##5449", "##49"])
    assert wordpiece("1605449", v) == ["1605", "##4", "##49"]
    v2 = hand_vocab(["160", "##5449"])
    assert wordpiece("1605449", v2) == ["160", "##5449"]
    assert wordpiece("x" * 101, v) == [UNK]
    assert wordpiece("é", v) == [UNK]


def test_vocab_special_ids():
    v = hand_vocab()
    assert v.pad_id == 0
    assert len({v.pad_id, v.unk_id, v.cls_id, v.sep_id, v.mask_id}) == 5
    with pytest.raises(ValueError):
        Vocabulary([UNK, PAD, CLS, SEP, MASK])
    with pytest.raises(ValueError):
        Vocabulary([PAD, UNK, CLS, SEP])


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([SENT], 80)
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v
    assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == PAD


def test_build_vocab_learns_flow():
    v = build_vocab(["flow"] * 5, 20)
    assert "flow" in v
    assert tokenize("flow", v) == ["flow"]


def test_build_vocab_character_only_at_minimum_size():
    corpus = ["flow duration=12", "ab ba"]
    words = [w for t in corpus for w in pre_tokenize(t)]
    initial = {w[0] for w in words}
    cont = {"##" + c for w in words for c in w[1:]}
    size = len(SPECIAL_TOKENS) + len(initial) + len(cont)
    v = build_vocab(corpus, size)
    assert len(v) == size
    assert all(len(t.removeprefix("##")) == 1 for t in v.tokens if t not in SPECIAL_TOKENS)


def test_build_vocab_errors_and_determinism():
    with pytest.raises(ValueError):
        build_vocab([], 50)
    with pytest.raises(ValueError):
        build_vocab(["abc"], 6)
    assert build_vocab([SENT] * 3, 60) == build_vocab([SENT] * 3, 60)


def test_encode_empty_text():
    v = hand_vocab()
    seq = encode("", v, 8)
    assert seq.ids == (v.cls_id, v.sep_id) + (v.pad_id,) * 6
    assert seq.attention_mask == (1, 1, 0, 0, 0, 0, 0, 0)
    assert seq.segment_ids == (0,) * 8


def test_encode_is_uncased():
    v = build_vocab([SENT], 100)
    assert encode("Flow", v, 6).ids == encode("flow", v, 6).ids


def test_truncation_keeps_sep_last():
    v = hand_vocab(["flow", "duration"])
    prefix = "Flow Duration=1605449"
    # flow | duration | = | 1 ##6 ##0 ##5 ##4 ##4 ##9  -> 10 pieces
    assert len(tokenize(prefix, v)) == 10
    seq = encode(prefix, v, 8)
    assert seq.n_real == 8
    assert [v.tokens[i] for i in seq.ids] == [CLS, "flow", "duration", "=", "1", "##6", "##0", SEP]


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcXYZ019=,./- ", max_size=60), st.integers(2, 40))
def test_sequence_invariants(text, max_len):
    v = build_vocab([text or "a"], 40)
    seq = encode(text, v, max_len)
    assert len(seq.ids) == len(seq.attention_mask) == max_len
    n = seq.n_real
    assert seq.attention_mask == (1,) * n + (0,) * (max_len - n)
    assert seq.ids[0] == v.cls_id and seq.ids[n - 1] == v.sep_id
    assert seq.ids[:n].count(v.cls_id) == 1 and seq.ids[:n].count(v.sep_id) == 1
    assert all(i == v.pad_id for i in seq.ids[n:])
    assert encode(text, v, max_len) == seq


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcdefXYZ0123456789=,./- ", max_size=80))
def test_decode_round_trip_on_normalized_text(text):
    v = build_vocab([text or "a"], 60)
    seq = encode(text, v, 512)
    assert decode(seq.ids, v) == " ".join(pre_tokenize(text))


def test_mlm_zero_rate_and_specials():
    v = build_vocab([SENT], 100)
    seq = encode(SENT, v, 64)
    ids, targets = mlm_mask(seq, v, 0.0, seed=1)
    assert ids == seq.ids and targets == {}
    ids, targets = mlm_mask(seq, v, 1.0, seed=1)
    n = seq.n_real
    assert set(targets) == set(range(1, n - 1))
    assert ids[0] == v.cls_id and ids[n - 1] == v.sep_id
    assert all(i == v.pad_id for i in ids[n:])


def test_mlm_deterministic_and_proportions():
    v = build_vocab([SENT], 100)
    seq = encode(SENT * 20, v, 512)
    assert mlm_mask(seq, v, 0.15, seed=3) == mlm_mask(seq, v, 0.15, seed=3)
    masked = kept = swapped = total = 0
    for seed in range(200):
        ids, targets = mlm_mask(seq, v, 0.15, seed=seed)
        for pos, orig in targets.items():
            total += 1
            if ids[pos] == v.mask_id:
                masked += 1
            elif ids[pos] == orig:
                kept += 1
            else:
                swapped += 1
                assert ids[pos] not in v.special_ids
    rate = total / (200 * (seq.n_real - 2))
    assert abs(rate - 0.15) < 0.01
    assert abs(masked / total - 0.8) < 0.02
    # a random replacement can coincide with the original, so "kept" runs slightly above 10%
    assert abs(swapped / total - 0.1) < 0.02 and abs(kept / total - 0.1) < 0.02
