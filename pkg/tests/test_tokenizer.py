import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

import oracles
from autorig.skeleton import Skeleton, same_topology, traversal_order, validate_skeleton
from autorig.tokenizer import (TokenFormatError, TokenSequence, Vocab, dequantize_coord, detokenize, from_bytes,
                               from_text, quantize_coord, to_bytes, to_text, tokenize_skeleton)
from gen import random_skeleton

V = Vocab()
K2 = Skeleton(np.array([[0.0, 0, 0], [0.5, 0, 0]]), np.array([-1, 0]))


def test_vocab_layout():
    assert (V.bos, V.eos, V.pad, V.size) == (256, 257, 258, 259)
    with pytest.raises(ValueError):
        Vocab(1)


@pytest.mark.parametrize("x, q", [(-1.0, 0), (1.0, 255), (0.5, 191), (0.0, 128)])
def test_quantize_examples(x, q):
    assert quantize_coord(x) == q


@given(st.floats(-1, 1), st.sampled_from([2, 3, 16, 255, 256, 1024]))
def test_quantize_matches_exact_rational(x, bins):
    # within float rounding of a half-bin boundary either neighbour is acceptable
    v = (Fraction(x) + 1) / 2 * (bins - 1)
    assume(abs(v - math.floor(v) - Fraction(1, 2)) > Fraction(1, 10**9))
    assert quantize_coord(x, bins) == oracles.quantize(x, bins)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_quantize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert quantize_coord(lo) <= quantize_coord(hi)


def test_quantize_range_error():
    for bad in (-1.0000001, 1.5, np.nan):
        with pytest.raises(ValueError):
            quantize_coord(bad)


def test_dequantize_examples():
    assert dequantize_coord(0) == -1.0
    assert dequantize_coord(255) == 1.0
    assert dequantize_coord(191) == pytest.approx(382 / 255 - 1, abs=1e-15)
    with pytest.raises(ValueError):
        dequantize_coord(256)


@given(st.floats(-1, 1))
def test_dequantize_quantize_error_bound(x):
    assert abs(dequantize_coord(quantize_coord(x)) - x) <= 1 / 255 + 1e-15


def test_tokenize_hand_example():
    ids = tokenize_skeleton(K2).ids.tolist()
    assert ids == [128, 128, 128, 128, 128, 128, 128, 128, 128, 191, 128, 128]


def test_detokenize_hand_example():
    s = detokenize(tokenize_skeleton(K2))
    np.testing.assert_allclose(s.joints, [[1 / 255, 1 / 255, 1 / 255], [127 / 255, 1 / 255, 1 / 255]], atol=1e-15)
    assert s.parents.tolist() == [-1, 0]


@given(st.integers(2, 40), st.integers(0, 2**31))
def test_payload_length_and_root_prefix(k, seed):
    skel = random_skeleton(np.random.default_rng(seed), k)
    ids = tokenize_skeleton(skel).ids
    assert len(ids) == 6 * k
    q_root = [quantize_coord(c) for c in skel.joints[skel.root]]
    assert ids[:3].tolist() == q_root and ids[3:6].tolist() == q_root


@given(st.integers(2, 30), st.integers(0, 2**31))
def test_round_trip(k, seed):
    skel = random_skeleton(np.random.default_rng(seed), k)
    back = detokenize(tokenize_skeleton(skel))
    order = traversal_order(skel)
    assert np.abs(back.joints - skel.joints[order]).max() <= 1 / 255 + 1e-12
    assert same_topology(back, skel)


@given(st.lists(st.integers(0, 255), min_size=12, max_size=120).filter(lambda x: len(x) % 6 == 0))
def test_any_payload_decodes_to_valid_tree(payload):
    s = detokenize(np.array(payload))
    assert validate_skeleton(s) == []


def test_parent_tie_breaks_to_lowest_index():
    # 5 bins dequantize to exact dyadic values; joints 0 and 1 sit at x=0 and
    # x=1, joint 2's parent triple at x=0.5 is equidistant from both
    ids = [2] * 6 + [2, 2, 2, 4, 2, 2] + [3, 2, 2, 3, 4, 2]
    s = detokenize(np.array(ids), Vocab(5))
    assert s.parents.tolist() == [-1, 0, 0]


@pytest.mark.parametrize("ids, msg", [
    ([1, 2, 3, 4, 5, 6, 7], "multiple"),
    ([], "empty"),
    ([1, 2, 3, 256, 5, 6, 1, 2, 3, 4, 5, 6], "special"),
    ([1, 2, 3, 4, 5, 6], "fewer than two"),
])
def test_format_errors(ids, msg):
    with pytest.raises(TokenFormatError, match=msg):
        detokenize(np.array(ids, dtype=np.int64))


def test_special_tokens_are_stripped():
    payload = tokenize_skeleton(K2).ids.tolist()
    framed = [V.bos] + payload + [V.eos, V.pad, V.pad]
    assert detokenize(np.array(framed)).parents.tolist() == [-1, 0]


@given(st.lists(st.integers(0, 258), max_size=50))
def test_text_and_binary_round_trip(ids):
    assert from_text(to_text(ids)).tolist() == ids
    data = to_bytes(ids)
    assert len(data) == 2 * len(ids)
    assert from_bytes(data).tolist() == ids


def test_binary_is_little_endian():
    assert to_bytes([1, 258]) == b"\x01\x00\x02\x01"
    with pytest.raises(TokenFormatError):
        from_bytes(b"\x01")


def test_token_sequence_is_immutable():
    seq = TokenSequence([1, 2, 3])
    with pytest.raises(ValueError):
        seq.ids[0] = 5
