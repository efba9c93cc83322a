import numpy as np
import pytest

from oracles import naive_attention
from palm_lab.attention import (AttentionMask, AttentionWeights, PartialAttentionParams, attend, attention_probs,
                                dropout, full_mask, make_causal_mask, make_cross_unidirectional_mask,
                                make_prefix_mask, partial_attention_block, partial_feedforward)
from palm_lab.core_math import DimensionError, SeededRng


def _weights(rng, d):
    return AttentionWeights(rng.normal((d, d)), rng.normal((d, d)), rng.normal((d, d)))


def _partial(rng, d):
    return PartialAttentionParams(rng.normal((d, d)), rng.normal((d, d)), rng.normal(d), rng.normal(d),
                                  _weights(rng, d))


@pytest.mark.parametrize("mask_fn", [lambda: make_causal_mask(5), lambda: make_prefix_mask(2, 3),
                                     lambda: full_mask(5, 5)])
def test_attend_matches_naive_loops(mask_fn):
    rng = SeededRng(11)
    d = 4
    w = _weights(rng, d)
    x = rng.normal((5, d))
    mask = mask_fn()
    expected = naive_attention(x, x, x, w.w_q, w.w_k, w.w_v, mask.allowed.tolist())
    assert np.allclose(attend(x, x, x, w, mask), expected, atol=1e-12)


def test_bilinear_form_matches_logits():
    rng = SeededRng(1)
    w = _weights(rng, 3)
    q, k = rng.normal((2, 3)), rng.normal((4, 3))
    logits = q @ w.w_q @ w.w_k.T @ k.T
    assert np.allclose(logits, (k @ w.a @ q.T).T)


def test_masks():
    causal = make_causal_mask(3).allowed
    assert causal.tolist() == [[True, False, False], [True, True, False], [True, True, True]]
    prefix = make_prefix_mask(2, 2).allowed
    assert prefix.tolist() == [[True, True, False, False], [True, True, False, False],
                               [True, True, True, False], [True, True, True, True]]
    assert np.array_equal(make_cross_unidirectional_mask(2, 3).allowed, np.tri(5, dtype=bool))
    assert make_causal_mask(4).tail(2).rows == 2
    with pytest.raises(ValueError, match="fully masked"):
        AttentionMask(np.array([[True], [False]]))
    with pytest.raises(ValueError):
        make_causal_mask(0)
    with pytest.raises(ValueError):
        make_prefix_mask(0, 3)


def test_causal_rows_ignore_future_keys():
    rng = SeededRng(2)
    w = _weights(rng, 3)
    x = rng.normal((4, 3))
    z1 = attend(x, x, x, w, make_causal_mask(4))
    x2 = x.copy()
    x2[3] += 10.0
    z2 = attend(x2, x2, x2, w, make_causal_mask(4))
    assert np.array_equal(z1[:3], z2[:3])


def test_probs_rows_sum_to_one_and_masked_zero():
    rng = SeededRng(3)
    w = _weights(rng, 2)
    x = rng.normal((3, 2))
    p = attention_probs(x, x, w, make_causal_mask(3))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert p[0, 1] == 0.0 and p[0, 2] == 0.0


def test_shape_errors():
    rng = SeededRng(4)
    w = _weights(rng, 3)
    with pytest.raises(DimensionError):
        attend(rng.normal((2, 4)), rng.normal((2, 3)), rng.normal((2, 3)), w, full_mask(2, 2))
    with pytest.raises(DimensionError):
        attend(rng.normal((2, 3)), rng.normal((2, 3)), rng.normal((2, 3)), w, full_mask(3, 2))
    with pytest.raises(DimensionError):
        AttentionWeights(np.eye(2), np.eye(3), np.eye(2))


def test_partial_block_keys_come_from_source_only():
    rng = SeededRng(5)
    d = 3
    p = _partial(rng, d)
    rows = rng.normal((6, d))
    out = partial_attention_block(rows, 2, p)
    keys = partial_feedforward(rows[:2], p)
    expected = naive_attention(rows, keys, keys, p.inner.w_q, p.inner.w_k, p.inner.w_v, [[True] * 2] * 6)
    assert np.allclose(out, expected, atol=1e-12)
    # target rows are queries only
    changed = rows.copy()
    changed[4] += 5.0
    assert np.array_equal(partial_attention_block(changed, 2, p)[:4], out[:4])


def test_partial_block_validates_source_length():
    rng = SeededRng(6)
    p = _partial(rng, 2)
    with pytest.raises(ValueError):
        partial_attention_block(rng.normal((3, 2)), 0, p)
    with pytest.raises(ValueError):
        partial_attention_block(rng.normal((3, 2)), 4, p)


def test_dropout():
    x = np.ones((100, 10))
    assert dropout(x, 0.5, None, train_mode=False) is x
    out = dropout(x, 0.5, SeededRng(0), train_mode=True)
    kept = out != 0
    assert np.allclose(out[kept], 2.0)
    assert 0.4 < kept.mean() < 0.6
    with pytest.raises(ValueError):
        dropout(x, 0.5, None, train_mode=True)
