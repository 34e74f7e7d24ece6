import numpy as np
import pytest

from tpamodels.models import attention_ref as ar
from tpamodels.models.counters import MacCounter
from tpamodels.models.tpa_factor import compute_factors_seq
from tpamodels.utils.errors import ConfigError, EmptyInputError, ShapeError

T, D_MODEL, H, D_H = 32, 16, 4, 6


@pytest.fixture
def X(rng):
    return rng.standard_normal((T, D_MODEL))


def _heads(rng, n, d=D_H):
    return rng.standard_normal((n, D_MODEL, d))


def _via_tpa(weights, X, causal=True):
    seq = compute_factors_seq(weights, weights.cfg, X)
    return ar.attention_reference(*(ar.materialize_sequence(f)
                                    for f in seq), causal=causal)


@pytest.mark.parametrize('causal', [True, False])
def test_mha_as_tpa(rng, X, causal):
    w_q, w_k, w_v = _heads(rng, H), _heads(rng, H), _heads(rng, H, 5)
    native = ar.mha_forward(X, w_q, w_k, w_v, causal)
    weights = ar.mha_as_tpa(w_q, w_k, w_v)
    assert weights.cfg.variant == 'non_contextual_a'
    assert weights.cfg.r_q == H
    assert np.max(np.abs(_via_tpa(weights, X, causal) - native)) <= 1e-12


def test_mqa_as_tpa(rng, X):
    w_q = _heads(rng, H)
    w_k, w_v = _heads(rng, 1)[0], _heads(rng, 1)[0]
    native = ar.mqa_forward(X, w_q, w_k, w_v, causal=True)
    weights = ar.mqa_as_tpa(w_q, w_k, w_v)
    assert weights.cfg.r_k == weights.cfg.r_v == 1
    assert np.max(np.abs(_via_tpa(weights, X) - native)) <= 1e-12


@pytest.mark.parametrize('groups', [1, 2, 4])
def test_gqa_as_tpa(rng, X, groups):
    w_q = _heads(rng, H)
    w_k, w_v = _heads(rng, groups), _heads(rng, groups)
    native = ar.gqa_forward(X, w_q, w_k, w_v, groups, causal=True)
    weights = ar.gqa_as_tpa(w_q, w_k, w_v, groups)
    assert np.max(np.abs(_via_tpa(weights, X) - native)) <= 1e-12


def test_gqa_boundary_cases(rng, X):
    w_q = _heads(rng, H)
    w_k, w_v = _heads(rng, H), _heads(rng, H)
    assert np.allclose(ar.gqa_forward(X, w_q, w_k, w_v, H, True),
                       ar.mha_forward(X, w_q, w_k, w_v, True),
                       rtol=0, atol=1e-12)
    assert np.allclose(ar.gqa_forward(X, w_q, w_k[:1], w_v[:1], 1, True),
                       ar.mqa_forward(X, w_q, w_k[0], w_v[0], True),
                       rtol=0, atol=1e-12)
    mqa = ar.mqa_as_tpa(w_q, w_k[0], w_v[0])
    gqa = ar.gqa_as_tpa(w_q, w_k[:1], w_v[:1], 1)
    assert np.array_equal(mqa.a_k, gqa.a_k)


def test_group_factors():
    a = ar.group_factors(6, 3)
    assert a.shape == (3, 6)
    assert np.array_equal(a[1], [0, 0, 3, 3, 0, 0])
    with pytest.raises(ConfigError):
        ar.group_factors(6, 4)


def test_causal_mask():
    mask = ar.causal_mask(3, 3)
    assert np.array_equal(mask, np.tril(np.ones((3, 3), dtype=bool)))
    tail = ar.causal_mask(2, 5)
    assert np.array_equal(tail, [[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]])


def test_causal_first_row_is_first_value(rng):
    Q = rng.standard_normal((5, 2, 4))
    K = rng.standard_normal((5, 2, 4))
    V = rng.standard_normal((5, 2, 3))
    out = ar.attention_reference(Q, K, V, causal=True)
    assert np.allclose(out[0], V[0])


def test_outputs_are_convex_combinations(rng):
    Q = rng.standard_normal((4, 3, 4))
    K = rng.standard_normal((6, 3, 4))
    V = np.broadcast_to(rng.standard_normal((1, 3, 2)), (6, 3, 2))
    out = ar.attention_reference(Q, K, V)
    assert np.allclose(out, V[:4])
    V = rng.standard_normal((6, 3, 2))
    out = ar.attention_reference(Q, K, V)
    assert np.all(out <= V.max(axis=0) + 1e-12)
    assert np.all(out >= V.min(axis=0) - 1e-12)


def test_reference_rejects_bad_input(rng):
    with pytest.raises(EmptyInputError):
        ar.attention_reference(np.zeros((0, 2, 4)), np.zeros((3, 2, 4)),
                               np.zeros((3, 2, 4)))
    with pytest.raises(ShapeError):
        ar.attention_reference(np.zeros((1, 2, 4)), np.zeros((3, 2, 5)),
                               np.zeros((3, 2, 4)))
    with pytest.raises(ShapeError):
        ar.attention_reference(np.zeros((2, 4)), np.zeros((3, 2, 4)),
                               np.zeros((3, 2, 4)))


@pytest.mark.parametrize('n_kv', [1, 2, 4])
def test_dense_decode(rng, n_kv):
    M = 9
    q = rng.standard_normal((H, D_H))
    K = rng.standard_normal((M, n_kv, D_H))
    V = rng.standard_normal((M, n_kv, 5))
    counter = MacCounter()
    out = ar.dense_decode(q, K, V, counter)
    size = H // n_kv
    expected = ar.attention_reference(q[None], np.repeat(K, size, axis=1),
                                      np.repeat(V, size, axis=1))[0]
    assert np.allclose(out, expected, rtol=0, atol=1e-12)
    assert counter.mac_score == H * M * D_H
    assert counter.mac_value == H * M * 5
    with pytest.raises(EmptyInputError):
        ar.dense_decode(q, K[:0], V[:0])
