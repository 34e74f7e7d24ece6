import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import svdvals

from tpamodels.models import tpa_factor
from tpamodels.models.tpa_factor import (TpaConfig, FactorBlock,
                                         FactorWeights, compute_factors,
                                         compute_factors_seq, init_weights,
                                         materialize, materialize_third_order,
                                         xavier_init)
from tpamodels.utils.errors import ConfigError, ShapeError

from conftest import random_block


def _outer_sum(block):
    return sum(np.outer(block.a[r], block.features()[r])
               for r in range(block.rank)) / block.rank


def test_materialize_matches_outer_products_many_configs(rng):
    err = 0.
    for _ in range(1000):
        rank = rng.integers(1, 5)
        h = rng.integers(1, 9)
        d_h = 2 * rng.integers(1, 9)
        block = random_block(rng, rank, h, d_h)
        err = max(err, np.max(np.abs(materialize(block) - _outer_sum(block))))
    assert err <= 1e-12


@settings(max_examples=200, deadline=None)
@given(rank=st.integers(1, 4), h=st.integers(1, 8), half=st.integers(1, 8),
       seed=st.integers(0, 2 ** 32 - 1))
def test_materialize_definition(rank, h, half, seed):
    block = random_block(np.random.default_rng(seed), rank, h, 2 * half)
    Q = materialize(block)
    assert Q.shape == (h, 2 * half)
    assert np.max(np.abs(Q - _outer_sum(block))) <= 1e-12


@pytest.mark.parametrize('rank', [1, 2, 3])
def test_materialized_rank_is_bounded(rng, rank):
    s = svdvals(materialize(random_block(rng, rank, 8, 16)))
    assert np.sum(s > 1e-10 * s[0]) <= rank


def test_materialize_rank_argument(rng):
    block = random_block(rng, 2, 3, 4)
    assert np.array_equal(materialize(block, 2), materialize(block))
    with pytest.raises(ShapeError):
        materialize(block, 3)


@pytest.mark.parametrize('d_b,d_c', [(2, 1), (2, 3), (4, 2), (8, 4)])
def test_third_order_features_are_column_stacked(rng, d_b, d_c):
    block = random_block(rng, 3, 4, d_b, d_c)
    for r in range(3):
        vec = np.outer(block.b[r], block.c[r]).reshape(-1, order='F')
        assert np.array_equal(block.features()[r], vec)
    assert np.allclose(materialize(block),
                       materialize_third_order(block, d_h=d_b * d_c),
                       rtol=0, atol=1e-12)


def test_third_order_checks(rng):
    with pytest.raises(ConfigError):
        materialize_third_order(random_block(rng, 2, 3, 4))
    with pytest.raises(ConfigError):
        materialize_third_order(random_block(rng, 2, 3, 4, 2), d_h=6)


def test_factor_block_row_counts(rng):
    with pytest.raises(ShapeError):
        FactorBlock(rng.standard_normal((2, 3)), rng.standard_normal((3, 4)))
    with pytest.raises(ShapeError):
        FactorBlock(rng.standard_normal(3), rng.standard_normal((1, 4)))


@pytest.mark.parametrize('kwargs', [
    {'d_h': 7},
    {'variant': 'bogus'},
    {'order': 'fourth'},
    {'r_k': 0},
    {'variant': 'shared_b', 'r_k': 2, 'r_v': 1},
    {'variant': 'shared_b', 'value_dim': 6},
    {'order': 'third', 'd_b': 2, 'd_c': 3},
    {'order': 'third', 'd_b': 3, 'd_c': 2, 'd_h': 6},
    {'order': 'third', 'd_b': 2},
    {'order': 'third', 'd_b': 2, 'd_c': 4, 'variant': 'non_contextual_a'},
    {'rope_base': 1.},
])
def test_config_validation(kwargs):
    base = {'d_model': 16, 'h': 2, 'd_h': 8}
    base.update(kwargs)
    with pytest.raises(ConfigError):
        TpaConfig(**base)


def test_config_dict_round_trip():
    cfg = TpaConfig(d_model=16, h=2, d_h=8, r_q=3, order='third', d_b=4,
                    d_c=2)
    assert TpaConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.token_dim == 4
    assert cfg.value_dim == 8
    with pytest.raises(ConfigError):
        TpaConfig.from_dict({'d_model': 16, 'h': 2, 'd_h': 8, 'heads': 3})


def test_compute_factors_full(rng):
    cfg = TpaConfig(d_model=10, h=3, d_h=4, r_q=2, r_k=3, r_v=1)
    w = init_weights(cfg, 7)
    x = rng.standard_normal(10)
    tok = compute_factors(w, cfg, x)
    assert np.allclose(tok.q.a, (w.w_aq @ x).reshape(2, 3))
    assert np.allclose(tok.q.b, (w.w_bq @ x).reshape(2, 4))
    assert np.allclose(tok.k.a, (w.w_ak @ x).reshape(3, 3))
    assert np.allclose(tok.v.b, (w.w_bv @ x).reshape(1, 4))
    assert tok.q.c is None


@pytest.mark.parametrize('variant', ['full', 'kv_only', 'non_contextual_a',
                                     'non_contextual_b', 'shared_b'])
def test_sequence_factors_match_token_factors(rng, variant):
    cfg = TpaConfig(d_model=12, h=3, d_h=4, r_q=2, r_k=2, r_v=2,
                    variant=variant)
    w = init_weights(cfg, 11)
    X = rng.standard_normal((5, 12))
    seq = compute_factors_seq(w, cfg, X)
    for t in range(5):
        tok = compute_factors(w, cfg, X[t])
        if cfg.dense_query:
            assert tok.q.shape == (3, 4)
            assert np.allclose(tok.q, seq.q[t])
        else:
            assert np.allclose(tok.q.a, seq.q.a[t])
            assert np.allclose(tok.q.b, seq.q.b[t])
        assert np.allclose(tok.k.a, seq.k.a[t])
        assert np.allclose(tok.v.b, seq.v.b[t])


def test_variant_specific_factors(rng):
    X = rng.standard_normal((4, 12))
    cfg = TpaConfig(d_model=12, h=3, d_h=4, r_q=2, r_k=2, r_v=2,
                    variant='shared_b')
    seq = compute_factors_seq(init_weights(cfg, 1), cfg, X)
    assert np.array_equal(seq.k.b, seq.v.b)

    cfg = TpaConfig(d_model=12, h=3, d_h=4, r_q=2, r_k=2, r_v=2,
                    variant='non_contextual_a')
    w = init_weights(cfg, 2)
    seq = compute_factors_seq(w, cfg, X)
    assert all(np.array_equal(seq.k.a[t], w.a_k) for t in range(4))

    cfg = TpaConfig(d_model=12, h=3, d_h=4, r_q=2, r_k=2, r_v=2,
                    variant='non_contextual_b')
    w = init_weights(cfg, 3)
    seq = compute_factors_seq(w, cfg, X)
    assert all(np.array_equal(seq.v.b[t], w.b_v) for t in range(4))


def test_third_order_factor_shapes(rng):
    cfg = TpaConfig(d_model=10, h=2, d_h=8, r_q=2, r_k=1, r_v=3,
                    order='third', d_b=4, d_c=2)
    seq = compute_factors_seq(init_weights(cfg, 5), cfg,
                              rng.standard_normal((3, 10)))
    assert seq.q.b.shape == (3, 2, 4)
    assert seq.q.c.shape == (3, 2, 2)
    assert seq.v.features().shape == (3, 3, 8)


def test_compute_factors_rejects_bad_input(rng):
    cfg = TpaConfig(d_model=10, h=2, d_h=4)
    w = init_weights(cfg, 0)
    with pytest.raises(ConfigError):
        compute_factors(w, cfg, np.ones(9))
    with pytest.raises(ConfigError):
        compute_factors(w, TpaConfig(d_model=10, h=2, d_h=4, r_q=2),
                        np.ones(10))


def test_weights_are_validated():
    cfg = TpaConfig(d_model=6, h=2, d_h=4)
    w = init_weights(cfg, 0)
    tensors = w.tensors()
    tensors['w_aq'] = tensors['w_aq'][:-1]
    with pytest.raises(ConfigError):
        FactorWeights(cfg, **tensors)
    del tensors['w_aq']
    with pytest.raises(ConfigError):
        FactorWeights(cfg, **tensors)


def test_init_weights_is_reproducible():
    cfg = TpaConfig(d_model=6, h=2, d_h=4, r_q=2)
    a, b = init_weights(cfg, 123), init_weights(cfg, 123)
    for name, array in a.tensors().items():
        assert np.array_equal(array, b.tensors()[name])
    c = init_weights(cfg, 124)
    assert not np.array_equal(a.w_aq, c.w_aq)


def test_shared_b_weights_are_aliased(tmp_path):
    cfg = TpaConfig(d_model=6, h=2, d_h=4, r_k=2, r_v=2, variant='shared_b')
    w = init_weights(cfg, 0)
    assert w.w_bv is w.w_bk
    path = str(tmp_path / 'shared.tpa')
    tpa_factor.save_weights(path, w)
    loaded = tpa_factor.load_weights(path)
    assert loaded.cfg == cfg
    assert loaded.w_bv is loaded.w_bk
    assert np.array_equal(loaded.w_bk, w.w_bk)


def test_xavier_bound():
    w = xavier_init(768, 64, 0)
    assert w.shape == (64, 768)
    bound = np.sqrt(6. / (768 + 64))
    assert np.isclose(bound, 0.08492, atol=1e-5)
    assert np.max(np.abs(w)) <= bound
    with pytest.raises(ConfigError):
        xavier_init(0, 4, 0)


def test_xavier_variance():
    w = xavier_init(1000, 1000, 42)
    expected = 2. / 2000
    assert abs(np.var(w) - expected) / expected < 0.02
