import numpy as np
import pytest

from tpamodels.models.attention_ref import (attention_reference, causal_mask,
                                            dense_decode, materialize_sequence)
from tpamodels.models.counters import MacCounter
from tpamodels.models.flash_decode import (DecodeState, decode_loop,
                                           flash_decode, rotate_sequence,
                                           specialized_full_attention)
from tpamodels.models.kv_cache import FactorizedKvCache
from tpamodels.models.tpa_factor import (TpaConfig, compute_factors_seq,
                                         init_weights, materialize)
from tpamodels.postprocessing import cost_model
from tpamodels.utils.errors import (ConfigError, DegenerateRowError,
                                    EmptyInputError, NonFiniteError,
                                    ShapeError)

from conftest import random_block, filled_cache, materialized_cache


def _oracle(q, cache, mask=None):
    K, V = materialized_cache(cache)
    Q = q if isinstance(q, np.ndarray) else materialize(q)
    if mask is None:
        return attention_reference(Q[None], K, V)[0]
    # attend only to the kept tokens
    keep = np.asarray(mask, dtype=bool)
    return attention_reference(Q[None], K[keep], V[keep])[0]


def _spec(cfg):
    kind = 'tpa_kv_only' if cfg.dense_query else 'tpa'
    return cost_model.MechanismSpec(kind, d_model=cfg.d_model, h=cfg.h,
                                    d_h=cfg.d_h, r_q=cfg.r_q, r_k=cfg.r_k,
                                    r_v=cfg.r_v)


@pytest.mark.parametrize('ranks,M', [((1, 1, 1), 300), ((3, 2, 2), 257),
                                     ((16, 2, 2), 130), ((4, 1, 3), 64)])
def test_matches_materialized_attention(rng, ranks, M):
    r_q, r_k, r_v = ranks
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=r_q, r_k=r_k, r_v=r_v)
    cache = filled_cache(rng, cfg, M)
    q = random_block(rng, r_q, 4, 8)
    expected = _oracle(q, cache)
    outs = [flash_decode(q, cache, bs) for bs in (1, 2, 7, 64)]
    for out in outs:
        assert out.shape == (4, 8)
        assert np.max(np.abs(out - expected)) <= 1e-10
        assert np.max(np.abs(out - outs[0])) <= 1e-12


@pytest.mark.slow
def test_long_cache(rng):
    cfg = TpaConfig(d_model=8, h=8, d_h=16, r_q=16, r_k=2, r_v=2)
    cache = filled_cache(rng, cfg, 4096)
    q = random_block(rng, 16, 8, 16)
    expected = _oracle(q, cache)
    outs = [flash_decode(q, cache, bs) for bs in (1, 2, 7, 64)]
    for out in outs:
        assert np.max(np.abs(out - expected)) <= 1e-10
        assert np.max(np.abs(out - outs[-1])) <= 1e-12


def test_value_dim_differs_from_head_dim(rng):
    cfg = TpaConfig(d_model=8, h=3, d_h=4, r_q=2, r_k=2, r_v=3, value_dim=5)
    cache = filled_cache(rng, cfg, 20)
    q = random_block(rng, 2, 3, 4)
    out = flash_decode(q, cache, 6)
    assert out.shape == (3, 5)
    assert np.allclose(out, _oracle(q, cache), rtol=0, atol=1e-10)


def test_rank_one_fast_path(rng):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=5)
    cache = filled_cache(rng, cfg, 50)
    q = random_block(rng, 5, 4, 8)
    fast = flash_decode(q, cache, 16)
    slow = flash_decode(q, cache, 16, fast_path=False)
    assert np.allclose(fast, slow, rtol=0, atol=1e-12)
    assert np.allclose(fast, _oracle(q, cache), rtol=0, atol=1e-10)


@pytest.mark.parametrize('threads', [2, 3, 8])
def test_partitions_merge_to_the_same_result(rng, threads):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=2, r_k=2, r_v=1)
    cache = filled_cache(rng, cfg, 101)
    q = random_block(rng, 2, 4, 8)
    single = flash_decode(q, cache, 8)
    parallel = flash_decode(q, cache, 8, threads=threads)
    assert np.allclose(parallel, single, rtol=0, atol=1e-12)
    assert np.array_equal(parallel, flash_decode(q, cache, 8,
                                                 threads=threads))


def test_value_orders_agree(rng):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=2, r_k=2, r_v=3)
    cache = filled_cache(rng, cfg, 40)
    q = random_block(rng, 2, 4, 8)
    assert np.allclose(flash_decode(q, cache, 8, value_order='mix_first'),
                       flash_decode(q, cache, 8), rtol=0, atol=1e-12)
    with pytest.raises(ConfigError):
        flash_decode(q, cache, 8, value_order='values_last')


def test_mask(rng):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=2, r_k=2, r_v=2)
    cache = filled_cache(rng, cfg, 37)
    q = random_block(rng, 2, 4, 8)
    mask = rng.random(37) < 0.5
    mask[:8] = False
    mask[20] = True
    expected = _oracle(q, cache, mask)
    for bs in (1, 4, 16):
        out = flash_decode(q, cache, bs, mask=mask)
        assert np.max(np.abs(out - expected)) <= 1e-10
    additive = np.where(mask, 0., -np.inf)
    assert np.allclose(flash_decode(q, cache, 4, mask=additive), expected,
                       rtol=0, atol=1e-10)


def _redrawn(rng, cache, rows):
    blk = cache.read_block(0, len(cache))
    arrays = {name: array.copy() for name, array in blk._asdict().items()}
    for array in arrays.values():
        array[rows] = rng.standard_normal(array[rows].shape)
    return FactorizedKvCache.from_arrays(cache.cfg, **arrays)


@pytest.mark.parametrize('ranks,kwargs', [
    ((2, 2, 2), {}),
    ((3, 1, 1), {}),
    ((3, 1, 1), {'fast_path': False}),
    ((2, 2, 3), {'value_order': 'mix_first'}),
    ((2, 2, 2), {'threads': 3}),
])
def test_masked_entries_do_not_leak(rng, ranks, kwargs):
    r_q, r_k, r_v = ranks
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=r_q, r_k=r_k, r_v=r_v)
    cache = filled_cache(rng, cfg, 41)
    q = random_block(rng, r_q, 4, 8)
    mask = rng.random(41) < 0.5
    mask[:9] = False
    mask[30] = True
    redrawn = _redrawn(rng, cache, ~mask)
    assert not np.array_equal(redrawn.read_block(0, 41).a_k,
                              cache.read_block(0, 41).a_k)
    for bs in (1, 4, 16):
        out = flash_decode(q, cache, bs, mask=mask, **kwargs)
        assert np.array_equal(flash_decode(q, redrawn, bs, mask=mask,
                                           **kwargs), out)
    # the same redraw is visible once the rows are attended to
    assert not np.array_equal(flash_decode(q, redrawn, 4, **kwargs),
                              flash_decode(q, cache, 4, **kwargs))


def test_degenerate_inputs(rng):
    cfg = TpaConfig(d_model=8, h=2, d_h=4)
    q = random_block(rng, 1, 2, 4)
    with pytest.raises(EmptyInputError):
        flash_decode(q, FactorizedKvCache(cfg))
    cache = filled_cache(rng, cfg, 5)
    with pytest.raises(DegenerateRowError):
        flash_decode(q, cache, mask=np.zeros(5, dtype=bool))
    nan_q = random_block(rng, 1, 2, 4)
    nan_q.a[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        flash_decode(nan_q, cache)
    with pytest.raises(ShapeError):
        flash_decode(random_block(rng, 2, 2, 4), cache)
    with pytest.raises(ConfigError):
        flash_decode(q, cache, block_size=0)


def test_kv_only_takes_a_dense_query(rng):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_k=2, r_v=2, variant='kv_only')
    cache = filled_cache(rng, cfg, 30)
    q = rng.standard_normal((4, 8))
    assert np.allclose(flash_decode(q, cache, 7), _oracle(q, cache),
                       rtol=0, atol=1e-10)
    with pytest.raises(ConfigError):
        flash_decode(random_block(rng, 1, 4, 8), cache)
    with pytest.raises(ShapeError):
        flash_decode(q[:, :4], cache)


def test_running_maximum_is_monotone(rng):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=2, r_k=2, r_v=2)
    cache = filled_cache(rng, cfg, 50)
    trace = []
    flash_decode(random_block(rng, 2, 4, 8), cache, 4, trace=trace)
    assert len(trace) == 13
    for before, after in zip(trace, trace[1:]):
        assert np.all(after >= before)


def test_decode_state_merge_equals_single_pass(rng):
    logits = rng.standard_normal((2, 10)) * 5.
    values = rng.standard_normal((10, 3))

    def block(lo, hi):
        m = logits[:, lo:hi].max(axis=1)
        p = np.exp(logits[:, lo:hi] - m[:, None])
        return m, p.sum(axis=1), p @ values[lo:hi]

    whole = DecodeState.empty((), 2, 3).fuse(*block(0, 10))
    left = DecodeState.empty((), 2, 3).fuse(*block(0, 4))
    right = DecodeState.empty((), 2, 3).fuse(*block(4, 10))
    merged = left.merge(right).merge(DecodeState.empty((), 2, 3))
    assert np.allclose(merged.finalize(1.), whole.finalize(1.),
                       rtol=0, atol=1e-13)
    with pytest.raises(DegenerateRowError):
        DecodeState.empty((), 2, 3).finalize(1.)


@pytest.mark.parametrize('ranks', [(1, 1, 1), (2, 2, 2), (16, 1, 1),
                                   (3, 2, 1)])
@pytest.mark.parametrize('value_order', ['weight_first', 'mix_first'])
def test_counters(rng, ranks, value_order):
    r_q, r_k, r_v = ranks
    cfg = TpaConfig(d_model=8, h=8, d_h=16, r_q=r_q, r_k=r_k, r_v=r_v)
    M = 23
    cache = filled_cache(rng, cfg, M)
    counter = MacCounter()
    flash_decode(random_block(rng, r_q, 8, 16), cache, 5, counter=counter,
                 value_order=value_order)
    h, D = cfg.h, cfg.d_h
    assert counter.mac_score == M * r_q * r_k * D
    assert counter.mac_mix == M * h * r_q * r_k
    assert counter.mac_value == M * h * r_v * D
    check = cost_model.specialized_speedup_holds(_spec(cfg))
    assert counter.leading == M * check.lhs
    if value_order == 'weight_first':
        assert counter.mac_aux == M * (h * r_k + h * r_v)
        assert counter.total == M * cost_model.decode_flops(
            _spec(cfg)).attention_coeff
    else:
        assert counter.mac_aux == M * (h * r_k + h * D)


def test_counters_with_partitions_and_dense_query(rng):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=2, r_k=2, r_v=2)
    cache = filled_cache(rng, cfg, 40)
    single, split = MacCounter(), MacCounter()
    q = random_block(rng, 2, 4, 8)
    flash_decode(q, cache, 4, counter=single)
    flash_decode(q, cache, 4, counter=split, threads=3)
    assert single == split

    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_k=2, r_v=3, variant='kv_only')
    cache = filled_cache(rng, cfg, 17)
    counter = MacCounter()
    flash_decode(rng.standard_normal((4, 8)), cache, 4, counter=counter)
    assert counter.total == 17 * cost_model.decode_flops(
        _spec(cfg)).attention_coeff


def test_speed_condition_against_counted_work(rng):
    grid = [(r_q, r_k, r_v, h)
            for r_q in (1, 2, 4, 8, 16)
            for r_k, r_v in ((1, 1), (1, 2), (2, 1), (2, 2), (1, 4))
            for h in (8, 32)]
    assert len(grid) == 50
    M, D = 4, 64
    for r_q, r_k, r_v, h in grid:
        cfg = TpaConfig(d_model=8, h=h, d_h=D, r_q=r_q, r_k=r_k, r_v=r_v)
        cache = filled_cache(rng, cfg, M)
        factored, dense = MacCounter(), MacCounter()
        flash_decode(random_block(rng, r_q, h, D), cache, counter=factored)
        K, V = materialized_cache(cache)
        dense_decode(rng.standard_normal((h, D)), K, V, dense)
        check = cost_model.specialized_speedup_holds(_spec(cfg))
        counted = factored.leading / M
        assert abs(counted - check.lhs) <= 0.05 * check.lhs
        assert dense.total == M * check.rhs
        assert (factored.leading < dense.total) == check.holds


@pytest.mark.parametrize('variant,kwargs', [
    ('full', {}), ('kv_only', {}), ('non_contextual_a', {}),
    ('non_contextual_b', {}), ('shared_b', {}),
    ('full', {'order': 'third', 'd_h': 8, 'd_b': 4, 'd_c': 2}),
    ('kv_only', {'order': 'third', 'd_h': 8, 'd_b': 2, 'd_c': 4}),
])
def test_decode_loop_matches_full_attention(rng, variant, kwargs):
    params = {'d_model': 16, 'h': 4, 'd_h': 6, 'r_q': 3, 'r_k': 2,
              'r_v': 2, 'variant': variant}
    params.update(kwargs)
    cfg = TpaConfig(**params)
    weights = init_weights(cfg, 9)
    T = 70
    X = rng.standard_normal((T, 16))
    result = decode_loop(X, weights, cfg, block_size=16)
    assert result.outputs.shape == (T, 4, cfg.value_dim)
    assert len(result.cache) == T

    q, k, v = rotate_sequence(cfg, compute_factors_seq(weights, cfg, X),
                              np.arange(T))
    full = specialized_full_attention(q, k, v, causal_mask(T, T), 32)
    assert np.max(np.abs(result.outputs - full)) <= 1e-10

    reference = attention_reference(materialize_sequence(q),
                                    materialize_sequence(k),
                                    materialize_sequence(v), causal=True)
    assert np.max(np.abs(full - reference)) <= 1e-10


@pytest.mark.slow
def test_decode_loop_long_sequence(rng):
    cfg = TpaConfig(d_model=16, h=4, d_h=8, r_q=4, r_k=2, r_v=2)
    weights = init_weights(cfg, 4)
    T = 256
    X = rng.standard_normal((T, 16))
    outputs = decode_loop(X, weights, cfg, block_size=32).outputs
    q, k, v = rotate_sequence(cfg, compute_factors_seq(weights, cfg, X),
                              np.arange(T))
    full = specialized_full_attention(q, k, v, causal_mask(T, T))
    assert np.max(np.abs(outputs - full)) <= 1e-10


def test_decode_loop_is_shift_invariant(rng):
    cfg = TpaConfig(d_model=16, h=4, d_h=8, r_q=2, r_k=2, r_v=1)
    weights = init_weights(cfg, 1)
    X = rng.standard_normal((12, 16))
    base = decode_loop(X, weights, cfg, block_size=4).outputs
    shifted = decode_loop(X, weights, cfg, block_size=4,
                          start_position=777).outputs
    assert np.allclose(base, shifted, rtol=0, atol=1e-9)


def test_full_attention_rejects_bad_input(rng):
    cfg = TpaConfig(d_model=16, h=4, d_h=8)
    seq = compute_factors_seq(init_weights(cfg, 0), cfg,
                              rng.standard_normal((4, 16)))
    q, k, v = rotate_sequence(cfg, seq, np.arange(4))
    with pytest.raises(DegenerateRowError):
        specialized_full_attention(q, k, v, np.zeros((4, 4), dtype=bool))
    with pytest.raises(ShapeError):
        specialized_full_attention(q, k, v.replace(a=v.a[:3], b=v.b[:3]))
