"""
Self-checks run by the `verify` command.

Every suite takes a numpy Generator and a set of injected faults
and returns a list of result dicts

    {'property': str, 'passed': bool, 'max_err': float or None}

The checks use small random configurations so that a full run
takes seconds. The 'corrupt-mask' fault unmasks one cache entry
that should be hidden, which the mask properties must detect.
"""

import logging
import os
import tempfile

import numpy as np
from scipy.linalg import svdvals

from tpamodels.utils import linalg
from tpamodels.models import attention_ref, kv_cache, rope, tpa_factor
from tpamodels.models import flash_decode as fd
from tpamodels.models.counters import MacCounter
from tpamodels.models.t6_block import block_forward, init_block_weights
from tpamodels.models.tpa_factor import TpaConfig, FactorBlock
from . import cost_model

logger = logging.getLogger(__name__)

available_faults = ['corrupt-mask']


def _result(name, err, tol):
    err = float(err)
    return {'property': name, 'passed': bool(err <= tol), 'max_err': err}


def _check(name, ok):
    return {'property': name, 'passed': bool(ok), 'max_err': None}


def _random_block(rng, rank, h, d):
    return FactorBlock(rng.standard_normal((rank, h)),
                       rng.standard_normal((rank, d)))


def suite_linalg(rng, faults):
    a = rng.standard_normal((7, 5))
    b = rng.standard_normal((5, 3))
    c = rng.standard_normal((3, 4))
    loops = np.array([[sum(a[i, p] * b[p, j] for p in range(5))
                       for j in range(3)] for i in range(7)])
    probs, lse = linalg.softmax_lse(rng.standard_normal((4, 9)))
    logits = rng.standard_normal(9)
    p1, _ = linalg.softmax_lse(logits)
    p2, _ = linalg.softmax_lse(logits + 123.)
    u, v = rng.standard_normal(4), rng.standard_normal(6)
    return [
        _result('matmul matches triple loop',
                np.max(np.abs(linalg.matmul(a, b) - loops)), 1e-12),
        _result('matmul associativity',
                np.max(np.abs(linalg.matmul(linalg.matmul(a, b), c)
                              - linalg.matmul(a, linalg.matmul(b, c)))),
                1e-10),
        _result('softmax rows sum to one',
                np.max(np.abs(probs.sum(axis=1) - 1.)), 1e-12),
        _result('softmax shift invariance', np.max(np.abs(p1 - p2)), 1e-12),
        _result('outer equals column times row',
                np.max(np.abs(linalg.outer(u, v) - linalg.matmul(
                    u[:, None], v[None, :]))), 0.),
    ]


def suite_tpa_factor(rng, faults):
    results = []
    err = 0.
    for _ in range(50):
        rank, h, d = rng.integers(1, 6, size=3) * np.array([1, 1, 2])
        block = _random_block(rng, rank, h, d)
        outer_sum = sum(linalg.outer(block.a[r], block.b[r])
                        for r in range(rank)) / rank
        err = max(err, np.max(np.abs(tpa_factor.materialize(block)
                                     - outer_sum)))
    results.append(_result('materialize equals outer-product sum', err,
                           1e-12))

    rank_ok = True
    for rank in (1, 2, 3):
        block = _random_block(rng, rank, 8, 16)
        s = svdvals(tpa_factor.materialize(block))
        rank_ok &= int(np.sum(s > 1e-10 * s[0])) <= rank
    results.append(_check('rank bounded by R', rank_ok))

    cfg = TpaConfig(d_model=12, h=3, d_h=4, r_q=2, r_k=2, r_v=2,
                    variant='shared_b')
    w = tpa_factor.init_weights(cfg, int(rng.integers(2 ** 31)))
    tok = tpa_factor.compute_factors(w, cfg, rng.standard_normal(12))
    results.append(_check('shared_b keys and values share B',
                          np.array_equal(tok.k.b, tok.v.b)))

    cfg3 = TpaConfig(d_model=10, h=2, d_h=6, r_q=2, r_k=2, r_v=2,
                     order='third', d_b=2, d_c=3)
    block = FactorBlock(rng.standard_normal((2, 2)),
                        rng.standard_normal((2, 2)),
                        rng.standard_normal((2, 3)))
    results.append(_result(
        'third order materialization',
        np.max(np.abs(tpa_factor.materialize(block) -
                      tpa_factor.materialize_third_order(block, d_h=cfg3.d_h
                                                         ))), 1e-12))
    return results


def suite_rope(rng, faults):
    table = rope.RopeTable(16)
    q = rng.standard_normal((3, 16))
    k = rng.standard_normal((3, 16))
    err = 0.
    for t, s in rng.integers(0, 1024, size=(20, 2)):
        lhs = rope.apply_rope_rows(table, t, q) @ \
            rope.apply_rope_rows(table, s, k).T
        rhs = rope.apply_rope_rows(table, t - s, q) @ k.T
        err = max(err, np.max(np.abs(lhs - rhs)))
    norms = np.linalg.norm(rope.apply_rope_rows(table, 77, q), axis=1)
    hot = rope.higher_order_transform(rope.RopeTable(4), 5, 3)
    return [
        _result('relative position identity', err, 1e-10),
        _result('rotation preserves norms',
                np.max(np.abs(norms - np.linalg.norm(q, axis=1))), 1e-12),
        _result('higher order transform is orthogonal',
                np.max(np.abs(hot @ hot.T - np.eye(12))), 1e-12),
    ]


def suite_attention_ref(rng, faults):
    T, d_model, h, d_h = 5, 8, 4, 6
    X = rng.standard_normal((T, d_model))
    w_q = rng.standard_normal((h, d_model, d_h))
    w_k = rng.standard_normal((h, d_model, d_h))
    w_v = rng.standard_normal((h, d_model, d_h))

    def via_tpa(w):
        seq = tpa_factor.compute_factors_seq(w, w.cfg, X)
        return attention_ref.attention_reference(
            *(attention_ref.materialize_sequence(f) for f in seq),
            causal=True)

    native = attention_ref.mha_forward(X, w_q, w_k, w_v, causal=True)
    mqa = attention_ref.mqa_forward(X, w_q, w_k[0], w_v[0], causal=True)
    gqa = attention_ref.gqa_forward(X, w_q, w_k[:2], w_v[:2], 2,
                                    causal=True)
    return [
        _result('MHA as TPA', np.max(np.abs(
            via_tpa(attention_ref.mha_as_tpa(w_q, w_k, w_v)) - native)),
            1e-12),
        _result('MQA as TPA', np.max(np.abs(
            via_tpa(attention_ref.mqa_as_tpa(w_q, w_k[0], w_v[0])) - mqa)),
            1e-12),
        _result('GQA as TPA', np.max(np.abs(
            via_tpa(attention_ref.gqa_as_tpa(w_q, w_k[:2], w_v[:2], 2))
            - gqa)), 1e-12),
    ]


def suite_kv_cache(rng, faults):
    cfg = TpaConfig(d_model=16, h=32, d_h=64, r_q=1, r_k=1, r_v=1)
    results = [_check('compression ratio of (1,1) ranks',
                      kv_cache.compression_ratio(cfg) == 0.046875)]
    small = TpaConfig(d_model=8, h=2, d_h=4, r_q=2, r_k=2, r_v=1)
    cache = kv_cache.FactorizedKvCache(small, capacity=1)
    for _ in range(9):
        cache.append(_random_block(rng, 2, 2, 4), _random_block(rng, 1, 2, 4))
    results.append(_check('nbytes equals bytes_per_token times length',
                          cache.nbytes(2) == 9 * kv_cache.bytes_per_token(
                              small, 2)))
    fd_, path = tempfile.mkstemp(suffix='.tpa')
    os.close(fd_)
    try:
        cache.save(path)
        restored = kv_cache.FactorizedKvCache.load(path)
        same = all(np.array_equal(x, y) for x, y in
                   zip(cache.read_block(0, 9), restored.read_block(0, 9)))
    finally:
        os.remove(path)
    results.append(_check('snapshot round trip is bit exact', same))
    return results


def _filled_cache(rng, cfg, length):
    cache = kv_cache.FactorizedKvCache(cfg)
    table = rope.rope_table_for(cfg)
    for _ in range(length):
        k = _random_block(rng, cfg.r_k, cfg.h, cfg.d_h)
        cache.append(rope.pre_rotate_key(k, cache.next_position, table),
                     _random_block(rng, cfg.r_v, cfg.h, cfg.value_dim))
    return cache


def _redraw_rows(rng, cache, rows):
    """Copy of a second order full cache with the given rows redrawn."""
    blk = cache.read_block(0, len(cache))
    arrays = {}
    for name, array in blk._asdict().items():
        array = array.copy()
        array[rows] = rng.standard_normal(array[rows].shape)
        arrays[name] = array
    return kv_cache.FactorizedKvCache.from_arrays(
        cache.cfg, start_position=cache.start_position, **arrays)


def _oracle_decode(q, cache, mask=None):
    M = len(cache)
    blk = cache.read_block(0, M)
    K = np.einsum('msh,msd->mhd', blk.a_k, blk.b_k) / cache.cfg.r_k
    V = np.einsum('muh,mue->mhe', blk.a_v, blk.b_v) / cache.cfg.r_v
    Q = tpa_factor.materialize(q)
    logits = np.einsum('hd,mhd->hm', Q, K) / np.sqrt(cache.cfg.d_h)
    probs, _ = linalg.softmax_lse(logits, mask)
    return np.einsum('hm,mhe->he', probs, V)


def suite_flash_decode(rng, faults):
    cfg = TpaConfig(d_model=8, h=4, d_h=8, r_q=3, r_k=2, r_v=2)
    cache = _filled_cache(rng, cfg, 37)
    q = _random_block(rng, cfg.r_q, cfg.h, cfg.d_h)
    oracle = _oracle_decode(q, cache)
    outs = [fd.flash_decode(q, cache, bs) for bs in (1, 5, 16, 64)]

    mask = rng.random(37) < 0.6
    mask[0], mask[1] = True, False
    used = mask.copy()
    if 'corrupt-mask' in faults:
        used[np.flatnonzero(~mask)[0]] = True
    masked = fd.flash_decode(q, cache, 8, mask=used)
    redrawn = _redraw_rows(rng, cache, ~mask)
    leaked = fd.flash_decode(q, redrawn, 8, mask=used)

    trace = []
    fd.flash_decode(q, cache, 4, trace=trace)
    monotone = all(np.all(b >= a) for a, b in zip(trace, trace[1:]))

    counter = MacCounter()
    fd.flash_decode(q, cache, 8, counter=counter)
    spec = cost_model.MechanismSpec('tpa', d_model=cfg.d_model, h=cfg.h,
                                    d_h=cfg.d_h, r_q=cfg.r_q, r_k=cfg.r_k,
                                    r_v=cfg.r_v)
    coeff = cost_model.decode_flops(spec).attention_coeff
    return [
        _result('matches materialized attention',
                np.max(np.abs(outs[0] - oracle)), 1e-10),
        _result('block size invariance',
                max(np.max(np.abs(o - outs[0])) for o in outs), 1e-12),
        _result('mask correctness',
                np.max(np.abs(masked - _oracle_decode(q, cache, mask))),
                1e-10),
        _check('masked entries do not leak',
               np.array_equal(leaked, masked)),
        _check('running maximum is monotone', monotone),
        _check('counters equal the cost coefficient',
               counter.total == coeff * len(cache)),
    ]


def suite_cost_model(rng, faults):
    specs = {s.label: s for s in cost_model.presets['example-i']()}
    expected = {'MHA': (16777216, 4096, 12582912, 4096),
                'MLA': (9764864, 288, 19464192, 17408),
                'TPA (16,1,1)': (7733248, 192, 3538944, 3648)}
    results = []
    for label, values in expected.items():
        r = cost_model.cost_report(specs[label])
        got = (r.params, r.kv_numbers_per_token, r.projection_flops,
               r.attention_coeff)
        results.append(_check(f'example I {label}', got == values))
    return results


def suite_t6_block(rng, faults):
    cfg = TpaConfig(d_model=12, h=2, d_h=4, r_q=2, r_k=1, r_v=1)
    weights = init_block_weights(cfg, int(rng.integers(2 ** 31)), d_ff=16)
    X = rng.standard_normal((6, 12))
    base = block_forward(X, weights, cfg)
    shifted = block_forward(X, weights, cfg, position_offset=1000)
    return [_result('global position shift invariance',
                    np.max(np.abs(base - shifted)), 1e-9)]
