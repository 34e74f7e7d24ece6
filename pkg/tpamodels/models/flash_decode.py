"""
Blocked, numerically stable attention directly on the factors.

The cache is scanned in blocks of `block_size` tokens. For every
block the routines

1) contract the query and key token factors, head-shared:
   P[m, r, s] = b_r^Q . b~_s^K(m)
2) mix the ranks per head:
   L[i, m] = s_total s_Q s_K sum_{r,s} a^Q_{r,i} a^K_{s,i}(m) P[m, r, s]
3) mask, take the block maximum and the block exponentials,
4) aggregate the values,
5) fuse the block into a running (y, lse, m) state with the
   usual log-sum-exp rescaling.

The output is s_V y / lse with s_Q = 1 / R_Q, s_K = 1 / R_K,
s_V = 1 / R_V and s_total = 1 / sqrt(d_h). No h x d_h key or value
matrix is ever formed.

Two value orders are available. 'weight_first' multiplies A_V by
the probabilities before contracting with B_V (H R_V + H R_V E
multiply-adds per token). 'mix_first' forms the block values
A_V^T B_V first and then weights them (H R_V E + H E).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import numba as nb

from tpamodels.utils.linalg import MASK_VALUE, keep_mask
from tpamodels.utils.errors import (ConfigError, DegenerateRowError,
                                    EmptyInputError, NonFiniteError,
                                    ShapeError)
from .attention_ref import causal_mask
from .counters import MacCounter
from .kv_cache import FactorizedKvCache, KvBlock
from .rope import (apply_rope_positions, pre_rotate_key,
                   rope_table_for)
from .tpa_factor import FactorBlock, FactorStack, compute_factors_seq

logger = logging.getLogger(__name__)

VALUE_ORDERS = ('weight_first', 'mix_first')

__all__ = ['DecodeState', 'DecodeResult', 'flash_decode',
           'specialized_full_attention', 'decode_loop', 'causal_mask']


@dataclass
class DecodeState:
    """
    Running state of the online softmax.

    y: (..., h, E) unnormalised output, relative to exp(m)
    lse: (..., h) running sum of exponentials, relative to exp(m)
    m: (..., h) running maximum of the logits (-inf before the
       first unmasked logit)
    """
    y: np.ndarray
    lse: np.ndarray
    m: np.ndarray

    @classmethod
    def empty(cls, lead, h, value_dim):
        return cls(np.zeros(lead + (h, value_dim)), np.zeros(lead + (h,)),
                   np.full(lead + (h,), -np.inf))

    @property
    def is_empty(self):
        return bool(np.all(np.isneginf(self.m)))

    def fuse(self, m_blk, s_blk, y_blk):
        """
        Fold in a block with maximum m_blk, exponential sum s_blk
        and weighted values y_blk, both relative to exp(m_blk).
        Entries with m_blk == -inf carry no information.
        """
        m_new = np.maximum(self.m, m_blk)
        with np.errstate(invalid='ignore'):
            alpha = np.where(np.isneginf(self.m), 0.,
                             np.exp(self.m - m_new))
            beta = np.where(np.isneginf(m_blk), 0.,
                            np.exp(m_blk - m_new))
        self.y = self.y * alpha[..., None] + y_blk * beta[..., None]
        self.lse = self.lse * alpha + s_blk * beta
        self.m = m_new
        return self

    def merge(self, other):
        """Fold in the state of a later partition."""
        if other.is_empty:
            return self
        return self.fuse(other.m, other.lse, other.y)

    def finalize(self, s_v):
        if np.any(self.lse == 0.):
            raise DegenerateRowError('flash attention: a query row has '
                                     'no unmasked key')
        return s_v * self.y / self.lse[..., None]


class DecodeResult(NamedTuple):
    outputs: np.ndarray
    cache: FactorizedKvCache


class _Query(NamedTuple):
    """Either (a, feats) for factor queries or dense, each with a
    leading query axis n."""
    a: np.ndarray
    feats: np.ndarray
    dense: np.ndarray

    @property
    def n(self):
        return (self.dense if self.a is None else self.a).shape[0]


class _StackSource:
    """Adapter giving FactorStacks the read_block() of the cache."""

    def __init__(self, k, v):
        self._k_feats = k.features()
        self._v_feats = v.features()
        self._k, self._v = k, v

    def __len__(self):
        return len(self._k)

    def read_block(self, start, stop):
        return KvBlock(self._k.a[start:stop], self._k_feats[start:stop],
                       self._v.a[start:stop], self._v_feats[start:stop])


@nb.njit()
def _rank1_block(aq, fq, ak, bk, av, bv, valid, scale):
    """
    Block step for R_K = R_V = 1 and a single query: for each
    cached token the score is a Hadamard product of the head
    vectors a^K and (A_Q^T B_Q b^K), no rank mixing tensor is
    formed.
    """
    n_blk = bk.shape[0]
    r_q, h = aq.shape
    d = fq.shape[1]
    e = bv.shape[1]
    logits = np.empty((h, n_blk))
    for m in range(n_blk):
        for i in range(h):
            logits[i, m] = 0.
        for r in range(r_q):
            dot = 0.
            for k in range(d):
                dot += fq[r, k] * bk[m, k]
            for i in range(h):
                logits[i, m] += aq[r, i] * dot
        for i in range(h):
            logits[i, m] = logits[i, m] * ak[m, i] * scale
    m_blk = np.full(h, -np.inf)
    s_blk = np.zeros(h)
    y_blk = np.zeros((h, e))
    for i in range(h):
        for m in range(n_blk):
            if valid[m] and logits[i, m] > m_blk[i]:
                m_blk[i] = logits[i, m]
        for m in range(n_blk):
            if valid[m]:
                p = np.exp(logits[i, m] - m_blk[i])
                s_blk[i] += p
                w = p * av[m, i]
                for k in range(e):
                    y_blk[i, k] += w * bv[m, k]
    return m_blk, s_blk, y_blk


def _block_logits(query, blk, scale, counter):
    n_blk, r_k, h = blk.a_k.shape
    n = query.n
    if query.a is None:
        P = np.einsum('nhd,msd->nmhs', query.dense, blk.b_k)
        logits = np.einsum('nmhs,msh->nhm', P, blk.a_k) * scale
        if counter is not None:
            d = blk.b_k.shape[2]
            counter.add(score=n * n_blk * h * r_k * d,
                        aux=n * n_blk * h * r_k)
        return logits
    r_q = query.a.shape[1]
    P = np.einsum('nrd,msd->nmrs', query.feats, blk.b_k)
    mixed = np.einsum('nrh,nmrs->nmhs', query.a, P)
    logits = np.einsum('nmhs,msh->nhm', mixed, blk.a_k) * scale
    if counter is not None:
        d = blk.b_k.shape[2]
        counter.add(score=n * n_blk * r_q * r_k * d,
                    mix=n * n_blk * h * r_q * r_k,
                    aux=n * n_blk * h * r_k)
    return logits


def _block_values(p, blk, value_order, counter):
    n, h, n_blk = p.shape
    r_v, e = blk.b_v.shape[1:]
    if value_order == 'weight_first':
        weighted = p[:, :, :, None] * blk.a_v.transpose(2, 0, 1)[None]
        y_blk = np.einsum('nhmu,mue->nhe', weighted, blk.b_v)
        if counter is not None:
            counter.add(value=n * h * n_blk * r_v * e,
                        aux=n * h * n_blk * r_v)
    else:
        values = np.einsum('muh,mue->mhe', blk.a_v, blk.b_v)
        y_blk = np.einsum('nhm,mhe->nhe', p, values)
        if counter is not None:
            counter.add(value=h * n_blk * r_v * e, aux=n * h * n_blk * e)
    return y_blk


def _run_blocks(query, source, keep, starts, block_size, scale, h,
                value_dim, value_order, fast_path, trace):
    """Scan the blocks beginning at `starts` into a fresh state."""
    counter = MacCounter()
    state = DecodeState.empty((query.n,), h, value_dim)
    total = len(source)
    for start in starts:
        stop = min(start + block_size, total)
        valid = keep[:, start:stop]
        if not valid.any():
            continue
        blk = source.read_block(start, stop)
        if fast_path:
            m_blk, s_blk, y_blk = _rank1_block(
                np.ascontiguousarray(query.a[0]),
                np.ascontiguousarray(query.feats[0]),
                np.ascontiguousarray(blk.a_k[:, 0, :]),
                np.ascontiguousarray(blk.b_k[:, 0, :]),
                np.ascontiguousarray(blk.a_v[:, 0, :]),
                np.ascontiguousarray(blk.b_v[:, 0, :]),
                np.ascontiguousarray(valid[0]), scale)
            n_blk = stop - start
            r_q, d = query.feats.shape[1:]
            counter.add(score=n_blk * r_q * d, mix=n_blk * h * r_q,
                        value=n_blk * h * value_dim, aux=2 * n_blk * h)
            state.fuse(m_blk[None], s_blk[None], y_blk[None])
        else:
            logits = _block_logits(query, blk, scale, counter)
            valid3 = valid[:, None, :]
            logits = np.where(valid3, logits, MASK_VALUE)
            has_valid = valid.any(axis=1)[:, None]
            m_blk = np.where(has_valid, logits.max(axis=2), -np.inf)
            m_safe = np.where(has_valid, m_blk, 0.)
            p = np.where(valid3, np.exp(logits - m_safe[..., None]), 0.)
            y_blk = _block_values(p, blk, value_order, counter)
            state.fuse(m_blk, p.sum(axis=2), y_blk)
        if trace is not None:
            trace.append(state.m.copy())
    return state, counter


def _attend(query, source, keep, block_size, scale, s_v, value_dim,
            counter, threads, value_order, fast_path, trace):
    total = len(source)
    if block_size < 1:
        raise ConfigError('flash attention: block_size must be positive')
    if value_order not in VALUE_ORDERS:
        raise ConfigError(f'flash attention: unknown value order '
                          f'{value_order!r}')
    h = query.dense.shape[1] if query.a is None else query.a.shape[2]
    starts = list(range(0, total, block_size))
    threads = max(1, min(int(threads), len(starts)))
    args = (query, source, keep)
    rest = (block_size, scale, h, value_dim, value_order, fast_path)

    if threads == 1:
        state, local = _run_blocks(*args, starts, *rest, trace)
        parts = [(state, local)]
    else:
        groups = [list(g) for g in np.array_split(starts, threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda g: _run_blocks(*args, g, *rest, None), groups))
        state = DecodeState.empty((query.n,), h, value_dim)
        # ascending partition order keeps the result reproducible
        for part, _ in parts:
            state.merge(part)
    logger.debug('flash attention: %d tokens, %d blocks, %d threads',
                 total, len(starts), threads)
    if counter is not None:
        for _, local in parts:
            counter.merge(local)
    return state.finalize(s_v)


def _check_finite(name, *arrays):
    for array in arrays:
        if array is not None and not np.all(np.isfinite(array)):
            raise NonFiniteError(f'{name}: non-finite factor entries')


def _scales(cfg_like, d, dense):
    r_q, r_k, r_v = cfg_like
    s_q = 1. if dense else 1. / r_q
    return s_q * (1. / r_k) / np.sqrt(d), 1. / r_v


def flash_decode(q, cache, block_size=256, mask=None, counter=None,
                 threads=1, value_order='weight_first', fast_path=True,
                 trace=None):
    """
    Attention output of one query against a factorized cache.

    Parameters:
    -----------

    q: FactorBlock or ndarray
        Query factors (B already rotated to the query position),
        or a dense (h, d_h) rotated query for 'kv_only'.

    cache: FactorizedKvCache

    block_size: int
        Number of cached tokens processed per block.

    mask: ndarray, optional
        Length-M boolean (True = attend) or additive mask.

    counter: MacCounter, optional
        Accumulates the multiply-adds actually performed.

    threads: int
        Number of contiguous cache partitions processed in
        parallel and merged in ascending order.

    value_order: str
        'weight_first' (default) or 'mix_first'.

    fast_path: bool
        Use the rank-1 kernel when R_K = R_V = 1, the query is
        factorized and value_order is 'weight_first'.

    trace: list, optional
        Receives a copy of the running maximum after every block
        (single partition only).

    Returns:
    --------

    out: ndarray, shape (h, value_dim)

    Raises:
    -------
    EmptyInputError: if the cache is empty.
    NonFiniteError: if the query has non-finite entries.
    """
    cfg = cache.cfg
    total = len(cache)
    if total == 0:
        raise EmptyInputError('flash_decode: empty cache')
    if isinstance(q, FactorBlock):
        if cfg.dense_query:
            raise ConfigError('flash_decode: kv_only expects a dense query')
        feats = q.features()
        if q.a.shape != (cfg.r_q, cfg.h) or feats.shape != (cfg.r_q,
                                                            cfg.d_h):
            raise ShapeError('flash_decode: query factors do not match '
                             'the cache configuration')
        _check_finite('flash_decode', q.a, feats)
        query = _Query(q.a[None], feats[None], None)
    else:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (cfg.h, cfg.d_h):
            raise ShapeError(f'flash_decode: dense query has shape '
                             f'{q.shape}, expected ({cfg.h}, {cfg.d_h})')
        _check_finite('flash_decode', q)
        query = _Query(None, None, q[None])
    keep = keep_mask(None if mask is None else np.asarray(mask)[None],
                     (1, total))
    if not keep.any():
        raise DegenerateRowError('flash_decode: every cache entry is masked')

    scale, s_v = _scales((cfg.r_q, cfg.r_k, cfg.r_v), cfg.d_h,
                         query.a is None)
    use_fast = (fast_path and query.a is not None and cfg.r_k == 1
                and cfg.r_v == 1 and value_order == 'weight_first')
    return _attend(query, cache, keep, block_size, scale, s_v,
                   cfg.value_dim, counter, threads, value_order,
                   use_fast, trace)[0]


def specialized_full_attention(q, k, v, mask=None, block_size=256,
                               counter=None, value_order='weight_first'):
    """
    Attention of T_q factorized queries over T_k factorized keys
    and values, blockwise over T_k, without materializing heads.

    Parameters:
    -----------

    q: FactorStack or ndarray
        Query factors (T_q tokens, rotated), or dense rotated
        queries of shape (T_q, h, d_h).

    k, v: FactorStack
        Key factors (rotated) and value factors of T_k tokens.

    mask: ndarray, optional
        (T_q, T_k) boolean or additive mask, e.g.
        causal_mask(T_q, T_k).

    Returns:
    --------

    out: ndarray, shape (T_q, h, E)

    Raises:
    -------
    EmptyInputError, NonFiniteError, ShapeError,
    DegenerateRowError (a query row with every key masked).
    """
    if len(k) == 0 or len(v) == 0:
        raise EmptyInputError('specialized_full_attention: empty keys')
    if len(k) != len(v):
        raise ShapeError('specialized_full_attention: keys and values '
                         'differ in length')
    _check_finite('specialized_full_attention', k.a, k.b, k.c, v.a, v.b,
                  v.c)
    if isinstance(q, FactorStack):
        if len(q) == 0:
            raise EmptyInputError('specialized_full_attention: no queries')
        _check_finite('specialized_full_attention', q.a, q.b, q.c)
        query = _Query(q.a, q.features(), None)
        d = query.feats.shape[2]
        dense = False
        r_q = q.rank
    else:
        dense_q = np.asarray(q, dtype=np.float64)
        if dense_q.ndim != 3 or dense_q.shape[0] == 0:
            raise EmptyInputError('specialized_full_attention: no queries')
        _check_finite('specialized_full_attention', dense_q)
        query = _Query(None, None, dense_q)
        d = dense_q.shape[2]
        dense = True
        r_q = 1
    source = _StackSource(k, v)
    if source.read_block(0, 1).b_k.shape[2] != d:
        raise ShapeError('specialized_full_attention: query and key '
                         'feature lengths differ')
    keep = keep_mask(mask, (query.n, len(source)))
    if not np.all(keep.any(axis=1)):
        raise DegenerateRowError('specialized_full_attention: a query row '
                                 'is fully masked')
    scale, s_v = _scales((r_q, k.rank, v.rank), d, dense)
    value_dim = source.read_block(0, 1).b_v.shape[2]
    return _attend(query, source, keep, block_size, scale, s_v, value_dim,
                   counter, 1, value_order, False, None)


def _rotate_dense(cfg, table, positions, q):
    """
    Rotate dense (T, h, d_h) queries. For the third order the
    features are vec(b c^T), so every contiguous d_b chunk is
    rotated.
    """
    if not cfg.third:
        return apply_rope_positions(table, positions, q)
    chunks = q.reshape(q.shape[:-1] + (cfg.d_c, cfg.d_b))
    return apply_rope_positions(table, positions, chunks).reshape(q.shape)


def rotate_sequence(cfg, factors, positions):
    """
    Rotate the query and key factors of a SequenceFactors to the
    given positions. Values are left untouched.
    """
    table = rope_table_for(cfg)
    if cfg.dense_query:
        q = _rotate_dense(cfg, table, positions, factors.q)
    else:
        q = factors.q.replace(b=apply_rope_positions(table, positions,
                                                     factors.q.b))
    k = factors.k.replace(b=apply_rope_positions(table, positions,
                                                 factors.k.b))
    return q, k, factors.v


def decode_loop(X, weights, cfg, block_size=256, start_position=0,
                counter=None, **kwargs):
    """
    Autoregressive decoding of a sequence token by token.

    For every token t: compute its factors, rotate the query and
    key B factors to position start_position + t, append the key
    and value factors to the cache and run flash_decode.

    Parameters:
    -----------

    X: ndarray, shape (T, d_model)

    weights: FactorWeights

    cfg: TpaConfig

    block_size, counter, kwargs:
        Passed on to flash_decode.

    Returns:
    --------

    DecodeResult(outputs, cache)
        outputs has shape (T, h, value_dim).
    """
    seq = compute_factors_seq(weights, cfg, X)
    T = X.shape[0]
    if T == 0:
        raise EmptyInputError('decode_loop: empty sequence')
    table = rope_table_for(cfg)
    cache = FactorizedKvCache(cfg, start_position=start_position)
    outputs = np.empty((T, cfg.h, cfg.value_dim))
    for t in range(T):
        pos = cache.next_position
        if cfg.dense_query:
            q = _rotate_dense(cfg, table, [pos], seq.q[t:t + 1])[0]
        else:
            q = pre_rotate_key(seq.q.block(t), pos, table)
        k = pre_rotate_key(seq.k.block(t), pos, table)
        cache.append(k, seq.v.block(t))
        outputs[t] = flash_decode(q, cache, block_size, counter=counter,
                                  **kwargs)
    return DecodeResult(outputs, cache)
