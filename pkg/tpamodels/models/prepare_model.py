"""
This module contains routines that assemble the objects the main
scripts work with: ready-to-run decode kernels for the
benchmarked mechanisms.

The decode kernels are built from random factors drawn outside of
the returned callable, so that timing the callable measures the
attention step only.
"""

import logging
from typing import Callable, NamedTuple

import numpy as np

from tpamodels.utils.errors import ConfigError
from .attention_ref import dense_decode
from .flash_decode import flash_decode
from .kv_cache import FactorizedKvCache, bytes_per_token
from .rope import apply_rope_positions, rope_table_for
from .tpa_factor import FactorBlock, TpaConfig

logger = logging.getLogger(__name__)


class PreparedKernel(NamedTuple):
    run: Callable[..., object]
    nbytes: int


def _kv_heads(name, h, groups):
    if name == 'mha':
        return h
    if name == 'mqa':
        return 1
    if h % groups:
        raise ConfigError(f'gqa: h = {h} is not divisible by {groups}')
    return groups


def cache_nbytes(name, batch, seqlen, d_model, h, d_h, ranks, groups,
                 itemsize):
    """Bytes held by the caches of one benchmark configuration."""
    if name == 'tpa':
        cfg = TpaConfig(d_model=d_model, h=h, d_h=d_h, r_q=ranks[0],
                        r_k=ranks[1], r_v=ranks[2])
        per_token = bytes_per_token(cfg, itemsize)
    else:
        per_token = 2 * _kv_heads(name, h, groups) * d_h * itemsize
    return batch * seqlen * per_token


def _prepare_tpa(rng, batch, seqlen, d_model, h, d_h, ranks, dtype,
                 block_size, threads):
    r_q, r_k, r_v = ranks
    cfg = TpaConfig(d_model=d_model, h=h, d_h=d_h, r_q=r_q, r_k=r_k,
                    r_v=r_v)
    table = rope_table_for(cfg)
    positions = np.arange(seqlen)
    caches, queries = [], []
    for _ in range(batch):
        b_k = apply_rope_positions(
            table, positions, rng.standard_normal((seqlen, r_k, d_h)))
        caches.append(FactorizedKvCache.from_arrays(
            cfg,
            rng.standard_normal((seqlen, r_k, h)).astype(dtype),
            b_k.astype(dtype),
            rng.standard_normal((seqlen, r_v, h)).astype(dtype),
            rng.standard_normal((seqlen, r_v, d_h)).astype(dtype)))
        queries.append(FactorBlock(rng.standard_normal((r_q, h)),
                                   rng.standard_normal((r_q, d_h))))

    def run(counter=None):
        return [flash_decode(q, c, block_size, counter=counter,
                             threads=threads)
                for q, c in zip(queries, caches)]
    return run


def _prepare_dense(rng, batch, seqlen, h, d_h, n_kv, dtype):
    items = [(rng.standard_normal((h, d_h)),
              rng.standard_normal((seqlen, n_kv, d_h)).astype(dtype),
              rng.standard_normal((seqlen, n_kv, d_h)).astype(dtype))
             for _ in range(batch)]

    def run(counter=None):
        return [dense_decode(q, K, V, counter) for q, K, V in items]
    return run


_available_mechanisms = ['tpa', 'mha', 'mqa', 'gqa']


def prepare_kernel(name, rng, batch, seqlen, d_model, h, d_h,
                   ranks=(1, 1, 1), groups=1, dtype=np.float64,
                   block_size=256, threads=1):
    """
    Build a decode kernel for one benchmark configuration.

    Parameters:
    -----------

    name: str
        One of 'tpa', 'mha', 'mqa', 'gqa'.

    rng: np.random.Generator
        Source of the random factors / keys / values.

    batch, seqlen: int
        Number of independent sequences and cached tokens each.

    d_model, h, d_h: int

    ranks: tuple
        (r_q, r_k, r_v) for 'tpa'.

    groups: int
        Key/value groups for 'gqa'.

    Returns:
    --------

    PreparedKernel(run, nbytes)
    """
    if name not in _available_mechanisms:
        raise ConfigError(f'unknown mechanism {name!r}; available: '
                          f'{_available_mechanisms}')
    dtype = np.dtype(dtype)
    nbytes = cache_nbytes(name, batch, seqlen, d_model, h, d_h, ranks,
                          groups, dtype.itemsize)
    if name == 'tpa':
        run = _prepare_tpa(rng, batch, seqlen, d_model, h, d_h, ranks,
                           dtype, block_size, threads)
    else:
        run = _prepare_dense(rng, batch, seqlen, h, d_h,
                             _kv_heads(name, h, groups), dtype)
    logger.debug('prepared %s kernel: batch=%d seqlen=%d (%d bytes)', name,
                 batch, seqlen, nbytes)
    return PreparedKernel(run, nbytes)
