"""
Factorized KV cache.

Instead of the materialized keys and values (2 h d_h numbers per
token) the cache keeps the factors A_K, B~_K, A_V, B_V of every
token, (R_K + R_V)(h + d_h) numbers per token. B~_K is already
rotated to the position of its token, so decoding reads the cache
without any further RoPE work.

Storage is a structure of arrays: one contiguous array per factor
with a leading token axis whose capacity doubles when full.

Variant specific layouts:

full, kv_only         A_K, B~_K, A_V, B_V per token
                      (+ C_K, C_V for the third order)
non_contextual_a      B~_K, B_V per token; the fixed A_K, A_V once
non_contextual_b      A_K, A_V per token; the fixed B_K, B_V once,
                      B_K rotated when read
shared_b              A_K, A_V and the shared B per token, B
                      rotated for the keys when read
"""

import logging
from typing import NamedTuple

import numpy as np

from tpamodels.utils.errors import (ConfigError, EmptyInputError,
                                    NonFiniteError, SerializationError,
                                    ShapeError)
from tpamodels.utils.filesaver import save_tensors, load_tensors
from .rope import apply_rope_rows, apply_rope_positions, rope_table_for
from .tpa_factor import TpaConfig

logger = logging.getLogger(__name__)

# factors shared by all tokens, stored once
_fixed_factors = {'non_contextual_a': ('a_k', 'a_v'),
                  'non_contextual_b': ('b_k', 'b_v')}


def bytes_per_token(cfg, element_bytes=2):
    """
    Cache bytes per token.

    (R_K + R_V)(h + d_h) for 'full' and 'kv_only',
    (R_K + R_V) d_h for 'non_contextual_a',
    (R_K + R_V) h for 'non_contextual_b',
    (R_K + R_V) h + R_K d_h for 'shared_b',
    (R_K + R_V)(h + d_b + d_c) for the third order,
    all times element_bytes. Values with value_dim != d_h count
    R_V (h + E) for the value part.
    """
    r_k, r_v, h = cfg.r_k, cfg.r_v, cfg.h
    if cfg.third:
        width = cfg.d_b + cfg.d_c
        if cfg.variant == 'shared_b':
            numbers = (r_k + r_v) * h + r_k * width
        else:
            numbers = (r_k + r_v) * (h + width)
    elif cfg.variant == 'non_contextual_a':
        numbers = r_k * cfg.d_h + r_v * cfg.value_dim
    elif cfg.variant == 'non_contextual_b':
        numbers = (r_k + r_v) * h
    elif cfg.variant == 'shared_b':
        numbers = (r_k + r_v) * h + r_k * cfg.d_h
    else:
        numbers = r_k * (h + cfg.d_h) + r_v * (h + cfg.value_dim)
    return numbers * element_bytes


def compression_ratio(cfg):
    """Cached numbers per token relative to MHA's 2 h d_h."""
    return bytes_per_token(cfg, 1) / (2. * cfg.h * cfg.d_h)


class KvBlock(NamedTuple):
    """Decode-ready slice of the cache, D = d_h, E = value_dim."""
    a_k: np.ndarray   # (n, R_K, h)
    b_k: np.ndarray   # (n, R_K, D), rotated
    a_v: np.ndarray   # (n, R_V, h)
    b_v: np.ndarray   # (n, R_V, E)


class FactorizedKvCache:
    """
    Growable cache of key/value factors.

    Parameters:
    -----------

    cfg: TpaConfig

    start_position: int
        Position of the first token that will be appended.

    capacity: int
        Initial number of token slots.

    dtype: numpy dtype
        Storage type, float64 unless benchmarking.
    """

    def __init__(self, cfg, start_position=0, capacity=16,
                 dtype=np.float64):
        self.cfg = cfg
        self.start_position = int(start_position)
        self.dtype = np.dtype(dtype)
        self.table = rope_table_for(cfg)
        self._len = 0
        self._capacity = max(1, int(capacity))
        self._fixed = {}
        self._store = {name: np.empty((self._capacity,) + shape,
                                      dtype=self.dtype)
                       for name, shape in self._layout().items()}

    def _layout(self):
        cfg = self.cfg
        tok, r_k, r_v, h = cfg.token_dim, cfg.r_k, cfg.r_v, cfg.h
        variant = cfg.variant
        if variant == 'non_contextual_a':
            return {'b_k': (r_k, tok), 'b_v': (r_v, cfg.value_dim)}
        if variant == 'non_contextual_b':
            return {'a_k': (r_k, h), 'a_v': (r_v, h)}
        layout = {'a_k': (r_k, h), 'a_v': (r_v, h)}
        if variant == 'shared_b':
            layout['b_s'] = (r_k, tok)
            if cfg.third:
                layout['c_s'] = (r_k, cfg.d_c)
            return layout
        layout['b_k'] = (r_k, tok)
        layout['b_v'] = (r_v, cfg.value_token_dim)
        if cfg.third:
            layout['c_k'] = (r_k, cfg.d_c)
            layout['c_v'] = (r_v, cfg.d_c)
        return layout

    def __len__(self):
        return self._len

    @property
    def capacity(self):
        return self._capacity

    @property
    def next_position(self):
        """Position the next appended token must be rotated to."""
        return self.start_position + self._len

    def positions(self, start=0, stop=None):
        stop = self._len if stop is None else stop
        return np.arange(self.start_position + start,
                         self.start_position + stop)

    def nbytes(self, element_bytes=2):
        """Logical cache size, bytes_per_token * length."""
        return bytes_per_token(self.cfg, element_bytes) * self._len

    def _grow(self):
        self._capacity *= 2
        for name, array in self._store.items():
            grown = np.empty((self._capacity,) + array.shape[1:],
                             dtype=self.dtype)
            grown[:self._len] = array[:self._len]
            self._store[name] = grown
        logger.debug('cache capacity grown to %d tokens', self._capacity)

    def _check_block(self, block, rank, name, value=False):
        cfg = self.cfg
        width = cfg.value_token_dim if value else cfg.token_dim
        expected = {'a': (rank, cfg.h), 'b': (rank, width)}
        if cfg.third:
            expected['c'] = (rank, cfg.d_c)
        for part, shape in expected.items():
            array = getattr(block, part)
            if array is None or array.shape != shape:
                raise ShapeError(('append: {}.{} has shape {}, expected {}'
                                  ).format(name, part,
                                           None if array is None
                                           else array.shape, shape))
            if not np.all(np.isfinite(array)):
                raise NonFiniteError(f'append: {name}.{part} is not finite')

    def _keep_fixed(self, name, array):
        if name not in self._fixed:
            self._fixed[name] = np.array(array, dtype=self.dtype)
        elif not np.allclose(self._fixed[name], array, rtol=1e-9,
                             atol=1e-12):
            raise ConfigError(f'append: fixed factor {name} changed '
                              'between tokens')

    def append(self, k_block, v_block):
        """
        Append the factors of the next token.

        Parameters:
        -----------

        k_block: FactorBlock
            Key factors, already rotated with
            pre_rotate_key(..., self.next_position, ...).

        v_block: FactorBlock
            Value factors. For 'shared_b' its B is the shared,
            unrotated token factor.

        Returns:
        --------

        length: int
            Number of cached tokens after the append.
        """
        cfg = self.cfg
        self._check_block(k_block, cfg.r_k, 'k_block')
        self._check_block(v_block, cfg.r_v, 'v_block', value=True)
        if self._len == self._capacity:
            self._grow()
        i = self._len
        store = self._store
        if cfg.variant == 'non_contextual_a':
            self._keep_fixed('a_k', k_block.a)
            self._keep_fixed('a_v', v_block.a)
            store['b_k'][i] = k_block.b
            store['b_v'][i] = v_block.b
        elif cfg.variant == 'non_contextual_b':
            self._keep_fixed('b_k', apply_rope_rows(
                self.table, -self.next_position, k_block.b))
            self._keep_fixed('b_v', v_block.b)
            store['a_k'][i] = k_block.a
            store['a_v'][i] = v_block.a
        else:
            store['a_k'][i] = k_block.a
            store['a_v'][i] = v_block.a
            if cfg.variant == 'shared_b':
                store['b_s'][i] = v_block.b
                if cfg.third:
                    store['c_s'][i] = v_block.c
            else:
                store['b_k'][i] = k_block.b
                store['b_v'][i] = v_block.b
                if cfg.third:
                    store['c_k'][i] = k_block.c
                    store['c_v'][i] = v_block.c
        self._len += 1
        return self._len

    def _slice(self, name, start, stop):
        if name in self._fixed:
            fixed = self._fixed[name]
            return np.broadcast_to(fixed, (stop - start,) + fixed.shape)
        return self._store[name][start:stop]

    @staticmethod
    def _features(b, c):
        if c is None:
            return b
        n, rank = b.shape[:2]
        return (c[..., :, None] * b[..., None, :]).reshape(n, rank, -1)

    def read_block(self, start, stop):
        """
        Decode-ready factors of the tokens start, ..., stop - 1;
        see KvBlock for the shapes.
        """
        if not 0 <= start < stop <= self._len:
            raise EmptyInputError(f'read_block: invalid range [{start}, '
                                  f'{stop}) of a cache of {self._len}')
        cfg = self.cfg
        third = cfg.third
        if cfg.variant == 'shared_b':
            b_s = self._slice('b_s', start, stop)
            c_s = self._slice('c_s', start, stop) if third else None
            b_rot = apply_rope_positions(self.table,
                                         self.positions(start, stop), b_s)
            b_k = self._features(b_rot, c_s)
            b_v = self._features(b_s, c_s)
        elif cfg.variant == 'non_contextual_b':
            b_k = apply_rope_positions(self.table,
                                       self.positions(start, stop),
                                       self._slice('b_k', start, stop))
            b_v = self._slice('b_v', start, stop)
        else:
            c_k = self._slice('c_k', start, stop) if third else None
            c_v = self._slice('c_v', start, stop) if third else None
            b_k = self._features(self._slice('b_k', start, stop), c_k)
            b_v = self._features(self._slice('b_v', start, stop), c_v)
        return KvBlock(self._slice('a_k', start, stop), b_k,
                       self._slice('a_v', start, stop), b_v)

    def entry(self, i):
        """(a_k, b_k, a_v, b_v) of token i, decode-ready."""
        block = self.read_block(i, i + 1)
        return KvBlock(*(part[0] for part in block))

    def save(self, path):
        """Snapshot the cache in the binary tensor format."""
        tensors = {name: array[:self._len]
                   for name, array in self._store.items()}
        tensors.update({f'fixed_{name}': array
                        for name, array in self._fixed.items()})
        save_tensors(path, tensors,
                     meta={'config': self.cfg.to_dict(),
                           'start_position': self.start_position,
                           'length': self._len})

    @classmethod
    def load(cls, path):
        """
        Restore a cache written by save().

        Raises:
        -------
        SerializationError: if the metadata or the set of stored
            factors does not describe a cache of the recorded
            configuration.
        """
        tensors, meta = load_tensors(path)
        try:
            cfg = TpaConfig.from_dict(meta['config'])
            length = int(meta['length'])
            start_position = int(meta['start_position'])
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            raise SerializationError(f'{path}: bad cache metadata: '
                                     f'{exc}') from exc
        if length < 0:
            raise SerializationError(f'{path}: negative cache length')
        cache = cls(cfg, start_position=start_position,
                    capacity=max(length, 1))
        fixed = _fixed_factors.get(cfg.variant, ()) if length else ()
        expected = set(cache._store) | {f'fixed_{n}' for n in fixed}
        if set(tensors) != expected:
            missing = sorted(expected - set(tensors))
            unknown = sorted(set(tensors) - expected)
            raise SerializationError(f'{path}: {cfg.variant} cache with '
                                     f'missing factors {missing} and '
                                     f'unknown factors {unknown}')
        ranks = {'k': cfg.r_k, 'v': cfg.r_v}
        for name, array in tensors.items():
            if name.startswith('fixed_'):
                name = name[len('fixed_'):]
                rank = ranks[name[-1]]
                if array.ndim != 2 or len(array) != rank or (
                        name[0] == 'a' and array.shape[1] != cfg.h):
                    raise SerializationError(
                        f'{path}: fixed factor {name} has shape '
                        f'{array.shape}')
                cache._fixed[name] = array
                continue
            shape = (length,) + cache._store[name].shape[1:]
            if array.shape != shape:
                raise SerializationError(f'{path}: factor {name} has shape '
                                         f'{array.shape}, expected {shape}')
            cache._store[name][:length] = array
        cache._len = length
        return cache

    @classmethod
    def from_arrays(cls, cfg, a_k, b_k, a_v, b_v, start_position=0):
        """
        Bulk-load a second order 'full' or 'kv_only' cache from
        stacked factors, b_k already rotated to the positions
        start_position, start_position + 1, ...
        """
        if cfg.third or cfg.variant not in ('full', 'kv_only'):
            raise ConfigError('from_arrays: only second order full and '
                              'kv_only caches can be bulk-loaded')
        arrays = {'a_k': a_k, 'b_k': b_k, 'a_v': a_v, 'b_v': b_v}
        length = len(a_k)
        dtype = np.result_type(*arrays.values())
        cache = cls(cfg, start_position=start_position,
                    capacity=max(length, 1), dtype=dtype)
        for name, array in arrays.items():
            expected = (length,) + cache._store[name].shape[1:]
            if np.shape(array) != expected:
                raise ShapeError(f'from_arrays: {name} has shape '
                                 f'{np.shape(array)}, expected {expected}')
            if not np.all(np.isfinite(array)):
                raise NonFiniteError(f'from_arrays: {name} is not finite')
            cache._store[name][:length] = array
        cache._len = length
        return cache
