"""
Contextual tensor factorization of queries, keys and values.

For a token with hidden state x (length d_model) each of the
query, key and value head matrices (h x d_h) is written as a
scaled sum of R outer products

    Q = (1 / R) * sum_r a_r (x) b_r = (1 / R) A^T B

where A (R x h) collects the head factors and B (R x d_h) the
token-dimension factors. Both are linear in x and are computed
with a single "merged rank" weight matrix per factor, e.g.
W_aQ of shape (R * h, d_model), whose product with x is
reshaped rank-major into (R, h).

In the third order factorization B is replaced by
vec(b_r c_r^T) with b_r of length d_b, c_r of length d_c and
d_h = d_b * d_c; vec() stacks columns.
"""

import logging
from dataclasses import dataclass, fields, asdict
from typing import NamedTuple, Optional, Union

import numpy as np

from tpamodels.utils import linalg
from tpamodels.utils.errors import ConfigError, ShapeError
from tpamodels.utils.filesaver import save_tensors, load_tensors
from ._common_keys import (tpa_variants, tpa_orders, tpa_config_keys,
                           rope_base_default)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TpaConfig:
    """
    Dimensions and variant of a TPA attention layer.

    Parameters:
    -----------

    d_model: int
        Hidden size of the token representations.

    h: int
        Number of heads.

    d_h: int
        Head dimension of queries and keys.

    r_q, r_k, r_v: int
        Ranks of the query, key and value factorizations.
        r_q is ignored for the 'kv_only' variant.

    variant: str
        One of _common_keys.tpa_variants.

    order: str
        'second' or 'third'.

    d_b, d_c: int or None
        Third order factor lengths with d_b * d_c == d_h and
        d_b even (RoPE rotates the b factors).

    rope_base: float
        Base of the rotary frequencies.

    value_dim: int or None
        Head dimension E of the values; defaults to d_h.
    """
    d_model: int
    h: int
    d_h: int
    r_q: int = 1
    r_k: int = 1
    r_v: int = 1
    variant: str = 'full'
    order: str = 'second'
    d_b: Optional[int] = None
    d_c: Optional[int] = None
    rope_base: float = rope_base_default
    value_dim: Optional[int] = None

    def __post_init__(self):
        if self.value_dim is None:
            object.__setattr__(self, 'value_dim', self.d_h)
        for key in ('d_model', 'h', 'd_h', 'r_q', 'r_k', 'r_v',
                    'value_dim'):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f'TpaConfig: {key} must be a positive '
                                  f'integer, got {value!r}')
        if self.variant not in tpa_variants:
            raise ConfigError(f'TpaConfig: unknown variant {self.variant!r}'
                              f'; available: {tpa_variants}')
        if self.order not in tpa_orders:
            raise ConfigError(f'TpaConfig: unknown order {self.order!r}')
        if self.rope_base <= 1.:
            raise ConfigError('TpaConfig: rope_base must exceed 1')
        if self.variant == 'shared_b' and self.r_k != self.r_v:
            raise ConfigError('TpaConfig: shared_b requires r_k == r_v')
        if self.variant == 'shared_b' and self.value_dim != self.d_h:
            raise ConfigError('TpaConfig: shared_b requires value_dim == d_h')

        if self.order == 'third':
            if self.variant not in ('full', 'kv_only', 'shared_b'):
                raise ConfigError(('TpaConfig: third order is available '
                                   'for full, kv_only and shared_b only'))
            if self.d_b is None or self.d_c is None:
                raise ConfigError('TpaConfig: third order needs d_b and d_c')
            if self.d_b * self.d_c != self.d_h:
                raise ConfigError(('TpaConfig: d_b * d_c = {} differs from '
                                   'd_h = {}').format(self.d_b * self.d_c,
                                                      self.d_h))
            if self.d_b % 2:
                raise ConfigError('TpaConfig: d_b must be even')
            if self.value_dim != self.d_h:
                raise ConfigError(('TpaConfig: third order requires '
                                   'value_dim == d_h'))
        else:
            if self.d_h % 2:
                raise ConfigError('TpaConfig: d_h must be even')

    @property
    def third(self):
        return self.order == 'third'

    @property
    def token_dim(self):
        """Length of the stored b factors of queries and keys."""
        return self.d_b if self.third else self.d_h

    @property
    def value_token_dim(self):
        return self.d_b if self.third else self.value_dim

    @property
    def dense_query(self):
        return self.variant == 'kv_only'

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, config):
        """Build a config from a flat dictionary, rejecting unknown keys."""
        unknown = set(config) - set(tpa_config_keys)
        if unknown:
            raise ConfigError('TpaConfig: unknown keys {}'.format(
                sorted(unknown)))
        try:
            return cls(**{k: v for k, v in config.items() if v is not None})
        except TypeError as exc:
            raise ConfigError(f'TpaConfig: {exc}') from exc


@dataclass(frozen=True)
class FactorBlock:
    """
    Factors of one token: A (R x h), B (R x d_h) and, for the
    third order factorization, C (R x d_c) with B of shape
    (R x d_b).
    """
    a: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ('a', 'b', 'c'):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.ndim != 2:
                raise ShapeError(f'FactorBlock.{name} must be 2D')
            object.__setattr__(self, name, value)
        rows = {self.a.shape[0], self.b.shape[0]}
        if self.c is not None:
            rows.add(self.c.shape[0])
        if len(rows) != 1:
            raise ShapeError(('FactorBlock: factors have different '
                              'row counts {}').format(sorted(rows)))

    @property
    def rank(self):
        return self.a.shape[0]

    def features(self):
        """R x d_h token-dimension rows; vec(b_r c_r^T) for third order."""
        if self.c is None:
            return self.b
        rank = self.rank
        return (self.c[:, :, None] * self.b[:, None, :]).reshape(rank, -1)

    def replace(self, **changes):
        values = {'a': self.a, 'b': self.b, 'c': self.c}
        values.update(changes)
        return FactorBlock(**values)


@dataclass(frozen=True)
class FactorStack:
    """
    Factors of T tokens stacked along a leading axis:
    a (T, R, h), b (T, R, d), c (T, R, d_c) or None.
    """
    a: np.ndarray
    b: np.ndarray
    c: Optional[np.ndarray] = None

    def __len__(self):
        return self.a.shape[0]

    @property
    def rank(self):
        return self.a.shape[1]

    def features(self):
        if self.c is None:
            return self.b
        T, rank = self.a.shape[:2]
        return (self.c[..., :, None] * self.b[..., None, :]
                ).reshape(T, rank, -1)

    def block(self, t):
        return FactorBlock(self.a[t], self.b[t],
                           None if self.c is None else self.c[t])

    def replace(self, **changes):
        values = {'a': self.a, 'b': self.b, 'c': self.c}
        values.update(changes)
        return FactorStack(**values)


class TokenFactors(NamedTuple):
    """q is a FactorBlock, or a dense (h, d_h) array for kv_only."""
    q: Union[FactorBlock, np.ndarray]
    k: FactorBlock
    v: FactorBlock


class SequenceFactors(NamedTuple):
    """q is a FactorStack, or a dense (T, h, d_h) array for kv_only."""
    q: Union[FactorStack, np.ndarray]
    k: FactorStack
    v: FactorStack


# weight name -> (row count as a function of the config, role)
_WEIGHT_ROWS = {
    'w_aq': lambda c: c.r_q * c.h,
    'w_bq': lambda c: c.r_q * c.token_dim,
    'w_cq': lambda c: c.r_q * c.d_c,
    'w_ak': lambda c: c.r_k * c.h,
    'w_bk': lambda c: c.r_k * c.token_dim,
    'w_ck': lambda c: c.r_k * c.d_c,
    'w_av': lambda c: c.r_v * c.h,
    'w_bv': lambda c: c.r_v * c.value_token_dim,
    'w_cv': lambda c: c.r_v * c.d_c,
    'w_q': lambda c: c.h * c.d_h,
}

_FIXED_SHAPES = {
    'a_q': lambda c: (c.r_q, c.h),
    'a_k': lambda c: (c.r_k, c.h),
    'a_v': lambda c: (c.r_v, c.h),
    'b_q': lambda c: (c.r_q, c.d_h),
    'b_k': lambda c: (c.r_k, c.d_h),
    'b_v': lambda c: (c.r_v, c.value_dim),
}


def required_tensors(cfg):
    """
    Names of the weight tensors a config needs, in a fixed
    order (the order in which init_weights draws sub-seeds).
    """
    third = ['w_cq', 'w_ck', 'w_cv'] if cfg.third else []
    if cfg.variant == 'full':
        names = ['w_aq', 'w_bq', 'w_ak', 'w_bk', 'w_av', 'w_bv'] + third
    elif cfg.variant == 'shared_b':
        names = ['w_aq', 'w_bq', 'w_ak', 'w_bk', 'w_av'] + \
            [n for n in third if n != 'w_cv']
    elif cfg.variant == 'kv_only':
        names = ['w_q', 'w_ak', 'w_bk', 'w_av', 'w_bv'] + \
            [n for n in third if n != 'w_cq']
    elif cfg.variant == 'non_contextual_a':
        names = ['a_q', 'a_k', 'a_v', 'w_bq', 'w_bk', 'w_bv']
    else:
        names = ['w_aq', 'w_ak', 'w_av', 'b_q', 'b_k', 'b_v']
    return names + ['w_o']


@dataclass
class FactorWeights:
    """
    Projection weights of one TPA layer.

    Merged-rank matrices w_a*, w_b*, w_c* have shape
    (R * n, d_model); w_q (kv_only) has shape (h * d_h, d_model);
    the fixed factors a_* (R x h) and b_* (R x d_h) replace the
    corresponding projections in the non-contextual variants;
    w_o has shape (h * value_dim, d_model) and maps the
    concatenated heads back to d_model.

    For 'shared_b', w_bv (and w_cv) are the very same array
    objects as w_bk (and w_ck).
    """
    cfg: TpaConfig
    w_aq: Optional[np.ndarray] = None
    w_bq: Optional[np.ndarray] = None
    w_cq: Optional[np.ndarray] = None
    w_ak: Optional[np.ndarray] = None
    w_bk: Optional[np.ndarray] = None
    w_ck: Optional[np.ndarray] = None
    w_av: Optional[np.ndarray] = None
    w_bv: Optional[np.ndarray] = None
    w_cv: Optional[np.ndarray] = None
    w_q: Optional[np.ndarray] = None
    w_o: Optional[np.ndarray] = None
    a_q: Optional[np.ndarray] = None
    a_k: Optional[np.ndarray] = None
    a_v: Optional[np.ndarray] = None
    b_q: Optional[np.ndarray] = None
    b_k: Optional[np.ndarray] = None
    b_v: Optional[np.ndarray] = None

    def __post_init__(self):
        cfg = self.cfg
        if cfg.variant == 'shared_b':
            if self.w_bv is None:
                self.w_bv = self.w_bk
            if cfg.third and self.w_cv is None:
                self.w_cv = self.w_ck
            if self.w_bv is not self.w_bk or self.w_cv is not self.w_ck:
                raise ConfigError(('FactorWeights: shared_b needs w_bv '
                                   'to be w_bk'))
        needed = required_tensors(cfg)
        for name in needed:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f'FactorWeights: missing {name} for '
                                  f'variant {cfg.variant}')
            if name == 'w_o':
                expected = (cfg.h * cfg.value_dim, cfg.d_model)
            elif name in _FIXED_SHAPES:
                expected = _FIXED_SHAPES[name](cfg)
            else:
                expected = (_WEIGHT_ROWS[name](cfg), cfg.d_model)
            if np.shape(value) != expected:
                raise ConfigError(('FactorWeights: {} has shape {}, '
                                   'expected {}').format(name,
                                                         np.shape(value),
                                                         expected))

    def tensors(self):
        """{name: array} of every tensor that is set."""
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != 'cfg' and getattr(self, f.name) is not None}

    def aliases(self):
        if self.cfg.variant != 'shared_b':
            return {}
        aliases = {'w_bv': 'w_bk'}
        if self.cfg.third:
            aliases['w_cv'] = 'w_ck'
        return aliases


def xavier_init(n_in, n_out, rng_seed):
    """
    Xavier (Glorot) uniform initialisation.

    Parameters:
    -----------

    n_in, n_out: int
        Fan-in and fan-out.

    rng_seed: int
        Seed of the PCG64 generator.

    Returns:
    --------

    w: ndarray, shape (n_out, n_in)
        Entries drawn from U(-bound, bound) with
        bound = sqrt(6 / (n_in + n_out)).
    """
    if n_in < 1 or n_out < 1:
        raise ConfigError('xavier_init: fan-in and fan-out must be positive')
    bound = np.sqrt(6. / (n_in + n_out))
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def init_weights(cfg, seed):
    """
    Xavier-initialise every tensor the config needs. Each tensor
    gets its own sub-seed spawned from `seed`.
    """
    names = required_tensors(cfg)
    children = np.random.SeedSequence(seed).spawn(len(names))
    arrays = {}
    for name, child in zip(names, children):
        sub_seed = int(child.generate_state(1)[0])
        if name == 'w_o':
            shape = (cfg.h * cfg.value_dim, cfg.d_model)
        elif name in _FIXED_SHAPES:
            shape = _FIXED_SHAPES[name](cfg)
        else:
            shape = (_WEIGHT_ROWS[name](cfg), cfg.d_model)
        arrays[name] = xavier_init(shape[1], shape[0], sub_seed)
    logger.debug('initialised %s weights: %s', cfg.variant, names)
    return FactorWeights(cfg, **arrays)


def _check_config(w, cfg):
    if w.cfg != cfg:
        raise ConfigError('compute_factors: weights were built for a '
                          'different configuration')


def compute_factors(w, cfg, x_t):
    """
    Factors of a single token.

    Parameters:
    -----------

    w: FactorWeights

    cfg: TpaConfig
        Must equal w.cfg.

    x_t: ndarray, shape (d_model,)

    Returns:
    --------

    TokenFactors(q, k, v)
        q is a dense (h, d_h) array for 'kv_only'.
    """
    _check_config(w, cfg)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (cfg.d_model,):
        raise ConfigError(f'compute_factors: x_t has shape {x_t.shape}, '
                          f'expected ({cfg.d_model},)')
    seq = compute_factors_seq(w, cfg, x_t[None, :])
    q = seq.q[0] if cfg.dense_query else seq.q.block(0)
    return TokenFactors(q, seq.k.block(0), seq.v.block(0))


def _project(weight, X, rank, width):
    T = X.shape[0]
    return linalg.matmul(X, weight.T).reshape(T, rank, width)


def _fixed(array, T):
    return np.repeat(np.asarray(array)[None, :, :], T, axis=0)


def compute_factors_seq(w, cfg, X):
    """
    Factors of T tokens at once; X has shape (T, d_model).
    Same semantics as compute_factors applied row by row.
    """
    _check_config(w, cfg)
    X = linalg.as_matrix(X, 'compute_factors_seq input')
    if X.shape[1] != cfg.d_model:
        raise ConfigError(f'compute_factors_seq: X has {X.shape[1]} '
                          f'columns, expected {cfg.d_model}')
    T = X.shape[0]
    h, tok, d_c = cfg.h, cfg.token_dim, cfg.d_c

    def contextual(tag, rank, width):
        a = _project(getattr(w, f'w_a{tag}'), X, rank, h)
        b = _project(getattr(w, f'w_b{tag}'), X, rank, width)
        c = _project(getattr(w, f'w_c{tag}'), X, rank, d_c) \
            if cfg.third else None
        return FactorStack(a, b, c)

    if cfg.variant == 'non_contextual_a':
        q = FactorStack(_fixed(w.a_q, T), _project(w.w_bq, X, cfg.r_q, tok))
        k = FactorStack(_fixed(w.a_k, T), _project(w.w_bk, X, cfg.r_k, tok))
        v = FactorStack(_fixed(w.a_v, T),
                        _project(w.w_bv, X, cfg.r_v, cfg.value_dim))
    elif cfg.variant == 'non_contextual_b':
        q = FactorStack(_project(w.w_aq, X, cfg.r_q, h), _fixed(w.b_q, T))
        k = FactorStack(_project(w.w_ak, X, cfg.r_k, h), _fixed(w.b_k, T))
        v = FactorStack(_project(w.w_av, X, cfg.r_v, h), _fixed(w.b_v, T))
    else:
        k = contextual('k', cfg.r_k, tok)
        v = contextual('v', cfg.r_v, cfg.value_token_dim)
        if cfg.dense_query:
            q = _project(w.w_q, X, h, cfg.d_h)
        else:
            q = contextual('q', cfg.r_q, tok)
    return SequenceFactors(q, k, v)


def materialize(block, rank=None):
    """
    Head matrix (1 / R) A^T B of shape (h, d_h).

    For third order blocks B is replaced by the vec(b (x) c)
    feature rows. `rank` defaults to the number of rows of
    the block and must match it when given.
    """
    if rank is None:
        rank = block.rank
    if rank != block.rank:
        raise ShapeError(f'materialize: rank {rank} differs from the '
                         f'{block.rank} rows of the block')
    return linalg.matmul(block.a.T, block.features()) / rank


def materialize_third_order(block, rank=None, d_h=None):
    """
    (1 / R) sum_r a_r (x) vec(b_r c_r^T), written out term by
    term with column-stacking vec().

    Raises:
    -------
    ConfigError: if the block has no c factor, or d_h is given
        and differs from d_b * d_c.
    """
    if block.c is None:
        raise ConfigError('materialize_third_order: block has no c factor')
    d_b, d_c = block.b.shape[1], block.c.shape[1]
    if d_h is not None and d_b * d_c != d_h:
        raise ConfigError(f'materialize_third_order: d_b * d_c = '
                          f'{d_b * d_c} differs from d_h = {d_h}')
    if rank is None:
        rank = block.rank
    out = np.zeros((block.a.shape[1], d_b * d_c))
    for r in range(block.rank):
        bc = linalg.outer(block.b[r], block.c[r])
        out += linalg.outer(block.a[r], bc.reshape(-1, order='F'))
    return out / rank


def save_weights(path, w):
    """Store FactorWeights together with their config."""
    save_tensors(path, w.tensors(), meta={'config': w.cfg.to_dict()},
                 aliases=w.aliases())


def load_weights(path):
    """Load FactorWeights written by save_weights."""
    tensors, meta = load_tensors(path)
    cfg = TpaConfig.from_dict(meta['config'])
    return FactorWeights(cfg, **tensors)
