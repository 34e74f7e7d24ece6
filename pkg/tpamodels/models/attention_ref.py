"""
Materialized attention, used as the oracle for the factorized
kernels, and the constructors that express MHA, MQA and GQA as
non-contextual TPA.

Head tensors are ndarrays of shape (T, h, d_h).

Functions:
----------

attention_reference: scaled dot-product attention per head.

mha_as_tpa, mqa_as_tpa, gqa_as_tpa: FactorWeights whose
    materialized heads equal those of the classic mechanism.

mha_forward, mqa_forward, gqa_forward: the classic mechanisms
    computed directly from dense projections.

dense_decode: one-query decoding against a materialized cache.
"""

import logging

import numpy as np

from tpamodels.utils.linalg import softmax_lse
from tpamodels.utils.errors import ConfigError, EmptyInputError, ShapeError
from .tpa_factor import TpaConfig, FactorWeights, FactorStack

logger = logging.getLogger(__name__)


def check_head_tensor(x, name='head tensor'):
    """Convert to float64 and check the (T, h, d) layout."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f'{name}: expected shape (T, h, d), got {x.shape}')
    if x.shape[0] == 0:
        raise EmptyInputError(f'{name}: empty sequence')
    return x


def causal_mask(t_q, t_k):
    """
    Boolean (t_q, t_k) mask; query i attends to keys
    j <= i + (t_k - t_q), i.e. the queries are the last t_q
    positions of the key sequence.
    """
    offset = t_k - t_q
    return np.arange(t_k)[None, :] <= np.arange(t_q)[:, None] + offset


def attention_reference(Q, K, V, causal=False):
    """
    softmax(Q K^T / sqrt(d_h)) V for every head.

    Parameters:
    -----------

    Q: ndarray, shape (T_q, h, d_h)

    K: ndarray, shape (T_k, h, d_h)

    V: ndarray, shape (T_k, h, E)

    causal: bool
        Apply causal_mask(T_q, T_k).

    Returns:
    --------

    out: ndarray, shape (T_q, h, E)

    Raises:
    -------
    EmptyInputError, ShapeError, DegenerateRowError
    """
    Q = check_head_tensor(Q, 'Q')
    K = check_head_tensor(K, 'K')
    V = check_head_tensor(V, 'V')
    if Q.shape[1:] != K.shape[1:] or K.shape[:2] != V.shape[:2]:
        raise ShapeError(f'attention_reference: incompatible shapes '
                         f'{Q.shape}, {K.shape}, {V.shape}')
    scale = 1. / np.sqrt(Q.shape[2])
    logits = np.einsum('qhd,khd->hqk', Q, K) * scale
    mask = causal_mask(Q.shape[0], K.shape[0]) if causal else None
    probs, _ = softmax_lse(logits, mask)
    return np.einsum('hqk,khe->qhe', probs, V)


def materialize_sequence(factors):
    """
    Head tensor (T, h, d_h) of a FactorStack, (1 / R) A^T B per
    token. Dense (T, h, d_h) arrays are returned as they are.
    """
    if not isinstance(factors, FactorStack):
        return check_head_tensor(factors)
    return np.einsum('trh,trd->thd', factors.a,
                     factors.features()) / factors.rank


def _default_wo(h, value_dim, d_model):
    return np.eye(h * value_dim, d_model)


def _stack_heads(w):
    """(n, d_model, d) per-head weights -> merged (n * d, d_model)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 3:
        raise ShapeError('per-head weights must have shape (n, d_model, d)')
    n, d_model, d = w.shape
    return w.transpose(0, 2, 1).reshape(n * d, d_model)


def mha_as_tpa(w_q, w_k, w_v, w_o=None):
    """
    Multi-head attention as non-contextual TPA.

    Parameters:
    -----------

    w_q, w_k: ndarray, shape (h, d_model, d_h)
        Per-head projections W_i, with head i of the query
        being x W_i.

    w_v: ndarray, shape (h, d_model, E)

    w_o: ndarray, shape (h * E, d_model), optional

    Returns:
    --------

    FactorWeights with variant 'non_contextual_a',
    R_Q = R_K = R_V = h, fixed head factors a_i = h e_i and
    token factors b_i = x W_i.
    """
    w_q, w_k, w_v = (np.asarray(w, dtype=np.float64)
                     for w in (w_q, w_k, w_v))
    if w_q.shape != w_k.shape or w_q.shape[:2] != w_v.shape[:2]:
        raise ShapeError('mha_as_tpa: w_q, w_k and w_v disagree')
    h, d_model, d_h = w_q.shape
    value_dim = w_v.shape[2]
    cfg = TpaConfig(d_model=d_model, h=h, d_h=d_h, r_q=h, r_k=h, r_v=h,
                    variant='non_contextual_a', value_dim=value_dim)
    head = h * np.eye(h)
    return FactorWeights(cfg, a_q=head, a_k=head.copy(), a_v=head.copy(),
                         w_bq=_stack_heads(w_q), w_bk=_stack_heads(w_k),
                         w_bv=_stack_heads(w_v),
                         w_o=_default_wo(h, value_dim, d_model)
                         if w_o is None else w_o)


def mqa_as_tpa(w_q, w_k, w_v, w_o=None):
    """
    Multi-query attention as non-contextual TPA: queries as in
    mha_as_tpa, a single key/value factor with a^K = a^V = 1_h.

    w_q has shape (h, d_model, d_h); w_k (d_model, d_h);
    w_v (d_model, E).
    """
    w_q = np.asarray(w_q, dtype=np.float64)
    w_k = np.asarray(w_k, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    if w_k.ndim != 2 or w_v.ndim != 2 or w_q.ndim != 3 \
            or w_q.shape[1:] != w_k.shape:
        raise ShapeError('mqa_as_tpa: incompatible weight shapes')
    h, d_model, d_h = w_q.shape
    value_dim = w_v.shape[1]
    cfg = TpaConfig(d_model=d_model, h=h, d_h=d_h, r_q=h, r_k=1, r_v=1,
                    variant='non_contextual_a', value_dim=value_dim)
    return FactorWeights(cfg, a_q=h * np.eye(h), a_k=np.ones((1, h)),
                         a_v=np.ones((1, h)), w_bq=_stack_heads(w_q),
                         w_bk=w_k.T.copy(), w_bv=w_v.T.copy(),
                         w_o=_default_wo(h, value_dim, d_model)
                         if w_o is None else w_o)


def group_factors(h, groups):
    """
    (groups, h) head factors a_j = groups * mask_j, where mask_j
    selects the contiguous heads of group j.
    """
    if groups < 1 or h % groups:
        raise ConfigError(f'GQA: h = {h} is not divisible by '
                          f'{groups} groups')
    size = h // groups
    a = np.zeros((groups, h))
    for j in range(groups):
        a[j, j * size:(j + 1) * size] = groups
    return a


def gqa_as_tpa(w_q, w_k, w_v, groups, w_o=None):
    """
    Grouped-query attention as non-contextual TPA with
    R_K = R_V = groups.

    w_q has shape (h, d_model, d_h); w_k (groups, d_model, d_h);
    w_v (groups, d_model, E).

    Raises:
    -------
    ConfigError: if h is not divisible by groups.
    """
    w_q = np.asarray(w_q, dtype=np.float64)
    w_k = np.asarray(w_k, dtype=np.float64)
    w_v = np.asarray(w_v, dtype=np.float64)
    h, d_model, d_h = w_q.shape
    a_kv = group_factors(h, groups)
    if w_k.shape != (groups, d_model, d_h) or w_v.shape[:2] != (groups,
                                                               d_model):
        raise ShapeError('gqa_as_tpa: key/value weights must have one '
                         'projection per group')
    value_dim = w_v.shape[2]
    cfg = TpaConfig(d_model=d_model, h=h, d_h=d_h, r_q=h, r_k=groups,
                    r_v=groups, variant='non_contextual_a',
                    value_dim=value_dim)
    return FactorWeights(cfg, a_q=h * np.eye(h), a_k=a_kv,
                         a_v=a_kv.copy(), w_bq=_stack_heads(w_q),
                         w_bk=_stack_heads(w_k), w_bv=_stack_heads(w_v),
                         w_o=_default_wo(h, value_dim, d_model)
                         if w_o is None else w_o)


def _heads(X, w):
    return np.einsum('td,hde->the', np.asarray(X, dtype=np.float64), w)


def mha_forward(X, w_q, w_k, w_v, causal=False):
    """Multi-head attention from dense per-head projections."""
    return attention_reference(_heads(X, w_q), _heads(X, w_k),
                               _heads(X, w_v), causal)


def mqa_forward(X, w_q, w_k, w_v, causal=False):
    """Multi-query attention: one key and value shared by all heads."""
    return gqa_forward(X, w_q, np.asarray(w_k)[None], np.asarray(w_v)[None],
                       1, causal)


def gqa_forward(X, w_q, w_k, w_v, groups, causal=False):
    """Grouped-query attention; w_k and w_v hold one projection per group."""
    h = np.shape(w_q)[0]
    if h % groups:
        raise ConfigError(f'GQA: h = {h} is not divisible by '
                          f'{groups} groups')
    size = h // groups
    K = np.repeat(_heads(X, w_k), size, axis=1)
    V = np.repeat(_heads(X, w_v), size, axis=1)
    return attention_reference(_heads(X, w_q), K, V, causal)


def dense_decode(q, K, V, counter=None):
    """
    Decode one query against a materialized cache.

    Parameters:
    -----------

    q: ndarray, shape (h, D)

    K: ndarray, shape (M, n_kv, D)
        n_kv = h for MHA, 1 for MQA, the group count for GQA;
        query head i reads key head i // (h / n_kv).

    V: ndarray, shape (M, n_kv, E)

    counter: MacCounter, optional
        Receives h M D score and h M E value MACs.

    Returns:
    --------

    out: ndarray, shape (h, E)
    """
    q = np.asarray(q)
    M, n_kv, D = K.shape
    h = q.shape[0]
    if M == 0:
        raise EmptyInputError('dense_decode: empty cache')
    if h % n_kv or q.shape[1] != D or V.shape[:2] != (M, n_kv):
        raise ShapeError('dense_decode: incompatible shapes')
    size = h // n_kv
    qg = q.reshape(n_kv, size, D)
    logits = np.einsum('gid,mgd->gim', qg, K) / np.sqrt(D)
    probs, _ = softmax_lse(logits)
    out = np.einsum('gim,mge->gie', probs, V).reshape(h, -1)
    if counter is not None:
        counter.add(score=h * M * D, value=h * M * V.shape[2])
    return out
