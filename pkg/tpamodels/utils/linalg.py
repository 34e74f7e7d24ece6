"""
Dense linear algebra helpers used by the attention code.

Matrices are plain 2D numpy arrays of dtype np.float64 in
row-major (C) order. The matmul routine runs a numba kernel
with a fixed, sequential inner-product order so that results
do not depend on the BLAS build present on the machine.

Attributes:
-----------

MASK_VALUE: float
    The most negative finite float64. Masked logits are
    replaced by this value instead of -inf so that no
    inf - inf = nan can appear in the softmax.
"""

import logging

import numpy as np
import numba as nb
from scipy.special import expit

from .errors import ShapeError, DegenerateRowError

logger = logging.getLogger(__name__)

MASK_VALUE = float(np.finfo(np.float64).min)


@nb.njit("float64[:, :](float64[:, :], float64[:, :])")
def _matmul_kernel(a, b):
    """
    Naive triple loop; the inner sum always runs over
    p = 0, 1, ..., k - 1.
    """
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def as_matrix(x, name='matrix'):
    """
    Convert x into a C-contiguous float64 2D array.

    Raises:
    -------
    ShapeError: if x is not two-dimensional.
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f'{name}: expected a 2D array, got ndim={arr.ndim}')
    return arr


def matmul(a, b):
    """
    Deterministic matrix product.

    Parameters:
    -----------

    a: 2D ndarray, shape (n, k)

    b: 1D or 2D ndarray, shape (k,) or (k, m)
        A 1D right operand is treated as a column
        vector and a 1D result is returned.

    Returns:
    --------

    out: ndarray, shape (n, m) or (n,)

    Raises:
    -------
    ShapeError: if the inner dimensions differ.
    """
    a = as_matrix(a, 'matmul left operand')
    vector = np.ndim(b) == 1
    b = as_matrix(np.reshape(b, (-1, 1)) if vector else b,
                  'matmul right operand')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(('matmul: inner dimensions differ: '
                          f'{a.shape} x {b.shape}'))
    out = _matmul_kernel(a, b)
    return out[:, 0] if vector else out


def outer(u, v):
    """
    Outer product u v^T of two nonempty vectors.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError('outer: both operands must be 1D')
    if u.size == 0 or v.size == 0:
        raise ShapeError('outer: empty operand')
    return np.multiply.outer(u, v)


def keep_mask(mask, shape):
    """
    Normalise a mask to a boolean array (True = attend).

    Boolean masks are taken as they are. Additive masks
    mark an entry as masked when it is -inf or MASK_VALUE.
    The result is broadcast to `shape`.
    """
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        mask = ~(mask <= MASK_VALUE)
    try:
        return np.broadcast_to(mask, shape)
    except ValueError as exc:
        raise ShapeError(f'mask of shape {mask.shape} does not '
                         f'broadcast to {shape}') from exc


def additive_mask(mask):
    """
    Convert a boolean mask into its additive form with
    0 for kept entries and MASK_VALUE for masked ones.
    """
    return np.where(np.asarray(mask, dtype=bool), 0., MASK_VALUE)


def softmax_lse(logits, mask=None):
    """
    Row-wise masked softmax along the last axis.

    Parameters:
    -----------

    logits: ndarray, shape (..., n)

    mask: ndarray or None
        Either a boolean mask (True = attend) or an additive
        mask with entries in {0, -inf, MASK_VALUE}. Finite
        nonzero additive entries act as a bias.

    Returns:
    --------

    probs: ndarray, shape (..., n)
        Rows sum to one; masked entries are exactly 0.

    lse: ndarray, shape (...)
        log(sum(exp(l - max))) + max over unmasked entries.

    Raises:
    -------
    DegenerateRowError: if a row has every entry masked.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise ShapeError('softmax_lse: empty row')
    keep = keep_mask(mask, logits.shape)
    if mask is not None and np.asarray(mask).dtype != np.bool_:
        bias = np.where(keep, np.broadcast_to(mask, logits.shape), 0.)
        logits = logits + bias
    if not np.all(np.any(keep, axis=-1)):
        raise DegenerateRowError('softmax_lse: a row is fully masked')

    masked = np.where(keep, logits, MASK_VALUE)
    row_max = np.max(masked, axis=-1, keepdims=True)
    expo = np.where(keep, np.exp(masked - row_max), 0.)
    total = np.sum(expo, axis=-1, keepdims=True)
    probs = expo / total
    lse = np.log(total[..., 0]) + row_max[..., 0]
    return probs, lse


def sigmoid(x):
    return expit(x)


def silu(x):
    """SiLU(x) = x * sigmoid(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)
