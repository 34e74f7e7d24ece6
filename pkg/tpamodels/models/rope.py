"""
Rotary position embeddings (RoPE).

Vectors are rows. The rotation at position t acts on the
coordinate pairs (2j, 2j + 1) with angle t * theta_j where

    theta_j = base ** (-2 j / dim),   j = 0, ..., dim / 2 - 1.

rotation_matrix() returns the block-diagonal R_t with blocks
[[cos, -sin], [sin, cos]]; a row v is mapped to v R_t^T, i.e.
the column vector v^T is rotated by R_t. With T_t = R_t^T the
relative identity T_t T_s^T = T_{t - s} holds.

Keys are rotated once, before they are written to the cache
(pre_rotate_key), so decoding never touches cached keys again.
"""

from dataclasses import dataclass

import numpy as np

from tpamodels.utils.errors import ConfigError, ShapeError
from ._common_keys import rope_base_default


@dataclass(frozen=True)
class RopeTable:
    """
    Rotary frequencies for vectors of even length `dim`.

    Attributes:
    -----------

    theta: ndarray, shape (dim // 2,)
        Strictly decreasing angular frequencies, theta[0] == 1.
    """
    dim: int
    base: float = rope_base_default

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ConfigError(f'RopeTable: dim must be even and positive, '
                              f'got {self.dim}')
        if self.base <= 1.:
            raise ConfigError('RopeTable: base must exceed 1')
        j = np.arange(self.dim // 2, dtype=np.float64)
        object.__setattr__(self, 'theta',
                           self.base ** (-2. * j / self.dim))

    def angles(self, positions):
        """Angles t * theta_j, shape positions.shape + (dim // 2,)."""
        positions = np.asarray(positions, dtype=np.float64)
        return positions[..., None] * self.theta


def rope_table_for(cfg):
    """Table for the rotated factor of a TpaConfig (d_h, or d_b)."""
    return RopeTable(cfg.token_dim, cfg.rope_base)


def rotation_matrix(table, t):
    """Block-diagonal dim x dim rotation R_t."""
    ang = table.angles(t)
    cos, sin = np.cos(ang), np.sin(ang)
    rot = np.zeros((table.dim, table.dim))
    even = np.arange(0, table.dim, 2)
    rot[even, even] = cos
    rot[even, even + 1] = -sin
    rot[even + 1, even] = sin
    rot[even + 1, even + 1] = cos
    return rot


def _rotate(m, cos, sin):
    x0 = m[..., 0::2]
    x1 = m[..., 1::2]
    out = np.empty_like(m)
    out[..., 0::2] = cos * x0 - sin * x1
    out[..., 1::2] = sin * x0 + cos * x1
    return out


def _check_width(table, m):
    if m.shape[-1] != table.dim:
        raise ShapeError(f'RoPE: rows of length {m.shape[-1]} do not match '
                         f'a table of dim {table.dim}')


def apply_rope_rows(table, t, m):
    """
    Rotate every row of m (shape (..., dim)) to position t.

    Parameters:
    -----------

    table: RopeTable

    t: int
        Position; negative values rotate backwards.

    m: ndarray, shape (..., dim)

    Returns:
    --------

    ndarray of the same shape, rows v replaced by v R_t^T.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_width(table, m)
    ang = table.angles(t)
    return _rotate(m, np.cos(ang), np.sin(ang))


def apply_rope_positions(table, positions, m):
    """
    Rotate m (shape (T, ..., dim)) so that slice i is at
    position positions[i].
    """
    m = np.asarray(m, dtype=np.float64)
    _check_width(table, m)
    positions = np.asarray(positions)
    if positions.shape != m.shape[:1]:
        raise ShapeError(f'RoPE: {positions.shape[0]} positions for '
                         f'{m.shape[0]} slices')
    ang = table.angles(positions)
    ang = ang.reshape(ang.shape[:1] + (1,) * (m.ndim - 2) + ang.shape[1:])
    return _rotate(m, np.cos(ang), np.sin(ang))


def pre_rotate_key(block, t, table):
    """
    Rotate the token-dimension factor B of a key block to
    position t. A (and C for third order) are left untouched.
    """
    return block.replace(b=apply_rope_rows(table, t, block.b))


def higher_order_transform(table, t, d_c):
    """
    Position transform I_{d_c} (x) R_t^T acting on row vectors
    vec(b c^T) of length d_b * d_c (table.dim == d_b). It
    rotates every b factor by R_t and leaves c alone.
    """
    if d_c < 1:
        raise ConfigError('higher_order_transform: d_c must be positive')
    return np.kron(np.eye(d_c), rotation_matrix(table, t).T)
