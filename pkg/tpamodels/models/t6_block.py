"""
A pre-norm transformer block with TPA attention:

    x <- x + TPA(RMSNorm(x))
    x <- x + SwiGLU(RMSNorm(x))

with SwiGLU(x) = [SiLU(x W1) * (x W2)] W3. The attention sublayer
rotates the query and key factors to their positions and runs the
blocked factorized attention, so no head matrices are formed.
"""

import logging
from dataclasses import dataclass

import numpy as np

from tpamodels.utils import linalg
from tpamodels.utils.errors import ConfigError, ShapeError
from ._common_keys import rms_eps_default
from .attention_ref import causal_mask
from .flash_decode import rotate_sequence, specialized_full_attention
from .tpa_factor import FactorWeights, compute_factors_seq, init_weights, \
    xavier_init

logger = logging.getLogger(__name__)


def default_d_ff(d_model):
    """8/3 d_model rounded up to a multiple of 8."""
    return int(np.ceil(8. * d_model / 3. / 8.)) * 8


@dataclass
class BlockWeights:
    tpa: FactorWeights
    rms_gain_attn: np.ndarray
    rms_gain_ffn: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    def __post_init__(self):
        d_model = self.tpa.cfg.d_model
        d_ff = np.shape(self.w1)[1] if np.ndim(self.w1) == 2 else -1
        expected = {'rms_gain_attn': (d_model,), 'rms_gain_ffn': (d_model,),
                    'w1': (d_model, d_ff), 'w2': (d_model, d_ff),
                    'w3': (d_ff, d_model)}
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ConfigError(f'BlockWeights: {name} has shape '
                                  f'{np.shape(getattr(self, name))}, '
                                  f'expected {shape}')


def init_block_weights(cfg, seed, d_ff=None):
    """Xavier-initialised block with unit RMSNorm gains."""
    d_ff = default_d_ff(cfg.d_model) if d_ff is None else d_ff
    seeds = [int(s.generate_state(1)[0])
             for s in np.random.SeedSequence(seed).spawn(4)]
    return BlockWeights(tpa=init_weights(cfg, seeds[0]),
                        rms_gain_attn=np.ones(cfg.d_model),
                        rms_gain_ffn=np.ones(cfg.d_model),
                        w1=xavier_init(d_ff, cfg.d_model, seeds[1]),
                        w2=xavier_init(d_ff, cfg.d_model, seeds[2]),
                        w3=xavier_init(cfg.d_model, d_ff, seeds[3]))


def rms_norm(x, gain, eps=rms_eps_default):
    """
    Row-wise RMSNorm, x / sqrt(mean(x^2) + eps) * gain.

    Parameters:
    -----------

    x: ndarray, shape (..., d_model)

    gain: ndarray, shape (d_model,)

    eps: float
    """
    x = np.asarray(x, dtype=np.float64)
    if np.shape(gain) != x.shape[-1:]:
        raise ShapeError('rms_norm: gain does not match the row length')
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * gain


def swiglu_ffn(x, w1, w2, w3):
    """[SiLU(x W1) * (x W2)] W3 for x of shape (T, d_model) or (d_model,)."""
    single = np.ndim(x) == 1
    x = np.atleast_2d(x)
    gate = linalg.silu(linalg.matmul(x, w1))
    out = linalg.matmul(gate * linalg.matmul(x, w2), w3)
    return out[0] if single else out


def tpa_sublayer(X, weights, cfg, causal=True, position_offset=0,
                 block_size=256):
    """
    TPA attention of a normalised sequence X (T, d_model),
    followed by the output projection W_O.
    """
    factors = compute_factors_seq(weights, cfg, X)
    T = X.shape[0]
    positions = position_offset + np.arange(T)
    q, k, v = rotate_sequence(cfg, factors, positions)
    mask = causal_mask(T, T) if causal else None
    heads = specialized_full_attention(q, k, v, mask, block_size)
    return linalg.matmul(heads.reshape(T, -1), weights.w_o)


def block_forward(X, weights, cfg, causal=True, position_offset=0,
                  block_size=256):
    """
    Forward pass of one block.

    Parameters:
    -----------

    X: ndarray, shape (T, d_model)

    weights: BlockWeights

    cfg: TpaConfig

    causal: bool

    position_offset: int
        Position of the first token.

    Returns:
    --------

    ndarray, shape (T, d_model)
    """
    X = linalg.as_matrix(X, 'block_forward input')
    if X.shape[1] != cfg.d_model:
        raise ShapeError(f'block_forward: X has {X.shape[1]} columns, '
                         f'expected {cfg.d_model}')
    attn = tpa_sublayer(rms_norm(X, weights.rms_gain_attn), weights.tpa,
                        cfg, causal, position_offset, block_size)
    X = X + attn
    ffn = swiglu_ffn(rms_norm(X, weights.rms_gain_ffn), weights.w1,
                     weights.w2, weights.w3)
    return X + ffn
