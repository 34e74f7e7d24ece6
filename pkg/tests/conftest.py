import numpy as np
import pytest

from tpamodels.models import rope
from tpamodels.models.kv_cache import FactorizedKvCache
from tpamodels.models.tpa_factor import FactorBlock


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


def random_block(rng, rank, h, d, d_c=None):
    return FactorBlock(rng.standard_normal((rank, h)),
                       rng.standard_normal((rank, d)),
                       None if d_c is None
                       else rng.standard_normal((rank, d_c)))


def filled_cache(rng, cfg, length, start_position=0):
    """Second order full/kv_only cache with random, pre-rotated factors."""
    cache = FactorizedKvCache(cfg, start_position=start_position)
    table = rope.rope_table_for(cfg)
    for _ in range(length):
        k = random_block(rng, cfg.r_k, cfg.h, cfg.d_h)
        cache.append(rope.pre_rotate_key(k, cache.next_position, table),
                     random_block(rng, cfg.r_v, cfg.h, cfg.value_dim))
    return cache


def materialized_cache(cache):
    """(K, V) head tensors of shape (M, h, d) from a cache."""
    blk = cache.read_block(0, len(cache))
    K = np.einsum('msh,msd->mhd', blk.a_k, blk.b_k) / cache.cfg.r_k
    V = np.einsum('muh,mue->mhe', blk.a_v, blk.b_v) / cache.cfg.r_v
    return K, V
