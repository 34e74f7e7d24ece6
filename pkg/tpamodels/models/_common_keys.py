"""
Specifies the names, keys and defaults shared by the
attention models, the cost model and the command-line
scripts.

Attributes:
-----------

tpa_variants: list
    Supported TPA factorization variants:
    'full' (contextual factors everywhere),
    'kv_only' (dense queries, factorized keys and values),
    'non_contextual_a' (fixed head factors, contextual token
    factors), 'non_contextual_b' (contextual head factors,
    fixed token factors) and 'shared_b' (keys and values share
    the token-dimension projection).

tpa_orders: list
    'second' for the a (x) b factorization, 'third' for
    a (x) vec(b (x) c).

tpa_config_keys: list
    Keys of a flat TPA configuration dictionary, as stored in
    the headers of weight files and cache snapshots.

mechanism_kinds: list
    Mechanisms known to the cost model.

rope_base_default: float
    Base of the RoPE frequencies.

rms_eps_default: float
    Epsilon of the RMSNorm in the transformer block.
"""

tpa_variants = ['full', 'kv_only', 'non_contextual_a',
                'non_contextual_b', 'shared_b']

tpa_orders = ['second', 'third']

tpa_config_keys = ['d_model', 'h', 'd_h', 'r_q', 'r_k', 'r_v',
                   'variant', 'order', 'd_b', 'd_c', 'rope_base',
                   'value_dim']

rope_base_default = 10000.

rms_eps_default = 1e-6

mechanism_kinds = ['mha', 'mqa', 'gqa', 'mla', 'tpa', 'tpa_kv_only',
                   'tpa_non_ctx_a', 'tpa_non_ctx_b']

# which cost model kind corresponds to a TPA variant
variant_to_kind = {'full': 'tpa',
                   'shared_b': 'tpa',
                   'kv_only': 'tpa_kv_only',
                   'non_contextual_a': 'tpa_non_ctx_a',
                   'non_contextual_b': 'tpa_non_ctx_b'}
