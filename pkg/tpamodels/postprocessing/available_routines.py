from .invariants import suite_linalg, suite_tpa_factor, suite_rope
from .invariants import suite_attention_ref, suite_kv_cache
from .invariants import suite_flash_decode, suite_cost_model, suite_t6_block
from .invariants import available_faults
# Suites available to the verify command:
# each entry maps the suite name to [suite function, description]
#
# linalg: deterministic matmul, softmax with log-sum-exp, outer products
#
# tpa-factor: materialization, rank bound, variants, third order
#
# flash-decode: oracle equivalence, block size invariance, masking,
# running maximum, multiply-add counters
_suites_dict = {
    'linalg': [suite_linalg, 'dense linear algebra kernels'],
    'tpa-factor': [suite_tpa_factor, 'factor computation and materialization'],
    'rope': [suite_rope, 'rotary embeddings'],
    'attention-ref': [suite_attention_ref,
                      'MHA/MQA/GQA as non-contextual TPA'],
    'kv-cache': [suite_kv_cache, 'factorized cache accounting and snapshots'],
    'flash-decode': [suite_flash_decode, 'blocked factorized decoding'],
    'cost-model': [suite_cost_model, 'analytic cost accounting'],
    't6-block': [suite_t6_block, 'transformer block'],
}

__all__ = ['_suites_dict', 'available_faults']
