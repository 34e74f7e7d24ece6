"""
This subpackage contains the attention mechanisms
themselves.

Modules:
--------

tpa_factor: configuration, weights and contextual factors of
            tensor product attention.

rope: rotary position embeddings acting on the factors.

attention_ref: materialized reference attention and the
               MHA/MQA/GQA reductions to non-contextual factors.

kv_cache: the factorized key/value cache.

flash_decode: blocked online-softmax decoding over the cache.

counters: multiply-add bookkeeping of the decode kernels.

t6_block: a pre-norm transformer block built on tpa attention.

prepare_model: helper routines that assemble decode kernels
               for the main scripts.
"""
