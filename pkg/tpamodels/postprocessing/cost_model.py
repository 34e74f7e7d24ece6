"""
Analytic memory, parameter and FLOP accounting of attention
mechanisms (MHA, MQA, GQA, MLA and the TPA family).

Notation: d_model hidden size, h heads of dimension d_h, g key/value
groups, r_q/r_k/r_v TPA ranks, d_c and d_c_prime the MLA key/value
and query latent sizes, d_h_rope the decoupled rotary dimension.
All counts are exact integers.

Parameter counts include the output projection. Where a formula is
usually written with d_model^2 it is written here with d_model h d_h,
which is the same when h d_h = d_model and stays correct when it is
not.
"""

import json
import logging
from dataclasses import dataclass, asdict, fields
from typing import NamedTuple, Optional

from tpamodels.utils.errors import ConfigError, SpecParseError
from tpamodels.models._common_keys import mechanism_kinds

logger = logging.getLogger(__name__)

_REQUIRED = {'mha': (),
             'mqa': (),
             'gqa': ('g',),
             'mla': ('d_c', 'd_c_prime', 'd_h_rope'),
             'tpa': ('r_q', 'r_k', 'r_v'),
             'tpa_kv_only': ('r_k', 'r_v'),
             'tpa_non_ctx_a': ('r_q', 'r_k', 'r_v'),
             'tpa_non_ctx_b': ('r_q', 'r_k', 'r_v')}


@dataclass(frozen=True)
class MechanismSpec:
    """
    Description of one attention mechanism for the cost model.

    Parameters:
    -----------

    kind: str
        One of _common_keys.mechanism_kinds.

    d_model, h, d_h: int
        Always required.

    g: int
        Number of key/value groups (gqa).

    r_q, r_k, r_v: int
        Ranks (TPA kinds; r_q not needed for tpa_kv_only).

    d_c, d_c_prime, d_h_rope: int
        MLA latent sizes.

    label: str
        Free text carried to the reports.
    """
    kind: str
    d_model: int
    h: int
    d_h: int
    g: Optional[int] = None
    r_q: Optional[int] = None
    r_k: Optional[int] = None
    r_v: Optional[int] = None
    d_c: Optional[int] = None
    d_c_prime: Optional[int] = None
    d_h_rope: Optional[int] = None
    label: str = ''

    def __post_init__(self):
        if self.kind not in mechanism_kinds:
            raise ConfigError(f'MechanismSpec: unknown kind {self.kind!r}; '
                              f'available: {mechanism_kinds}')
        for key in ('d_model', 'h', 'd_h') + _REQUIRED[self.kind]:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f'MechanismSpec: {self.kind} needs {key}')
            if not isinstance(value, int) or isinstance(value, bool) \
                    or value < 1:
                raise ConfigError(f'MechanismSpec: {key} must be a positive '
                                  f'integer, got {value!r}')
        if self.kind == 'gqa' and self.h % self.g:
            raise ConfigError(f'MechanismSpec: h = {self.h} is not '
                              f'divisible by g = {self.g}')

    @classmethod
    def from_dict(cls, entry):
        known = {f.name for f in fields(cls)}
        unknown = set(entry) - known
        if unknown:
            raise ConfigError('MechanismSpec: unknown keys {}'.format(
                sorted(unknown)))
        try:
            return cls(**entry)
        except TypeError as exc:
            raise ConfigError(f'MechanismSpec: {exc}') from exc

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v not in (None, '')}


class DecodeFlops(NamedTuple):
    """
    projection: multiply-adds of the per-token projections.
    attention_coeff: per-token attention multiply-adds per cached
        token; the attention cost of one decode step over M cached
        tokens is attention_coeff * M.
    """
    projection: int
    attention_coeff: int

    def total(self, seqlen):
        return self.projection + self.attention_coeff * seqlen


class SpeedupCheck(NamedTuple):
    holds: bool
    lhs: int
    rhs: int


@dataclass(frozen=True)
class CostReport:
    kind: str
    label: str
    params: int
    kv_numbers_per_token: int
    kv_bytes_per_token: int
    projection_flops: int
    attention_coeff: int


def kv_cache_numbers_per_token(spec):
    """Cached numbers per token and layer."""
    kind, h, d_h = spec.kind, spec.h, spec.d_h
    if kind == 'mha':
        return 2 * h * d_h
    if kind == 'mqa':
        return 2 * d_h
    if kind == 'gqa':
        return 2 * spec.g * d_h
    if kind == 'mla':
        return spec.d_c + spec.d_h_rope
    r_kv = spec.r_k + spec.r_v
    if kind in ('tpa', 'tpa_kv_only'):
        return r_kv * (h + d_h)
    if kind == 'tpa_non_ctx_a':
        return r_kv * d_h
    return r_kv * h


def attention_params(spec):
    """Parameters of the attention layer, output projection included."""
    kind, d, h, d_h = spec.kind, spec.d_model, spec.h, spec.d_h
    out = d * h * d_h
    if kind == 'mha':
        return 4 * out
    if kind == 'mqa':
        return d * d_h * (2 * h + 2)
    if kind == 'gqa':
        return d * d_h * (2 * h + 2 * spec.g)
    if kind == 'mla':
        d_r = spec.d_h_rope
        return (spec.d_c_prime * (d + h * d_h + h * d_r) + d * d_r
                + spec.d_c * (d + 2 * h * d_h) + out)
    if kind == 'tpa_kv_only':
        return d * (spec.r_k + spec.r_v) * (h + d_h) + 2 * out
    ranks = spec.r_q + spec.r_k + spec.r_v
    if kind == 'tpa':
        return d * ranks * (h + d_h) + out
    if kind == 'tpa_non_ctx_a':
        return ranks * (d * d_h + h) + out
    return ranks * (d * h + d_h) + out


def decode_flops(spec):
    """
    Per-token decode cost: projections and the attention
    coefficient multiplying the number of cached tokens.
    """
    kind, d, h, d_h = spec.kind, spec.d_model, spec.h, spec.d_h
    if kind == 'mha':
        return DecodeFlops(3 * d * h * d_h, 2 * h * d_h)
    if kind == 'mqa':
        return DecodeFlops(d * d_h * (h + 2), 2 * h * d_h)
    if kind == 'gqa':
        return DecodeFlops(d * (h + 2 * spec.g) * d_h, 2 * h * d_h)
    if kind == 'mla':
        lat = spec.d_c + spec.d_h_rope
        return DecodeFlops(d * (lat * h + lat), h * (2 * spec.d_c
                                                      + spec.d_h_rope))
    r_q, r_k, r_v = spec.r_q, spec.r_k, spec.r_v
    value = r_v * h * (1 + d_h)
    if kind == 'tpa_kv_only':
        return DecodeFlops(d * (r_k + r_v) * (h + d_h) + d * h * d_h,
                           r_k * (h * d_h + h) + value)
    ranks = r_q + r_k + r_v
    if kind == 'tpa':
        projection = d * ranks * (h + d_h)
    elif kind == 'tpa_non_ctx_a':
        projection = ranks * d * d_h
    else:
        projection = ranks * d * h
    return DecodeFlops(projection,
                       r_k * (r_q * d_h + h * r_q + h) + value)


def specialized_speedup_holds(spec, D=None, E=None):
    """
    Whether factorized decoding needs fewer multiply-adds per cached
    token than materialized decoding:

        R_Q R_K D + H R_Q R_K + H R_V E  <  2 H D   (strict).

    D and E default to d_h.
    """
    if spec.kind not in ('tpa', 'tpa_non_ctx_a', 'tpa_non_ctx_b'):
        raise ConfigError('specialized_speedup_holds: needs a factorized '
                          'query (tpa kinds other than tpa_kv_only)')
    D = spec.d_h if D is None else D
    E = spec.d_h if E is None else E
    r_q, r_k, r_v, h = spec.r_q, spec.r_k, spec.r_v, spec.h
    lhs = r_q * r_k * D + h * r_q * r_k + h * r_v * E
    rhs = 2 * h * D
    return SpeedupCheck(lhs < rhs, lhs, rhs)


def cost_report(spec, element_bytes=2):
    numbers = kv_cache_numbers_per_token(spec)
    flops = decode_flops(spec)
    return CostReport(kind=spec.kind, label=spec.label,
                      params=attention_params(spec),
                      kv_numbers_per_token=numbers,
                      kv_bytes_per_token=numbers * element_bytes,
                      projection_flops=flops.projection,
                      attention_coeff=flops.attention_coeff)


def comparison_table(specs, element_bytes=2):
    return [cost_report(spec, element_bytes) for spec in specs]


csv_columns = ['kind', 'params', 'kv_numbers_per_token',
               'projection_flops', 'attention_coeff']

footer_cost_table = """
Each row describes one attention mechanism and is organised as follows:

0) kind: mechanism kind (mha, mqa, gqa, mla, tpa, tpa_kv_only,
   tpa_non_ctx_a, tpa_non_ctx_b)
1) params: parameters of the attention layer including the output
   projection
2) kv_numbers_per_token: cached numbers per token and layer
3) projection_flops: multiply-adds of the per-token projections
4) attention_coeff: multiply-adds per cached token of one decode step
"""


def report_rows(reports):
    return [{col: getattr(r, col) for col in csv_columns} for r in reports]


def _split_array(text):
    """Yield (entry, lineno) for the elements of a JSON array."""
    decoder = json.JSONDecoder()
    pos = text.index('[') + 1
    n = len(text)
    while True:
        while pos < n and text[pos] in ' \t\r\n,':
            pos += 1
        if pos >= n:
            raise SpecParseError('unterminated JSON array',
                                 text.count('\n', 0, n) + 1)
        if text[pos] == ']':
            return
        lineno = text.count('\n', 0, pos) + 1
        try:
            entry, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            raise SpecParseError(exc.msg, exc.lineno) from exc
        yield entry, lineno


def parse_specs(text):
    """
    Parse mechanism specs given either as a JSON array of objects
    or as JSON lines (one object per line).

    Raises:
    -------
    SpecParseError: with the line of the offending entry.
    """
    stripped = text.lstrip()
    if stripped.startswith('['):
        items = _split_array(text)
    else:
        items = ((line, i + 1) for i, line in enumerate(text.splitlines())
                 if line.strip() and not line.lstrip().startswith('#'))
    specs = []
    for item, lineno in items:
        if isinstance(item, str):
            try:
                item = json.loads(item)
            except json.JSONDecodeError as exc:
                raise SpecParseError(exc.msg, lineno) from exc
        if not isinstance(item, dict):
            raise SpecParseError('expected a JSON object', lineno)
        try:
            specs.append(MechanismSpec.from_dict(item))
        except ConfigError as exc:
            raise SpecParseError(str(exc), lineno) from exc
    if not specs:
        logger.warning('no mechanism specs found')
    return specs


def load_specs(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise SpecParseError(f'cannot read file: {exc.strerror}') from exc
    return parse_specs(text)


def _example(d_model, h, d_h, g, d_c, d_h_rope, d_c_prime):
    common = {'d_model': d_model, 'h': h, 'd_h': d_h}
    specs = [MechanismSpec('mha', **common, label='MHA'),
             MechanismSpec('mqa', **common, label='MQA'),
             MechanismSpec('gqa', **common, g=g, label=f'GQA g={g}'),
             MechanismSpec('mla', **common, d_c=d_c, d_c_prime=d_c_prime,
                           d_h_rope=d_h_rope, label='MLA')]
    for r_q, r_kv in ((16, 1), (16, 2), (8, 1), (8, 2)):
        specs.append(MechanismSpec('tpa', **common, r_q=r_q, r_k=r_kv,
                                   r_v=r_kv,
                                   label=f'TPA ({r_q},{r_kv},{r_kv})'))
    return specs


presets = {
    'example-i': lambda: _example(2048, 32, 64, 4, 256, 32, 768),
    'example-ii': lambda: _example(4096, 32, 128, 4, 512, 64, 1536),
    'example-iii': lambda: _example(7168, 64, 128, 8, 512, 64, 1536),
}
