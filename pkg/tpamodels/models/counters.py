"""
Multiply-accumulate counters for the decoding kernels.

Per cached token and per query the TPA decode step performs

    mac_score  R_Q R_K D      head-shared feature dot products
    mac_mix    H R_Q R_K      per-head rank mixing of the scores
    mac_value  H R_V E        value aggregation over the B_V factors
    mac_aux    H R_K + H R_V  key head-factor contraction and the
                              weighting of A_V by the probabilities

The first three are the terms of the decode speed condition,
all four together are the decode attention coefficient of the
cost model. Materialized decoding only uses mac_score (H D)
and mac_value (H E).
"""

import json
from dataclasses import dataclass, asdict


@dataclass
class MacCounter:
    mac_score: int = 0
    mac_mix: int = 0
    mac_value: int = 0
    mac_aux: int = 0

    def add(self, score=0, mix=0, value=0, aux=0):
        self.mac_score += int(score)
        self.mac_mix += int(mix)
        self.mac_value += int(value)
        self.mac_aux += int(aux)

    def merge(self, other):
        self.add(other.mac_score, other.mac_mix, other.mac_value,
                 other.mac_aux)
        return self

    @property
    def leading(self):
        """mac_score + mac_mix + mac_value."""
        return self.mac_score + self.mac_mix + self.mac_value

    @property
    def total(self):
        return self.leading + self.mac_aux

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)
