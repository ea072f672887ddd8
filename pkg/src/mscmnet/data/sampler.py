"""Identity-balanced cross-modal batch sampling.

An epoch is `rounds` shuffled passes over the identity list, each chunked
into groups of P; a short final chunk is topped up with the earliest
identities of the same permutation, so per-pass identity usage counts differ
by at most one.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError


@dataclass
class SamplerConfig:
    num_ids: int = 6
    num_v: int = 4
    num_t: int = 4
    rounds: int = 1

    def validate(self):
        if self.num_ids < 2:
            raise ConfigError(f"sampler needs >= 2 identities per batch, got {self.num_ids}")
        if self.num_v < 1 or self.num_t < 1:
            raise ConfigError("sampler needs >= 1 sample per identity per modality")
        if self.rounds < 1:
            raise ConfigError(f"sampler rounds must be >= 1, got {self.rounds}")
        return self


class EpochSampler:
    def __init__(self, dataset, cfg):
        cfg.validate()
        self.dataset = dataset
        self.cfg = cfg
        self.ids = [
            i for i in dataset.identities()
            if dataset.records_of(i, "V") and dataset.records_of(i, "T")
        ]
        if len(self.ids) < cfg.num_ids:
            raise DataError(
                f"need >= {cfg.num_ids} identities with both modalities, found {len(self.ids)}"
            )

    def batches_per_epoch(self):
        return self.cfg.rounds * -(-len(self.ids) // self.cfg.num_ids)

    def _draw(self, records, count, rng):
        idx = rng.choice(len(records), size=count, replace=len(records) < count)
        return [records[i] for i in idx]

    def epoch(self, rng):
        """Yield (v_records, t_records) batches, id-major within each batch."""
        p = self.cfg.num_ids
        for _ in range(self.cfg.rounds):
            perm = [self.ids[i] for i in rng.permutation(len(self.ids))]
            for start in range(0, len(perm), p):
                chunk = perm[start:start + p]
                if len(chunk) < p:
                    fill = [i for i in perm if i not in chunk]
                    chunk = chunk + fill[:p - len(chunk)]
                v_recs, t_recs = [], []
                for ident in chunk:
                    v_recs.extend(self._draw(self.dataset.records_of(ident, "V"), self.cfg.num_v, rng))
                    t_recs.extend(self._draw(self.dataset.records_of(ident, "T"), self.cfg.num_t, rng))
                yield v_recs, t_recs
