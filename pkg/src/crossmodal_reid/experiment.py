"""Toy separation experiment: full objective vs angular-only vs Euclidean triplet.

Every variant shares the data, encoder widths and optimiser schedule; only
the loss terms and the non-local switch differ.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SynthConfig, synth_generate
from .encoder import EncoderConfig
from .evaluation import evaluate_protocol
from .trainer import TrainConfig, train

# name -> (loss weights, non-local block, compactness term)
VARIANTS = {
    "full": ({"eat": 1.0, "cmkd": 1.0, "id": 1.0, "triplet": 0.0}, True, True),
    "eat": ({"eat": 1.0, "cmkd": 0.0, "id": 1.0, "triplet": 0.0}, False, True),
    "baseline": ({"eat": 0.0, "cmkd": 0.0, "id": 1.0, "triplet": 1.0}, False, False),
}


def toy_data_config(seed=0):
    return SynthConfig(identities=32, samples_per_identity=8, feature_shape=(8, 3, 3), noise=0.4,
                       modality_offset=1.0, spatial=0.5, seed=seed)


@dataclass
class VariantResult:
    variant: str
    seed: int
    rank1: float
    mAP: float
    seconds: float
    history: object = field(default=None, repr=False)


def run_variant(variant, seed=0, steps=2000, data_config=None, trials=10, **train_overrides):
    """Train one variant on the seeded toy data and score infrared queries
    against single-shot visible galleries of the held-out split."""
    weights, non_local, compact = VARIANTS[variant]
    data_cfg = data_config or toy_data_config(seed)
    train_set, test_set = synth_generate(data_cfg, "train"), synth_generate(data_cfg, "test")
    enc_cfg = EncoderConfig(input_shape=data_cfg.feature_shape, embedding_dim=32, non_local=non_local, seed=seed)
    cfg = TrainConfig.toy(seed=seed, steps=steps, weights=dict(weights), compactness=compact, **train_overrides)
    start = time.perf_counter()
    encoder, history = train(train_set, enc_cfg, cfg)
    ir = test_set.modalities == "infrared"
    query = encoder.embed(test_set.features[ir], "infrared")
    gallery = encoder.embed(test_set.features[~ir], "visible")
    report = evaluate_protocol(query, test_set.identities[ir], gallery, test_set.identities[~ir],
                               trials=trials, shots=1, rng=seed)
    return VariantResult(variant, seed, report.rank1, report.mAP, time.perf_counter() - start, history)


def noise_band(a, b, k=2.0):
    """``k`` standard errors of the difference between two per-seed means."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return k * float(np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size))


@dataclass
class SeparationSummary:
    results: dict
    seconds: float

    def maps(self, variant):
        return [r.mAP for r in self.results[variant]]

    def mean_map(self, variant):
        return float(np.mean(self.maps(variant)))


def separation_experiment(seeds=range(5), variants=tuple(VARIANTS), **kwargs):
    start = time.perf_counter()
    results = {v: [run_variant(v, seed=s, **kwargs) for s in seeds] for v in variants}
    return SeparationSummary(results, time.perf_counter() - start)


def variant_config(variant):
    """Loss weights and switches of ``variant`` as a plain dict (for reports)."""
    weights, non_local, compact = VARIANTS[variant]
    return {"weights": dict(weights), "non_local": non_local, "compactness": compact,
            "train": dataclasses.asdict(TrainConfig.toy())}
