"""Cross-modality tuple sampling.

Each tuple starts from an anchor pair (one visible and one infrared image of
the same identity), adds a positive of that identity and a negative of a
different identity, both in the two modalities: ``N x 2 x 3`` records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .exceptions import DatasetError, ParameterError

ROLE_KEYS = ("anchor", "positive", "negative")
_SLOTS = tuple((role, modality) for role in ROLE_KEYS for modality in ("visible", "infrared"))


@dataclass(frozen=True)
class TupleBatch:
    """Record indices of a sampled batch.

    ``index[(role, modality)]`` is an ``(N,)`` array of dataset row indices;
    ``labels`` are the anchor identities, ``negative_labels`` those of the
    negatives.
    """

    index: dict
    labels: np.ndarray
    negative_labels: np.ndarray
    seed: object = None

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, TupleBatch):
            return NotImplemented
        return (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.negative_labels, other.negative_labels)
            and all(np.array_equal(self.index[k], other.index[k]) for k in _SLOTS)
        )

    def records(self, dataset: Dataset):
        """The ``6N`` SampleRecords, tuple by tuple."""
        out = []
        for i in range(len(self)):
            for key in _SLOTS:
                out.append(dataset.records[int(self.index[key][i])])
        return out


class TupleSampler:
    """Draws TupleBatches from a dataset with its own seeded generator."""

    def __init__(self, dataset: Dataset, batch_size=8, seed=0):
        if batch_size < 1:
            raise ParameterError("batch size must be >= 1")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        identities = dataset.identity_list
        if len(identities) < 2:
            raise DatasetError("sampling needs at least 2 identities")
        for ident in identities:
            for modality in ("visible", "infrared"):
                if dataset.indices(ident, modality).size == 0:
                    raise DatasetError(f"identity {ident} has no {modality} sample")
        self.identities = np.array(identities, dtype=np.int64)

    @property
    def steps_per_epoch(self):
        return math.ceil(len(self.dataset) / (6 * self.batch_size))

    def _pick(self, identity, modality, exclude=None):
        pool = self.dataset.indices(identity, modality)
        if exclude is not None and pool.size > 1:
            pool = pool[pool != exclude]
        return int(pool[self.rng.integers(pool.size)])

    def sample(self, n=None):
        n = self.batch_size if n is None else int(n)
        if n < 1:
            raise ParameterError("batch size must be >= 1")
        index = {key: np.empty(n, dtype=np.int64) for key in _SLOTS}
        labels = np.empty(n, dtype=np.int64)
        neg_labels = np.empty(n, dtype=np.int64)
        k = self.identities.size
        for i in range(n):
            anchor_id = int(self.identities[self.rng.integers(k)])
            # uniform over the other identities
            j = int(self.rng.integers(k - 1))
            neg_id = int(self.identities[j if self.identities[j] != anchor_id else k - 1])
            labels[i], neg_labels[i] = anchor_id, neg_id
            for modality in ("visible", "infrared"):
                a = self._pick(anchor_id, modality)
                index[("anchor", modality)][i] = a
                index[("positive", modality)][i] = self._pick(anchor_id, modality, exclude=a)
                index[("negative", modality)][i] = self._pick(neg_id, modality)
        return TupleBatch(index, labels, neg_labels, self.seed)


def sample_batch(dataset: Dataset, n, rng):
    """Draw one batch of ``n`` tuples using ``rng`` (a seed or a numpy Generator)."""
    sampler = TupleSampler(dataset, n, seed=None)
    sampler.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sampler.seed = rng if not isinstance(rng, np.random.Generator) else None
    return sampler.sample(n)
