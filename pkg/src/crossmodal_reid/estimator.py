"""scikit-learn style wrapper around the encoder and trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, SampleRecord
from .encoder import MODALITIES, EncoderConfig, check_modality, load_checkpoint
from .evaluation import evaluate_protocol
from .exceptions import DatasetError, DimensionError, ParameterError
from .trainer import TrainConfig, train


def check_feature_maps(X, shape=None):
    """Return ``X`` as a float64 ``(n, C, H, W)`` array.

    A single ``(C, H, W)`` map is promoted to a batch of one.  With ``shape``
    the trailing dimensions must match it.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"expected feature maps of shape (n, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise DimensionError("no feature maps given")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise DimensionError(f"feature maps of shape {X.shape[1:]} do not match the fitted {tuple(shape)}")
    if not np.all(np.isfinite(X)):
        raise ParameterError("feature maps contain non-finite values")
    return X


def check_modalities(modality, n):
    """Broadcast ``modality`` (one tag or one per sample) to ``n`` canonical tags."""
    if isinstance(modality, str):
        return np.array([check_modality(modality)] * n)
    tags = np.array([check_modality(m) for m in modality])
    if tags.shape != (n,):
        raise DimensionError(f"{tags.size} modality tags for {n} samples")
    return tags


def check_identities(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"{y.size} identity labels for {n} samples")
    if not np.all(y == np.round(y.astype(np.float64))):
        raise ParameterError("identity labels must be integers")
    return y.astype(np.int64)


class CrossModalityEmbedder(TransformerMixin, BaseEstimator):
    """Learns a common visible/infrared embedding from labelled feature maps.

    ``fit(X, y, modality)`` trains the two-stream encoder on ``(n, C, H, W)``
    maps with identity labels ``y`` and per-sample modality tags;
    ``transform(X, modality)`` returns ``(n, embedding_dim)`` embeddings.
    The defaults are a toy-scale schedule.
    """

    def __init__(self, embedding_dim=32, private_widths=(16, 16), shared_widths=(32, 32), non_local=True,
                 gem_p=3.0, batch_size=8, steps=2000, lr=1e-2, warmup_steps=100, decay_steps=(1000, 1600),
                 label_smoothing=0.1, erase_probability=0.5, compactness=True, compactness_sign=1.0,
                 loss_weights=None, grad_clip=5.0, random_state=0):
        self.embedding_dim = embedding_dim
        self.private_widths = private_widths
        self.shared_widths = shared_widths
        self.non_local = non_local
        self.gem_p = gem_p
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.label_smoothing = label_smoothing
        self.erase_probability = erase_probability
        self.compactness = compactness
        self.compactness_sign = compactness_sign
        self.loss_weights = loss_weights
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _seed(self):
        if self.random_state is None:
            return int(np.random.default_rng().integers(2**31))
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        raise ParameterError("random_state must be an int or None")

    def _configs(self, shape, num_classes, seed):
        enc = EncoderConfig(
            input_shape=tuple(shape),
            private_widths=tuple(self.private_widths),
            shared_widths=tuple(self.shared_widths),
            embedding_dim=self.embedding_dim,
            gem_p=self.gem_p,
            non_local=self.non_local,
            num_classes=num_classes,
            seed=seed,
        )
        tc = TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            decay_steps=tuple(self.decay_steps),
            label_smoothing=self.label_smoothing,
            erase_probability=self.erase_probability,
            compactness=self.compactness,
            compactness_sign=self.compactness_sign,
            weights=dict(self.loss_weights or {}),
            grad_clip=self.grad_clip,
            seed=seed,
        )
        return enc, tc

    def fit(self, X, y, modality):
        X = check_feature_maps(X)
        n = X.shape[0]
        y = check_identities(y, n)
        tags = check_modalities(modality, n)
        records = [SampleRecord(f"s{i:06d}", int(k), m) for i, (k, m) in enumerate(zip(y, tags))]
        dataset = Dataset(records, X, name="fit")
        classes = dataset.identity_list
        if len(classes) < 2:
            raise DatasetError("fit needs at least 2 identities")
        seed = self._seed()
        enc_cfg, train_cfg = self._configs(X.shape[1:], len(classes), seed)
        self.encoder_, self.history_ = train(dataset, enc_cfg, train_cfg)
        self.classes_ = np.array(classes)
        self.feature_shape_ = tuple(X.shape[1:])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X, modality):
        check_is_fitted(self, "encoder_")
        X = check_feature_maps(X, self.feature_shape_)
        tags = check_modalities(modality, X.shape[0])
        out = np.empty((X.shape[0], self.encoder_.config.embedding_dim))
        for m in MODALITIES:
            mask = tags == m
            if mask.any():
                out[mask] = self.encoder_.embed(X[mask], m)
        return out

    def fit_transform(self, X, y, modality):
        return self.fit(X, y, modality).transform(X, modality)

    def score(self, X, y, modality, trials=10, shots=1, query="infrared"):
        """Mean average precision of ``query``-modality samples retrieved from
        the other modality, over ``trials`` random gallery draws."""
        X = check_feature_maps(X)
        y = check_identities(y, X.shape[0])
        tags = check_modalities(modality, X.shape[0])
        query = check_modality(query)
        emb = self.transform(X, tags)
        q, g = tags == query, tags != query
        report = evaluate_protocol(emb[q], y[q], emb[g], y[g], trials=trials, shots=shots, rng=self._seed())
        return report.mAP

    def save(self, path):
        check_is_fitted(self, "encoder_")
        self.encoder_.save(path, meta={"classes": [int(c) for c in self.classes_], "estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        encoder, meta = load_checkpoint(path)
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in (meta.get("estimator") or {}).items()}
        est = cls(**params)
        est.encoder_ = encoder
        est.history_ = None
        est.classes_ = np.array(meta.get("classes", []))
        est.feature_shape_ = tuple(encoder.config.input_shape)
        est.n_features_in_ = int(np.prod(est.feature_shape_))
        return est
