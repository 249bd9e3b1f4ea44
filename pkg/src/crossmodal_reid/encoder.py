"""Two-stream encoder: private stages per modality, shared stages, non-local
attention, GeM pooling and a linear embedding head.

Feature maps travel as token arrays of shape ``(batch, positions, channels)``
where ``positions = H * W``; every stage is a per-position affine map
followed by ``tanh`` (a 1x1 convolution without spatial support).

Checkpoint layout (``save_checkpoint``)
---------------------------------------
A zip archive with fixed timestamps containing:

``FORMAT``          ASCII ``crossmodal-reid-checkpoint`` and a version line
``config.json``     the ``EncoderConfig`` fields
``meta.json``       free-form metadata (training config, class labels, seed)
``params/<name>.npy``  one float64 ``.npy`` array per parameter

Parameter names are listed by ``TwoStreamEncoder.parameter_names``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import DimensionError, ParameterError, ParseError
from .numerics import Tensor

MODALITIES = ("visible", "infrared")
CHECKPOINT_FORMAT = "crossmodal-reid-checkpoint"
CHECKPOINT_VERSION = 1


def check_modality(modality):
    aliases = {"rgb": "visible", "ir": "infrared", "thermal": "infrared"}
    modality = aliases.get(modality, modality)
    if modality not in MODALITIES:
        raise ParameterError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    return modality


@dataclass
class EncoderConfig:
    input_shape: tuple = (8, 3, 3)
    private_widths: tuple = (16, 16)
    shared_widths: tuple = (32, 32)
    embedding_dim: int = 32
    gem_p: float = 3.0
    non_local: bool = True
    num_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.private_widths = tuple(int(v) for v in self.private_widths)
        self.shared_widths = tuple(int(v) for v in self.shared_widths)
        if len(self.input_shape) != 3:
            raise ParameterError("input_shape must be (channels, height, width)")
        dims = self.input_shape + self.private_widths + self.shared_widths + (self.embedding_dim,)
        if any(d <= 0 for d in dims):
            raise ParameterError("all encoder dimensions must be positive")
        if not self.private_widths or not self.shared_widths:
            raise ParameterError("encoder needs at least one private and one shared stage")
        if self.gem_p < 1:
            raise ParameterError(f"GeM exponent must be >= 1, got {self.gem_p}")
        if self.num_classes < 0:
            raise ParameterError("num_classes must be >= 0")

    @property
    def nl_width(self):
        return max(self.shared_widths[-1] // 2, 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(cfg: EncoderConfig):
    """Seeded uniform(+-1/sqrt(fan_in)) initialisation; both streams draw independently."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for modality in MODALITIES:
        width = cfg.input_shape[0]
        for i, out in enumerate(cfg.private_widths):
            params[f"{modality}.stage{i}.weight"] = _uniform(rng, width, (width, out))
            params[f"{modality}.stage{i}.bias"] = _uniform(rng, width, (out,))
            width = out
    width = cfg.private_widths[-1]
    for i, out in enumerate(cfg.shared_widths):
        params[f"shared.stage{i}.weight"] = _uniform(rng, width, (width, out))
        params[f"shared.stage{i}.bias"] = _uniform(rng, width, (out,))
        width = out
    k = cfg.nl_width
    params["nonlocal.theta"] = _uniform(rng, width, (width, k))
    params["nonlocal.phi"] = _uniform(rng, width, (width, k))
    params["nonlocal.g"] = _uniform(rng, width, (width, k))
    params["nonlocal.wz"] = _uniform(rng, k, (k, width))
    params["gem.p"] = np.array(float(cfg.gem_p))
    params["head.weight"] = _uniform(rng, width, (width, cfg.embedding_dim))
    params["head.bias"] = _uniform(rng, width, (cfg.embedding_dim,))
    if cfg.num_classes:
        params["classifier.weight"] = _uniform(rng, cfg.embedding_dim, (cfg.embedding_dim, cfg.num_classes))
        params["classifier.bias"] = np.zeros(cfg.num_classes)
    return params


# -- building blocks ---------------------------------------------------------


def gem_pool(X, p):
    """GeM-pool a ``(C, H, W)`` feature map to a length-C vector.

    ``p`` may be a float or a scalar Tensor (learnable).
    """
    X = nx.as_tensor(X)
    if X.ndim != 3:
        raise DimensionError(f"gem_pool expects a (C, H, W) feature map, got shape {X.shape}")
    C = X.shape[0]
    return nx.gem(X.reshape(C, -1), p)


def _gem_tokens(tokens, p):
    # (B, S, C) -> (B, C)
    return nx.gem(nx.swap_last(tokens), p)


def _non_local_tokens(tokens, theta, phi, g, wz):
    q = tokens @ theta
    k = tokens @ phi
    v = tokens @ g
    attn = nx.softmax(q @ nx.swap_last(k), axis=-1)
    return (attn @ v) @ wz + tokens


def non_local(X, params):
    """Embedded-Gaussian non-local block with residual on a ``(C, H, W)`` map.

    ``params`` maps ``theta``, ``phi``, ``g`` (each C x k) and ``wz`` (k x C).
    """
    X = nx.as_tensor(X)
    if X.ndim != 3:
        raise DimensionError(f"non_local expects a (C, H, W) feature map, got shape {X.shape}")
    C, H, W = X.shape
    theta, phi, g, wz = (nx.as_tensor(params[k]) for k in ("theta", "phi", "g", "wz"))
    k = theta.shape[1]
    if theta.shape[0] != C or phi.shape != (C, k) or g.shape != (C, k) or wz.shape != (k, C):
        raise DimensionError(f"non-local parameters do not match {C} channels")
    tokens = X.reshape(C, H * W).T
    out = _non_local_tokens(tokens[None], theta, phi, g, wz)
    return out[0].T.reshape(C, H, W)


class TwoStreamEncoder:
    """Visible and infrared private streams feeding one shared stream.

    ``params`` maps parameter names to Tensors; the private streams have the
    same architecture but separate entries, the shared stream is used by
    both modalities.
    """

    def __init__(self, config: EncoderConfig | None = None, params=None):
        self.config = config or EncoderConfig()
        arrays = params if params is not None else init_parameters(self.config)
        if params is not None:
            reference = init_parameters(self.config)
            if set(reference) != set(arrays):
                raise ParameterError("parameter names do not match the encoder config")
            for k, v in arrays.items():
                if np.shape(v) != reference[k].shape:
                    raise DimensionError(f"parameter {k} has shape {np.shape(v)}, expected {reference[k].shape}")
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}

    @property
    def parameter_names(self):
        return list(self.params)

    @property
    def p(self):
        return float(self.params["gem.p"].data)

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def copy(self):
        return TwoStreamEncoder(self.config, self.state_dict())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def _check_input(self, X):
        X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != self.config.input_shape:
            raise DimensionError(
                f"expected feature maps of shape (n, {', '.join(map(str, self.config.input_shape))}), got {X.shape}"
            )
        return X

    def _tokens(self, X):
        B, C, H, W = X.shape
        return np.ascontiguousarray(X.reshape(B, C, H * W).transpose(0, 2, 1))

    def forward(self, X, modality, params=None):
        """Run a batch ``(B, C, H, W)`` through one modality's path.

        Returns ``(embedding, private_pooled)``: the ``(B, D)`` embedding and
        the GeM-pooled ``(B, C_private)`` output of the private stage, which
        is what the distillation loss compares.
        """
        P = self.params if params is None else params
        h, private = self._private(X, modality, P)
        return self._shared(h, P), private

    def forward_pair(self, X_visible, X_infrared, params=None):
        """Both modalities at once; the shared stream runs on the joint batch.

        Returns ``(emb_visible, emb_infrared, private_visible, private_infrared)``.
        """
        P = self.params if params is None else params
        hv, pv = self._private(X_visible, "visible", P)
        hi, pi = self._private(X_infrared, "infrared", P)
        emb = self._shared(nx.concat([hv, hi], axis=0), P)
        n = hv.shape[0]
        return emb[:n], emb[n:], pv, pi

    def _private(self, X, modality, P):
        modality = check_modality(modality)
        h = Tensor(self._tokens(self._check_input(X)))
        for i in range(len(self.config.private_widths)):
            h = nx.affine(h, P[f"{modality}.stage{i}.weight"], P[f"{modality}.stage{i}.bias"], "tanh")
        return h, _gem_tokens(nx.relu(h), P["gem.p"])

    def _shared(self, h, P):
        for i in range(len(self.config.shared_widths)):
            h = nx.affine(h, P[f"shared.stage{i}.weight"], P[f"shared.stage{i}.bias"], "tanh")
        if self.config.non_local:
            h = _non_local_tokens(h, P["nonlocal.theta"], P["nonlocal.phi"], P["nonlocal.g"], P["nonlocal.wz"])
        pooled = _gem_tokens(nx.relu(h), P["gem.p"])
        return nx.affine(pooled, P["head.weight"], P["head.bias"])

    def logits(self, embeddings, params=None):
        P = self.params if params is None else params
        if "classifier.weight" not in P:
            raise ParameterError("encoder was built without a classifier (num_classes=0)")
        return nx.affine(embeddings, P["classifier.weight"], P["classifier.bias"])

    def frozen(self):
        """Parameters as constant Tensors, for inference without a tape."""
        return {k: Tensor(t.data) for k, t in self.params.items()}

    def embed(self, X, modality):
        """Embeddings ``(n, D)`` as a numpy array, without building a tape."""
        emb, _ = self.forward(X, modality, params=self.frozen())
        return emb.data.copy()

    def save(self, path, meta=None):
        save_checkpoint(path, self, meta)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)[0]


def encode(sample, modality, enc: TwoStreamEncoder):
    """Embed one ``(C, H, W)`` feature map; returns a length-D numpy vector."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != enc.config.input_shape:
        raise DimensionError(f"sample shape {sample.shape} does not match {enc.config.input_shape}")
    return enc.embed(sample[None], modality)[0]


# -- checkpoint I/O ----------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(path, enc: TwoStreamEncoder, meta=None):
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "FORMAT", f"{CHECKPOINT_FORMAT}\n{CHECKPOINT_VERSION}\n")
        _write_entry(zf, "config.json", json.dumps(enc.config.to_dict(), sort_keys=True, indent=1))
        _write_entry(zf, "meta.json", json.dumps(meta or {}, sort_keys=True, indent=1, default=str))
        for name in sorted(enc.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.array(enc.params[name].data, order="C"), allow_pickle=False)
            _write_entry(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path):
    """Return ``(encoder, meta)`` from a checkpoint written by ``save_checkpoint``."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise ParseError(f"not a checkpoint archive: {exc}", path=path) from exc
    with zf:
        names = set(zf.namelist())
        if "FORMAT" not in names:
            raise ParseError("missing FORMAT entry", path=path)
        tag, version = zf.read("FORMAT").decode().split()[:2]
        if tag != CHECKPOINT_FORMAT or int(version) > CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint format {tag} v{version}", path=path)
        cfg = EncoderConfig.from_dict(json.loads(zf.read("config.json")))
        meta = json.loads(zf.read("meta.json")) if "meta.json" in names else {}
        params = {}
        for name in names:
            if name.startswith("params/") and name.endswith(".npy"):
                with zf.open(name) as fh:
                    params[name[len("params/") : -len(".npy")]] = np.lib.format.read_array(io.BytesIO(fh.read()))
    expected = set(init_parameters(cfg))
    if set(params) != expected:
        missing = sorted(expected - set(params))
        extra = sorted(set(params) - expected)
        raise ParseError(f"parameter mismatch (missing={missing}, unexpected={extra})", path=path)
    return TwoStreamEncoder(cfg, params), meta
