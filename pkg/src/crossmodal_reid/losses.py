"""Angular triplet, enumerate-angular, distillation and identity losses.

All losses take batched embeddings: Tensors of shape ``(N, D)`` whose rows
are aligned tuples (row ``i`` of every role belongs to tuple ``i``).  Rank-1
inputs are treated as a batch of one.  Batch averages divide by the number
of tuples ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .exceptions import BatchStructureError, DimensionError, ParameterError
from .numerics import Tensor

ROLES = ("rgb_a", "rgb_p", "rgb_n", "ir_a", "ir_p", "ir_n")


def _rows(x):
    x = nx.as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2:
        raise DimensionError(f"expected embeddings of shape (N, D), got {x.shape}")
    return x


def _same_dims(*xs):
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"embedding shapes differ: {sorted(shapes)}")


@dataclass
class TupleEmbeddings:
    """Embeddings of a tuple batch, one ``(N, D)`` Tensor per role and modality."""

    rgb_a: Tensor = None
    rgb_p: Tensor = None
    rgb_n: Tensor = None
    ir_a: Tensor = None
    ir_p: Tensor = None
    ir_n: Tensor = None

    def __post_init__(self):
        for name in ROLES:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, _rows(value))

    @classmethod
    def from_mapping(cls, mapping):
        return cls(**{k: mapping.get(k) for k in ROLES})

    def require(self, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise BatchStructureError(f"tuple batch is missing {', '.join(missing)}")
        _same_dims(*(getattr(self, n) for n in names))
        return [getattr(self, n) for n in names]

    def detached(self):
        return TupleEmbeddings(*(None if getattr(self, n) is None else getattr(self, n).detach() for n in ROLES))

    def swapped(self):
        """The same batch with visible and infrared tags exchanged."""
        return TupleEmbeddings(self.ir_a, self.ir_p, self.ir_n, self.rgb_a, self.rgb_p, self.rgb_n)


@dataclass
class LossConfig:
    margin: float = 0.3
    compactness: bool = True
    compactness_sign: float = 1.0
    label_smoothing: float = 0.1
    euclidean_margin: float = 0.3
    weights: dict = field(default_factory=lambda: {"eat": 1.0, "cmkd": 1.0, "id": 1.0, "triplet": 0.0})

    def __post_init__(self):
        if self.margin < 0 or self.euclidean_margin < 0:
            raise ParameterError("margins must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ParameterError("label smoothing must lie in [0, 1)")
        if self.compactness_sign not in (1.0, -1.0, 1, -1):
            raise ParameterError("compactness_sign must be +1 or -1")
        merged = {"eat": 1.0, "cmkd": 1.0, "id": 1.0, "triplet": 0.0}
        unknown = set(self.weights) - set(merged)
        if unknown:
            raise ParameterError(f"unknown loss weight(s) {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.weights.items()})
        if any(v < 0 for v in merged.values()):
            raise ParameterError("loss weights must be >= 0")
        self.weights = merged


# -- individual terms --------------------------------------------------------


def cmkd_loss(rgb_a, ir_p, ir_a, rgb_p):
    """Mean over tuples of ``|rgb_a - ir_p|^2 + |ir_a - rgb_p|^2``."""
    rgb_a, ir_p, ir_a, rgb_p = (_rows(x) for x in (rgb_a, ir_p, ir_a, rgb_p))
    _same_dims(rgb_a, ir_p, ir_a, rgb_p)
    n = rgb_a.shape[0]
    if n == 0:
        raise ParameterError("cmkd_loss needs at least one tuple")
    d1 = rgb_a - ir_p
    d2 = ir_a - rgb_p
    return ((d1 * d1).sum() + (d2 * d2).sum()) * (1.0 / n)


def cos_margin_triplet(v_a, v_p, v_n, margin=0.3):
    """``mean [cos(a, n) - cos(a, p) + margin]_+``."""
    v_a, v_p, v_n = (_rows(x) for x in (v_a, v_p, v_n))
    _same_dims(v_a, v_p, v_n)
    return nx.relu(nx.cosine(v_a, v_n) - nx.cosine(v_a, v_p) + margin).mean()


def _at_terms(v_a, v_p, v_n):
    return nx.relu(nx.cosine(v_a, v_n)) - nx.relu(nx.cosine(v_a, v_p)) + 1.0


def at_triplet(v_a, v_p, v_n):
    """``mean([cos(a, n)]_+ - [cos(a, p)]_+ + 1)``; each summand lies in [0, 2]."""
    v_a, v_p, v_n = (_rows(x) for x in (v_a, v_p, v_n))
    _same_dims(v_a, v_p, v_n)
    return _at_terms(v_a, v_p, v_n).mean()


def _direction(batch: TupleEmbeddings, direction):
    if direction in ("rgb", "visible"):
        return batch.require("rgb_a", "ir_p", "ir_n", "rgb_n")
    if direction in ("ir", "infrared"):
        return batch.require("ir_a", "rgb_p", "rgb_n", "ir_n")
    raise ParameterError(f"direction must be 'rgb' or 'ir', got {direction!r}")


def enumerate_terms(batch: TupleEmbeddings, direction):
    """Per-tuple exponents of the cross- and same-modality angular constraints.

    For direction ``rgb``: the anchor is ``rgb_a``, the positive is always the
    cross-modal ``ir_p``; the negatives are ``ir_n`` (cross) and ``rgb_n``
    (same modality).  ``ir`` mirrors it.  Returns ``(cross, same)`` Tensors
    of shape ``(N,)`` with values in [0, 2].
    """
    anchor, positive, neg_cross, neg_same = _direction(batch, direction)
    pos = nx.relu(nx.cosine(anchor, positive))
    cross = nx.relu(nx.cosine(anchor, neg_cross)) - pos + 1.0
    same = nx.relu(nx.cosine(anchor, neg_same)) - pos + 1.0
    return cross, same


def eat_directional(batch: TupleEmbeddings, direction):
    """One direction of the exponential enumerate angular triplet loss."""
    cross, same = enumerate_terms(batch, direction)
    return nx.exp(cross).mean() + nx.exp(same).mean()


def compactness(rgb_a, ir_a, sign=1.0):
    """Sum over anchors and elements of ``exp(sign * scos(f_r, mean(f)))``.

    ``scos`` is the scalar cosine ``ab / (|a||b| + eps)``.  ``sign=-1``
    flips the exponent (the alternative convention kept for ablations).
    """
    total = None
    for emb in (_rows(rgb_a), _rows(ir_a)):
        centre = emb.mean(axis=1, keepdims=True)
        s = nx.scalar_cosine(emb, centre)
        term = nx.exp(s * float(sign) if sign != 1 else s).sum()
        total = term if total is None else total + term
    return total


def eat_loss(batch: TupleEmbeddings, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    value = eat_directional(batch, "rgb") + eat_directional(batch, "ir")
    if cfg.compactness:
        rgb_a, ir_a = batch.require("rgb_a", "ir_a")
        value = value + compactness(rgb_a, ir_a, cfg.compactness_sign)
    return value


def euclidean_triplet(v_a, v_p, v_n, margin=0.3):
    """``mean [|a - p| - |a - n| + margin]_+`` with plain Euclidean distances."""
    v_a, v_p, v_n = (_rows(x) for x in (v_a, v_p, v_n))
    _same_dims(v_a, v_p, v_n)
    dp = v_a - v_p
    dn = v_a - v_n
    # small offset keeps sqrt differentiable when two embeddings coincide
    d_pos = nx.sqrt((dp * dp).sum(axis=1) + 1e-12)
    d_neg = nx.sqrt((dn * dn).sum(axis=1) + 1e-12)
    return nx.relu(d_pos - d_neg + margin).mean()


def bidirectional_euclidean_triplet(batch: TupleEmbeddings, margin=0.3):
    """Euclidean triplet with the same cross-modal tuples the angular loss sees."""
    rgb_a, ir_p, ir_n, ir_a, rgb_p, rgb_n = batch.require("rgb_a", "ir_p", "ir_n", "ir_a", "rgb_p", "rgb_n")
    return euclidean_triplet(rgb_a, ir_p, ir_n, margin) + euclidean_triplet(ir_a, rgb_p, rgb_n, margin)


def smoothed_targets(labels, num_classes, eps):
    labels = np.asarray(labels, dtype=np.int64)
    q = np.full((labels.size, num_classes), eps / num_classes)
    q[np.arange(labels.size), labels] += 1.0 - eps
    return q


def id_loss(logits, labels, eps=0.1, num_classes=None):
    """Label-smoothed cross-entropy averaged over samples."""
    logits = _rows(logits)
    K = logits.shape[1] if num_classes is None else int(num_classes)
    if K < 2:
        raise ParameterError("identity loss needs at least 2 classes")
    if logits.shape[1] != K:
        raise DimensionError(f"logits have {logits.shape[1]} classes, expected {K}")
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError("one label per logit row is required")
    if np.any(labels < 0) or np.any(labels >= K) or not np.all(labels == np.round(labels)):
        raise ParameterError(f"labels must be integers in [0, {K})")
    if not 0.0 <= eps < 1.0:
        raise ParameterError("label smoothing must lie in [0, 1)")
    q = smoothed_targets(labels, K, eps)
    return -(nx.log_softmax(logits) * q).sum() * (1.0 / logits.shape[0])


# -- aggregate ---------------------------------------------------------------

_SCALARS = (
    "L_CMKD", "L_cos", "L_AT", "L_crgb", "L_cir", "L_srgb", "L_sir",
    "L_EATrgb", "L_EATir", "C", "L_EAT", "L_ID", "L_triplet", "L_ALL",
)


@dataclass
class LossBreakdown:
    """Every term of the objective as floats, plus the differentiable total."""

    L_CMKD: float = 0.0
    L_cos: float = 0.0
    L_AT: float = 0.0
    L_crgb: float = 0.0
    L_cir: float = 0.0
    L_srgb: float = 0.0
    L_sir: float = 0.0
    L_EATrgb: float = 0.0
    L_EATir: float = 0.0
    C: float = 0.0
    L_EAT: float = 0.0
    L_ID: float = 0.0
    L_triplet: float = 0.0
    L_ALL: float = 0.0
    total: Tensor = field(default=None, repr=False)

    def backward(self):
        self.total.backward()

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "total"}

    @staticmethod
    def names():
        return _SCALARS


def total_loss(batch: TupleEmbeddings, logits=None, labels=None, cfg: LossConfig | None = None, private=None):
    """Weighted sum of enumerate-angular, distillation, identity and (optional)
    Euclidean triplet terms.

    ``private`` holds the pooled private-stage features as a TupleEmbeddings
    (only ``rgb_a``, ``rgb_p``, ``ir_a``, ``ir_p`` are read); when omitted the
    distillation term is computed on ``batch`` itself.  ``logits``/``labels``
    may be omitted when the identity weight is zero.
    """
    cfg = cfg or LossConfig()
    w = cfg.weights
    out = LossBreakdown()
    frozen = batch.detached()
    live = lambda name: batch if w[name] != 0 else frozen  # noqa: E731

    src = live("eat")
    c_rgb, s_rgb = enumerate_terms(src, "rgb")
    c_ir, s_ir = enumerate_terms(src, "ir")
    eat_rgb = nx.exp(c_rgb).mean() + nx.exp(s_rgb).mean()
    eat_ir = nx.exp(c_ir).mean() + nx.exp(s_ir).mean()
    eat = eat_rgb + eat_ir
    if cfg.compactness:
        rgb_a, ir_a = src.require("rgb_a", "ir_a")
        c = compactness(rgb_a, ir_a, cfg.compactness_sign)
        eat = eat + c
        out.C = c.item()
    out.L_EATrgb, out.L_EATir, out.L_EAT = eat_rgb.item(), eat_ir.item(), eat.item()

    src = private if private is not None else batch
    if w["cmkd"] == 0:
        src = src.detached()
    cmkd = cmkd_loss(*src.require("rgb_a", "ir_p", "ir_a", "rgb_p"))
    out.L_CMKD = cmkd.item()

    terms = [(w["eat"], eat), (w["cmkd"], cmkd)]
    if logits is not None:
        logits = logits if w["id"] != 0 else nx.as_tensor(logits).detach()
        ident = id_loss(logits, labels, cfg.label_smoothing)
        out.L_ID = ident.item()
        terms.append((w["id"], ident))
    elif w["id"] != 0:
        raise ParameterError("identity loss weight is nonzero but no logits were given")

    trip = bidirectional_euclidean_triplet(live("triplet"), cfg.euclidean_margin)
    out.L_triplet = trip.item()
    terms.append((w["triplet"], trip))

    # diagnostics; not part of the objective
    out.L_cos = cos_margin_triplet(*frozen.require("rgb_a", "ir_p", "ir_n"), margin=cfg.margin).item()
    # the visible-direction cross terms are the AT summands of (rgb_a, ir_p, ir_n)
    out.L_crgb, out.L_srgb = float(c_rgb.data.mean()), float(s_rgb.data.mean())
    out.L_AT = out.L_crgb
    out.L_cir, out.L_sir = float(c_ir.data.mean()), float(s_ir.data.mean())

    total = None
    for weight, term in terms:
        if weight == 0:
            continue
        piece = term if weight == 1 else term * weight
        total = piece if total is None else total + piece
    if total is None:
        total = nx.as_tensor(0.0)
    out.total = total
    out.L_ALL = total.item()
    return out
