"""Finite-difference gradient checks over every loss term and encoder block.

Each check draws a random small problem per configuration, compares the
tape gradient with central differences and keeps the worst relative error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, TwoStreamEncoder, gem_pool, non_local
from .losses import (
    LossConfig, TupleEmbeddings, at_triplet, cmkd_loss, compactness, cos_margin_triplet,
    eat_directional, eat_loss, id_loss, total_loss,
)
from .numerics import Tensor


def _tensor(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _roles(rng):
    n, d = int(rng.integers(1, 5)), int(rng.integers(3, 9))
    return {name: _tensor(rng.normal(size=(n, d))) for name in ("rgb_a", "rgb_p", "rgb_n", "ir_a", "ir_p", "ir_n")}


def _cmkd(rng):
    P = _roles(rng)
    return lambda Q: cmkd_loss(Q["rgb_a"], Q["ir_p"], Q["ir_a"], Q["rgb_p"]), {k: P[k] for k in ("rgb_a", "ir_p", "ir_a", "rgb_p")}


def _triplet_inputs(rng):
    P = _roles(rng)
    return {"a": P["rgb_a"], "p": P["ir_p"], "n": P["ir_n"]}


def _cos_margin(rng):
    margin = float(rng.uniform(0.1, 0.5))
    return lambda Q: cos_margin_triplet(Q["a"], Q["p"], Q["n"], margin), _triplet_inputs(rng)


def _at(rng):
    return lambda Q: at_triplet(Q["a"], Q["p"], Q["n"]), _triplet_inputs(rng)


def _eat_dir(direction):
    def build(rng):
        P = _roles(rng)
        return lambda Q: eat_directional(TupleEmbeddings.from_mapping(Q), direction), P
    return build


def _eat(with_compactness):
    def build(rng):
        cfg = LossConfig(compactness=with_compactness)
        return lambda Q: eat_loss(TupleEmbeddings.from_mapping(Q), cfg), _roles(rng)
    return build


def _compactness(rng):
    P = _roles(rng)
    return lambda Q: compactness(Q["rgb_a"], Q["ir_a"]), {"rgb_a": P["rgb_a"], "ir_a": P["ir_a"]}


def _id(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    labels = rng.integers(k, size=n)
    eps = float(rng.uniform(0.0, 0.3))
    return lambda Q: id_loss(Q["logits"], labels, eps), {"logits": _tensor(3 * rng.normal(size=(n, k)))}


def _total(rng):
    P = _roles(rng)
    n = P["rgb_a"].shape[0]
    k = int(rng.integers(2, 6))
    P["logits"] = _tensor(rng.normal(size=(2 * n, k)))
    labels = rng.integers(k, size=2 * n)
    cfg = LossConfig(weights={"eat": 1.0, "cmkd": 1.0, "id": 1.0, "triplet": float(rng.integers(2))})

    def f(Q):
        batch = TupleEmbeddings.from_mapping(Q)
        return total_loss(batch, Q["logits"], labels, cfg).total

    return f, P


def _gem(rng):
    c, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    x = rng.uniform(0.1, 2.0, size=(c, h, w))
    weights = rng.normal(size=c)
    return lambda Q: (gem_pool(Q["x"], Q["p"]) * weights).sum(), {"x": _tensor(x), "p": _tensor(rng.uniform(1.5, 4.0))}


def _non_local(rng):
    c, h, w = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = max(c // 2, 1)
    P = {
        "x": _tensor(rng.normal(size=(c, h, w))),
        "theta": _tensor(rng.normal(scale=0.7, size=(c, k))),
        "phi": _tensor(rng.normal(scale=0.7, size=(c, k))),
        "g": _tensor(rng.normal(size=(c, k))),
        "wz": _tensor(rng.normal(size=(k, c))),
    }
    weights = rng.normal(size=(c, h, w))
    return lambda Q: (non_local(Q["x"], Q) * weights).sum(), P


def _encoder(rng):
    cfg = EncoderConfig(input_shape=(2, 2, 2), private_widths=(3,), shared_widths=(4,), embedding_dim=3,
                        num_classes=0, seed=int(rng.integers(2**31)))
    enc = TwoStreamEncoder(cfg)
    X = rng.normal(size=(2, 2, 2, 2))
    modality = ("visible", "infrared")[int(rng.integers(2))]
    weights = rng.normal(size=(2, 3))
    for t in enc.params.values():
        t.data = t.data + 0.1 * rng.normal(size=t.shape)  # move p and zero biases off special points

    def f(Q):
        emb, _ = enc.forward(X, modality, params=Q)
        return (emb * weights).sum()

    used = {k: v for k, v in enc.params.items() if not k.startswith("infrared" if modality == "visible" else "visible")}
    return f, used


# (row name, builder); every term of the objective's breakdown has a row
CHECKS = (
    ("L_CMKD", _cmkd),
    ("L_cos", _cos_margin),
    ("L_AT", _at),
    ("L_EATrgb", _eat_dir("rgb")),
    ("L_EATir", _eat_dir("ir")),
    ("L_EAT_exp", _eat(False)),
    ("C", _compactness),
    ("L_EAT", _eat(True)),
    ("L_ID", _id),
    ("L_ALL", _total),
    ("non_local", _non_local),
    ("gem", _gem),
    ("encoder", _encoder),
)


@dataclass
class CheckRow:
    name: str
    configs: int
    max_rel_error: float
    worst_param: str
    worst_config: int
    tol: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def _buggy(f):
    # negative control: a tape gradient that is off by one percent
    def grad_fn(params):
        for t in params.values():
            t.grad = None
        f(params).backward()
        return {k: 1.01 * (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}
    return grad_fn


def run_suite(configs=50, seed=0, h=1e-5, tol=1e-4, names=None, inject_bug=False):
    """Run every check (or those in ``names``) over ``configs`` seeded problems."""
    known = [name for name, _ in CHECKS]
    if names is not None:
        unknown = sorted(set(names) - set(known))
        if unknown:
            raise ValueError(f"unknown gradient check(s) {unknown}; choose from {known}")
    rows = []
    for index, (name, build) in enumerate(CHECKS):
        if names is not None and name not in names:
            continue
        start = time.perf_counter()
        worst, worst_param, worst_cfg = 0.0, "", -1
        for c in range(configs):
            rng = np.random.default_rng([seed, index, c])
            f, params = build(rng)
            report = nx.grad_check(f, params, h=h, tol=tol, grad_fn=_buggy(f) if inject_bug else None)
            if report.max_rel_error > worst or worst_cfg < 0:
                worst, worst_param, worst_cfg = report.max_rel_error, report.worst, c
        rows.append(CheckRow(name, configs, worst, worst_param, worst_cfg, tol, time.perf_counter() - start))
    return rows


def format_rows(rows):
    lines = ["check\tconfigs\tmax_rel_error\tworst_param\tworst_config\tstatus"]
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name}\t{r.configs}\t{r.max_rel_error:.3e}\t{r.worst_param}\t{r.worst_config}\t{status}")
    return "\n".join(lines)
