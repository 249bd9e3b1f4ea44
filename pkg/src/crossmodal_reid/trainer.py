"""Adam with linear warm-up and step decay, and the training loop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset, random_erase
from .encoder import EncoderConfig, TwoStreamEncoder
from .exceptions import NumericError, ParameterError, TrainingError
from .losses import LossBreakdown, LossConfig, TupleEmbeddings, total_loss
from .sampler import TupleSampler


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 30_000
    lr: float = 3e-4
    decay_factor: float = 0.1
    decay_steps: tuple = (10_000, 20_000)
    warmup_steps: int = 1_000
    warmup_start: float = 0.1
    label_smoothing: float = 0.1
    erase_probability: float = 0.5
    margin: float = 0.3
    compactness: bool = True
    compactness_sign: float = 1.0
    weights: dict = field(default_factory=lambda: {"eat": 1.0, "cmkd": 1.0, "id": 1.0, "triplet": 0.0})
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        if self.steps <= 0:
            raise ParameterError("steps must be > 0")
        if self.lr <= 0:
            raise ParameterError("lr (learning rate) must be > 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if list(self.decay_steps) != sorted(self.decay_steps):
            raise ParameterError("decay_steps must be sorted ascending")
        if self.warmup_steps < 0:
            raise ParameterError("warmup_steps must be >= 0")
        if not 0 <= self.erase_probability <= 1:
            raise ParameterError("erase_probability must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ParameterError("grad_clip must be positive when set")
        self.loss_config()  # validates weights, margin and smoothing

    @classmethod
    def toy(cls, **overrides):
        """2,000-step desk-scale schedule: short warm-up, two x0.1 decays, a
        higher base rate and global-norm clipping at 5."""
        base = dict(steps=2_000, lr=1e-2, warmup_steps=100, decay_steps=(1_000, 1_600), grad_clip=5.0)
        base.update(overrides)
        return cls(**base)

    def loss_config(self):
        return LossConfig(
            margin=self.margin,
            compactness=self.compactness,
            compactness_sign=self.compactness_sign,
            label_smoothing=self.label_smoothing,
            weights=dict(self.weights),
        )

    def to_dict(self):
        d = asdict(self)
        d["decay_steps"] = list(self.decay_steps)
        return d


def lr_schedule(step, cfg: TrainConfig):
    """Linear warm-up from ``warmup_start * lr`` to ``lr``, then ``decay_factor``
    per passed decay step (applied by repeated multiplication, so each boundary
    is an exact x``decay_factor`` drop)."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        rate = cfg.lr * (cfg.warmup_start + (1.0 - cfg.warmup_start) * frac)
    else:
        rate = cfg.lr
    for boundary in cfg.decay_steps:
        if step >= boundary:
            rate *= cfg.decay_factor
    return rate


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: OptimizerState, lr):
    """Bias-corrected Adam.  ``params``/``grads`` map names to arrays.

    Returns the updated parameter dict (new arrays) and ``state``, which is
    advanced in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = value
            continue
        if np.shape(g) != np.shape(value):
            raise ParameterError(f"gradient shape {np.shape(g)} does not match parameter {name!r} {np.shape(value)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = np.asarray(value - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out, state


HISTORY_COLUMNS = ("step", "lr") + LossBreakdown.names()


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def append(self, step, lr, breakdown: LossBreakdown, wall):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ParameterError("history steps must increase")
        row = {"step": step, "lr": lr}
        row.update(breakdown.as_dict())
        self.rows.append(row)
        self.wall.append(wall)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_text(self):
        lines = ["\t".join(HISTORY_COLUMNS)]
        for row in self.rows:
            lines.append("\t".join(str(row["step"]) if c == "step" else repr(float(row[c])) for c in HISTORY_COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, path, header=None):
        with open(path, "w", encoding="utf-8") as fh:
            for line in header or ():
                fh.write(f"# {line}\n")
            fh.write(self.to_text())


def _erase_batch(maps, probability, rng, fill):
    if probability <= 0:
        return maps
    out = maps.copy()
    for i in np.flatnonzero(rng.random(out.shape[0]) < probability):
        out[i], _ = random_erase(out[i], 1.0, rng=rng, fill=fill)
    return out


def class_index(dataset: Dataset):
    """Map identity labels to contiguous class indices (sorted order)."""
    return {ident: i for i, ident in enumerate(dataset.identity_list)}


def train(dataset: Dataset, encoder_config: EncoderConfig | None = None, cfg: TrainConfig | None = None,
          encoder: TwoStreamEncoder | None = None, eval_fn=None, eval_every=0, log=None):
    """Optimise a two-stream encoder on tuples sampled from ``dataset``.

    One step: sample a tuple batch, random-erase each map, embed both
    modalities, evaluate the weighted objective, back-propagate and apply
    Adam.  ``eval_fn(encoder, step)`` (if given) runs every ``eval_every``
    steps and after the last step; its results go to ``history.evals``.
    Returns ``(encoder, history)``.
    """
    cfg = cfg or TrainConfig()
    classes = class_index(dataset)
    if encoder is None:
        encoder_config = encoder_config or EncoderConfig(input_shape=dataset.feature_shape)
        if encoder_config.num_classes != len(classes):
            encoder_config = EncoderConfig(**{**encoder_config.to_dict(), "num_classes": len(classes)})
        encoder = TwoStreamEncoder(encoder_config)
    loss_cfg = cfg.loss_config()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    sampler = TupleSampler(dataset, cfg.batch_size, seed=seeds[0])
    aug_rng = np.random.default_rng(seeds[1])
    state = OptimizerState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    history = TrainHistory()
    fill = dataset.channel_mean
    n = cfg.batch_size
    use_logits = loss_cfg.weights["id"] != 0 or "classifier.weight" in encoder.params
    start = time.perf_counter()

    for step in range(cfg.steps):
        batch = sampler.sample()
        lr = lr_schedule(step, cfg)
        maps = {}
        for modality in ("visible", "infrared"):
            rows = np.concatenate([batch.index[(role, modality)] for role in ("anchor", "positive", "negative")])
            maps[modality] = _erase_batch(dataset.features[rows], cfg.erase_probability, aug_rng, fill)
        encoder.zero_grad()
        try:
            ev, ei, pv, pi = encoder.forward_pair(maps["visible"], maps["infrared"])
            emb = TupleEmbeddings(ev[:n], ev[n : 2 * n], ev[2 * n :], ei[:n], ei[n : 2 * n], ei[2 * n :])
            private = TupleEmbeddings(rgb_a=pv[:n], rgb_p=pv[n : 2 * n], ir_a=pi[:n], ir_p=pi[n : 2 * n])
            logits = labels = None
            if use_logits:
                logits = encoder.logits(nx.concat([emb.rgb_a, emb.ir_a], axis=0))
                cls = np.array([classes[int(i)] for i in batch.labels])
                labels = np.concatenate([cls, cls])
            breakdown = total_loss(emb, logits, labels, loss_cfg, private=private)
            if not np.isfinite(breakdown.L_ALL):
                raise TrainingError(f"non-finite loss at step {step}")
            breakdown.backward()
        except NumericError as exc:
            raise TrainingError(f"numeric failure at step {step}: {exc}") from exc

        grads = {k: t.grad for k, t in encoder.params.items() if t.grad is not None}
        if cfg.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        values = {k: t.data for k, t in encoder.params.items()}
        try:
            updated, state = adam_step(values, grads, state, lr)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        for k, arr in updated.items():
            encoder.params[k].data = arr
        p = encoder.params["gem.p"]
        if p.data < 1.0:
            p.data = np.array(1.0)
        history.append(step, lr, breakdown, time.perf_counter() - start)
        if log is not None:
            log(step, breakdown)
        if eval_fn is not None and ((eval_every and (step + 1) % eval_every == 0) or step == cfg.steps - 1):
            history.evals.append({"step": step, **eval_fn(encoder, step)})
    return encoder, history
