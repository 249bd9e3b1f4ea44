"""Cross-modality retrieval metrics and the repeated random-gallery protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, ParameterError, ProtocolError

PROTOCOLS = ("all-search", "indoor-search", "thermal-to-rgb", "rgb-to-thermal", "infrared-to-visible", "visible-to-infrared")
REPORT_RANKS = (1, 10, 20)


def rank_gallery(query, gallery):
    """Gallery indices by ascending Euclidean distance; ties keep index order."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ParameterError("gallery must be a non-empty (n, D) array")
    if query.shape != (gallery.shape[1],):
        raise DimensionError(f"query of shape {query.shape} against gallery dimension {gallery.shape[1]}")
    diff = gallery - query
    dist = (diff * diff).sum(axis=1)
    return np.argsort(dist, kind="stable")


def rank_all(query, gallery):
    """Ranking matrix ``(n_query, n_gallery)``; each row as in ``rank_gallery``."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ParameterError("gallery must be a non-empty (n, D) array")
    if query.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise DimensionError(f"query dimension {query.shape} does not match gallery dimension {gallery.shape[1]}")
    # explicit differences, not |q|^2 + |g|^2 - 2qg: the expanded form loses exact ties
    block = max(1, 2_000_000 // max(gallery.size, 1))
    out = np.empty((query.shape[0], gallery.shape[0]), dtype=np.int64)
    for start in range(0, query.shape[0], block):
        q = query[start : start + block]
        dist = ((q[:, None, :] - gallery[None, :, :]) ** 2).sum(-1)
        out[start : start + block] = np.argsort(dist, axis=1, kind="stable")
    return out


def _match_matrix(rankings, query_ids, gallery_ids):
    rankings = np.atleast_2d(np.asarray(rankings))
    query_ids = np.atleast_1d(np.asarray(query_ids))
    gallery_ids = np.asarray(gallery_ids)
    if rankings.shape[0] != query_ids.size:
        raise DimensionError("one ranking row per query is required")
    matches = gallery_ids[rankings] == query_ids[:, None]
    missing = ~matches.any(axis=1)
    if missing.any():
        first = int(np.flatnonzero(missing)[0])
        raise ProtocolError(f"query {first} (identity {query_ids[first]}) has no match in the gallery")
    return matches


def cmc(rankings, query_ids, gallery_ids):
    """CMC curve: entry ``k-1`` is the fraction of queries matched within rank ``k``."""
    matches = _match_matrix(rankings, query_ids, gallery_ids)
    first = matches.argmax(axis=1)
    hits = np.zeros(matches.shape[1])
    np.add.at(hits, first, 1.0)
    return np.cumsum(hits) / matches.shape[0]


def average_precision(matches_row):
    """Mean of precision@rank over the relevant positions of one ranked list."""
    rel = np.flatnonzero(matches_row)
    precision = np.arange(1, rel.size + 1) / (rel + 1.0)
    return float(precision.mean())


def mean_ap(rankings, query_ids, gallery_ids):
    matches = _match_matrix(rankings, query_ids, gallery_ids)
    return float(np.mean([average_precision(row) for row in matches]))


def cmc_at(curve, k):
    """CMC value at 1-based rank ``k``; ranks past the gallery size read 1.0-capped tail."""
    return float(curve[min(k, len(curve)) - 1])


@dataclass
class EvalReport:
    cmc: dict = field(default_factory=dict)
    curve: np.ndarray = None
    mAP: float = 0.0
    trials: int = 0
    per_trial: list = field(default_factory=list)
    std: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def rank1(self):
        return self.cmc[1]

    def to_text(self):
        lines = ["[report]"]
        for key, value in self.meta.items():
            lines.append(f"{key} = {value}")
        lines.append(f"trials = {self.trials}")
        for k in sorted(self.cmc):
            lines.append(f"rank{k} = {self.cmc[k]!r}")
            lines.append(f"rank{k}_std = {self.std.get(f'rank{k}', 0.0)!r}")
        lines.append(f"mAP = {self.mAP!r}")
        lines.append(f"mAP_std = {self.std.get('mAP', 0.0)!r}")
        lines.append("curve = " + " ".join(repr(float(v)) for v in self.curve))
        lines.append("")
        lines.append("[trials]")
        cols = [f"rank{k}" for k in sorted(self.cmc)] + ["mAP"]
        lines.append("\t".join(["trial"] + cols))
        for i, row in enumerate(self.per_trial):
            lines.append("\t".join([str(i)] + [repr(float(row[c])) for c in cols]))
        lines.append("\t".join(["mean"] + [repr(float(self.cmc[k])) for k in sorted(self.cmc)] + [repr(float(self.mAP))]))
        return "\n".join(lines) + "\n"

    def write(self, path, header=None):
        with open(path, "w", encoding="utf-8") as fh:
            for line in header or ():
                fh.write(f"# {line}\n")
            fh.write(self.to_text())


def evaluate_retrieval(query, query_ids, gallery, gallery_ids):
    """Direct CMC and mAP of one query set against one gallery."""
    rankings = rank_all(query, gallery)
    return cmc(rankings, query_ids, gallery_ids), mean_ap(rankings, query_ids, gallery_ids)


def draw_gallery(gallery_ids, shots, rng):
    """Indices of a gallery draw with ``shots`` samples per identity.

    ``shots=None`` keeps the whole pool.
    """
    gallery_ids = np.asarray(gallery_ids)
    if shots is None:
        return np.arange(gallery_ids.size)
    if shots < 1:
        raise ProtocolError("shots per identity must be >= 1")
    picked = []
    for ident in np.unique(gallery_ids):
        pool = np.flatnonzero(gallery_ids == ident)
        if pool.size < shots:
            raise ProtocolError(f"identity {ident} has {pool.size} gallery samples, {shots} requested")
        picked.append(np.sort(rng.choice(pool, size=shots, replace=False)))
    return np.concatenate(picked)


def evaluate_protocol(query, query_ids, gallery, gallery_ids, trials=10, shots=1, rng=None, ranks=REPORT_RANKS, protocol="all-search"):
    """Repeat gallery draws ``trials`` times and aggregate CMC/mAP.

    ``shots`` samples per identity are drawn for each trial (1 = single
    shot; ``None`` = whole pool every trial).  Queries whose identity has no
    gallery sample raise ProtocolError.
    """
    if trials < 1:
        raise ProtocolError("at least one trial is required")
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise DimensionError(f"query {query.shape} and gallery {gallery.shape} dimensions differ")
    if gallery.shape[0] == 0:
        raise ProtocolError("gallery pool is empty")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    per_trial, curves = [], []
    for _ in range(trials):
        idx = draw_gallery(gallery_ids, shots, rng)
        curve, m_ap = evaluate_retrieval(query, query_ids, gallery[idx], gallery_ids[idx])
        curves.append(curve)
        row = {f"rank{k}": cmc_at(curve, k) for k in ranks}
        row["mAP"] = m_ap
        per_trial.append(row)
    lengths = {len(c) for c in curves}
    if len(lengths) == 1:
        mean_curve = np.mean(curves, axis=0)
    else:
        width = max(lengths)
        mean_curve = np.mean([np.pad(c, (0, width - len(c)), mode="edge") for c in curves], axis=0)
    report = EvalReport(
        cmc={k: float(np.mean([r[f"rank{k}"] for r in per_trial])) for k in ranks},
        curve=mean_curve,
        mAP=float(np.mean([r["mAP"] for r in per_trial])),
        trials=trials,
        per_trial=per_trial,
        meta={"protocol": protocol, "queries": int(query.shape[0]), "gallery_pool": int(gallery.shape[0]),
              "shots": "all" if shots is None else int(shots)},
    )
    for key in per_trial[0]:
        report.std[key] = float(np.std([r[key] for r in per_trial]))
    return report


# -- 2-D projection ----------------------------------------------------------


@dataclass
class Projection:
    points: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    degenerate: bool = False


def project_2d(embeddings):
    """Project onto the top two principal directions of the centred data.

    Each direction's sign is fixed so that its first nonzero loading is
    positive.  Zero-variance input yields all-zero points with
    ``degenerate=True``.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise ParameterError("project_2d needs at least 2 embeddings of dimension >= 2")
    centred = X - X.mean(axis=0)
    cov = centred.T @ centred / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    evals, comps = np.maximum(evals[order], 0.0), evecs[:, order]
    scale = max(float(np.abs(cov).max()), 1e-300)
    if evals[0] <= 1e-14 * scale or not np.any(centred):
        return Projection(np.zeros((X.shape[0], 2)), comps, np.zeros(2), degenerate=True)
    for j in range(2):
        nz = np.flatnonzero(np.abs(comps[:, j]) > 1e-12)
        if nz.size and comps[nz[0], j] < 0:
            comps[:, j] = -comps[:, j]
    return Projection(centred @ comps, comps, evals)


def write_projection(path, ids, identities, modalities, points, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        for line in header or ():
            fh.write(f"# {line}\n")
        fh.write("id\tidentity\tmodality\tx\ty\n")
        for sid, ident, mod, (x, y) in zip(ids, identities, modalities, points):
            fh.write(f"{sid}\t{int(ident)}\t{mod}\t{float(x)!r}\t{float(y)!r}\n")


def write_projection_svg(path, identities, modalities, points, size=480):
    """Minimal scatter plot: colour per identity, circle = visible, square = infrared."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 20
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    idents = sorted(set(int(i) for i in identities))
    colour = {ident: f"hsl({int(360 * n / max(len(idents), 1))},70%,45%)" for n, ident in enumerate(idents)}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for (x, y), ident, mod in zip(xy, identities, modalities):
        y = size - y
        c = colour[int(ident)]
        if mod == "infrared":
            parts.append(f'<rect x="{x - 3:.2f}" y="{y - 3:.2f}" width="6" height="6" fill="{c}"/>')
        else:
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3.5" fill="none" stroke="{c}" stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")

