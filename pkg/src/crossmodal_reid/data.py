"""Datasets, manifest files, the synthetic two-modality generator, random
erasing and embedding dumps.

Manifest format
---------------
UTF-8 text, one record per line, whitespace-separated fields::

    # comment lines and blank lines are ignored
    <sample id> <identity:int> <modality> [<locator>]

``modality`` is ``visible`` or ``infrared`` (``rgb``/``ir``/``thermal`` are
accepted aliases).  The optional locator ``<file>#<row>`` points at row
``row`` of a ``.npy`` array of feature maps, relative to the manifest; ``-``
or an absent field means no payload.

Embedding dump format
---------------------
Optional ``#`` comment lines, then a header ``D=<dim> N=<count>`` followed
by ``N`` lines ``<id> <identity> <modality> v1 ... vD``.  Floats are written
with ``repr`` so they read back bit-for-bit.
"""

from __future__ import annotations

import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .encoder import MODALITIES, check_modality
from .exceptions import DatasetError, ParameterError, ParseError


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    identity: int
    modality: str
    locator: str | None = None

    def __post_init__(self):
        if self.sample_id is None or self.sample_id == "":
            raise DatasetError("sample record without an id")
        if self.identity is None:
            raise DatasetError(f"sample {self.sample_id} has no identity")
        if self.modality not in MODALITIES:
            raise DatasetError(f"sample {self.sample_id} has invalid modality {self.modality!r}")


@dataclass
class Manifest:
    records: list
    name: str = "manifest"
    lines: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise DatasetError(f"duplicate sample id {rec.sample_id}")
            seen.add(rec.sample_id)
        if not self.records:
            raise DatasetError(f"manifest {self.name} has no records")

    @property
    def modality_counts(self):
        """``{identity: {modality: count}}``."""
        counts = defaultdict(Counter)
        for rec in self.records:
            counts[rec.identity][rec.modality] += 1
        return {k: dict(v) for k, v in sorted(counts.items())}

    def __len__(self):
        return len(self.records)


class Dataset:
    """Records with materialised feature maps.

    ``features[i]`` is the ``(C, H, W)`` map of ``records[i]``.
    """

    def __init__(self, records, features, name="dataset"):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 4:
            raise DatasetError(f"features must have shape (n, C, H, W), got {features.shape}")
        if len(records) != features.shape[0]:
            raise DatasetError("one feature map per record is required")
        Manifest(list(records), name)  # validates ids
        self.records = list(records)
        self.features = features
        self.name = name
        self.identities = np.array([r.identity for r in self.records], dtype=np.int64)
        self.modalities = np.array([r.modality for r in self.records])
        self._index = defaultdict(list)
        for i, r in enumerate(self.records):
            self._index[(r.identity, r.modality)].append(i)
        self._index = {k: np.array(v, dtype=np.int64) for k, v in self._index.items()}
        self.channel_mean = features.mean(axis=(0, 2, 3))

    def __len__(self):
        return len(self.records)

    @property
    def feature_shape(self):
        return self.features.shape[1:]

    @property
    def identity_list(self):
        return sorted(set(self.identities.tolist()))

    def indices(self, identity, modality):
        return self._index.get((identity, modality), np.empty(0, dtype=np.int64))

    def subset(self, modality):
        mask = self.modalities == modality
        return self.features[mask], self.identities[mask], [r for r, m in zip(self.records, mask) if m]


# -- manifests ---------------------------------------------------------------


def parse_manifest(lines, name="manifest", path=None):
    records, line_numbers, seen = [], [], {}
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) < 3:
            raise ParseError("expected 'id identity modality [locator]'", line=lineno, path=path)
        if len(parts) > 4:
            raise ParseError(f"too many fields ({len(parts)})", line=lineno, path=path)
        sample_id, identity, modality = parts[:3]
        try:
            identity = int(identity)
        except ValueError:
            raise ParseError(f"identity {identity!r} is not an integer", line=lineno, path=path) from None
        try:
            modality = check_modality(modality)
        except ParameterError:
            raise ParseError(f"unknown modality {modality!r}", line=lineno, path=path) from None
        if sample_id in seen:
            raise ParseError(f"duplicate sample id {sample_id!r} (first on line {seen[sample_id]})", line=lineno, path=path)
        seen[sample_id] = lineno
        locator = parts[3] if len(parts) == 4 and parts[3] != "-" else None
        records.append(SampleRecord(sample_id, identity, modality, locator))
        line_numbers.append(lineno)
    if not records:
        raise DatasetError(f"manifest {path or name} contains no records")
    return Manifest(records, name, line_numbers)


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    name = os.path.splitext(os.path.basename(path))[0]
    return parse_manifest(lines, name=name, path=path)


def write_manifest(manifest, path, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        for line in header or ():
            fh.write(f"# {line}\n")
        for rec in manifest.records:
            fh.write(f"{rec.sample_id}\t{rec.identity}\t{rec.modality}\t{rec.locator or '-'}\n")


def load_dataset(path):
    """Load a manifest and resolve its ``file#row`` locators into a Dataset."""
    manifest = load_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    cache, maps = {}, []
    for rec, lineno in zip(manifest.records, manifest.lines):
        if rec.locator is None:
            raise ParseError(f"record {rec.sample_id} has no payload locator", line=lineno, path=path)
        file, _, row = rec.locator.partition("#")
        full = os.path.join(base, file)
        if full not in cache:
            try:
                cache[full] = np.load(full, allow_pickle=False)
            except OSError as exc:
                raise ParseError(f"cannot read payload {file}: {exc}", line=lineno, path=path) from None
        arr = cache[full]
        try:
            maps.append(arr[int(row)] if row else arr)
        except (ValueError, IndexError):
            raise ParseError(f"bad locator {rec.locator!r}", line=lineno, path=path) from None
    shapes = {m.shape for m in maps}
    if len(shapes) != 1 or len(next(iter(shapes))) != 3:
        raise DatasetError(f"payload feature maps must share one (C, H, W) shape, got {sorted(shapes)}")
    return Dataset(manifest.records, np.stack(maps), name=manifest.name)


def save_dataset(dataset, directory, stem="dataset", header=None):
    """Write ``<stem>.tsv`` (manifest) and ``<stem>.npy`` (payload) into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    payload = f"{stem}.npy"
    np.save(os.path.join(directory, payload), dataset.features)
    records = [SampleRecord(r.sample_id, r.identity, r.modality, f"{payload}#{i}") for i, r in enumerate(dataset.records)]
    path = os.path.join(directory, f"{stem}.tsv")
    write_manifest(Manifest(records, dataset.name), path, header)
    return path


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthConfig:
    identities: int = 8
    samples_per_identity: int = 4
    feature_shape: tuple = (8, 3, 3)
    center_scale: float = 1.0
    noise: float = 0.4
    modality_offset: float = 1.0
    spatial: float = 0.5
    gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.feature_shape = tuple(int(v) for v in self.feature_shape)
        if self.identities < 2:
            raise ParameterError("synthetic data needs at least 2 identities")
        if self.samples_per_identity < 1:
            raise ParameterError("samples_per_identity must be >= 1")
        if self.noise < 0 or self.modality_offset < 0 or self.center_scale < 0:
            raise ParameterError("noise, modality_offset and center_scale must be >= 0")
        if len(self.feature_shape) != 3 or min(self.feature_shape) < 1:
            raise ParameterError("feature_shape must be three positive ints")
        if not 0.0 <= self.spatial <= 1.0:
            raise ParameterError("spatial must lie in [0, 1]")
        if self.gain < 0:
            raise ParameterError("gain must be >= 0")


def synth_generate(cfg: SynthConfig, split="train"):
    """Identity ``k`` gets centre ``c_k``; visible = ``c_k + noise``, infrared =
    ``c_k + offset + noise``.

    Centres and the modality offset depend only on ``cfg.seed``; the noise
    stream also depends on ``split`` so a ``"test"`` draw shares identities
    with ``"train"`` but not samples.
    """
    dim = int(np.prod(cfg.feature_shape))
    C, H, W = cfg.feature_shape
    base = np.random.default_rng(cfg.seed)

    def pattern(*lead):
        # per-channel profile repeated over positions, mixed with a per-position part
        profile = np.broadcast_to(base.normal(size=lead + (C, 1, 1)), lead + (C, H, W))
        local = base.normal(size=lead + (C, H, W))
        mixed = math.sqrt(1.0 - cfg.spatial) * profile + math.sqrt(cfg.spatial) * local
        return mixed.reshape(lead + (dim,))

    centres = cfg.center_scale * pattern(cfg.identities)
    offset = pattern()
    offset *= cfg.modality_offset / max(np.linalg.norm(offset) / math.sqrt(dim), 1e-12)
    split_key = sum(ord(ch) for ch in split) * 7919 + len(split)
    noise_rng = np.random.default_rng([cfg.seed, split_key])
    records, maps = [], []
    for k in range(cfg.identities):
        for modality in MODALITIES:
            shift = offset if modality == "infrared" else 0.0
            for j in range(cfg.samples_per_identity):
                sample = centres[k] + shift + cfg.noise * noise_rng.normal(size=dim)
                if cfg.gain:
                    sample = sample * math.exp(cfg.gain * noise_rng.normal())
                records.append(SampleRecord(f"{split}-{k:04d}-{modality[0]}{j:03d}", k, modality))
                maps.append(sample.reshape(cfg.feature_shape))
    return Dataset(records, np.stack(maps), name=f"synth-{split}")


# -- augmentation ------------------------------------------------------------


def random_erase(x, probability=0.5, area=(0.02, 0.4), aspect=(0.3, 3.3), rng=None, fill=None, attempts=100):
    """Overwrite one random rectangle of a ``(C, H, W)`` map with ``fill``.

    ``fill`` is a per-channel value (defaults to the map's channel means).
    Returns ``(output, erased)``; the input array is never modified.
    """
    if not 0.0 <= probability <= 1.0:
        raise ParameterError("erasing probability must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng()
    if rng.random() >= probability:
        return x, False
    C, H, W = x.shape
    fill = x.mean(axis=(1, 2)) if fill is None else np.broadcast_to(np.asarray(fill, dtype=np.float64), (C,))
    for _ in range(attempts):
        target = rng.uniform(*area) * H * W
        ratio = rng.uniform(*aspect)
        h = int(round(math.sqrt(target * ratio)))
        w = int(round(math.sqrt(target / ratio)))
        if 0 < h < H and 0 < w < W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            out = x.copy()
            out[:, top : top + h, left : left + w] = fill[:, None, None]
            return out, True
    return x, False


# -- embedding dumps ---------------------------------------------------------


@dataclass
class EmbeddingDump:
    ids: list
    identities: np.ndarray
    modalities: list
    vectors: np.ndarray

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.ids = [str(i) for i in self.ids]
        self.modalities = [check_modality(m) for m in self.modalities]
        if self.vectors.ndim != 2:
            raise ParameterError("dump vectors must be a 2-D array")
        n = self.vectors.shape[0]
        if not (len(self.ids) == len(self.identities) == len(self.modalities) == n):
            raise ParameterError("dump columns have different lengths")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def select(self, modality):
        mask = np.array([m == modality for m in self.modalities], dtype=bool)
        return EmbeddingDump(
            [i for i, keep in zip(self.ids, mask) if keep],
            self.identities[mask],
            [m for m, keep in zip(self.modalities, mask) if keep],
            self.vectors[mask],
        )

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingDump)
            and self.ids == other.ids
            and self.modalities == other.modalities
            and np.array_equal(self.identities, other.identities)
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def write_embeddings(dump: EmbeddingDump, path, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        for line in header or ():
            fh.write(f"# {line}\n")
        fh.write(f"D={dump.dim} N={len(dump)}\n")
        for sid, ident, mod, vec in zip(dump.ids, dump.identities, dump.modalities, dump.vectors):
            fh.write(f"{sid} {int(ident)} {mod} " + " ".join(repr(float(v)) for v in vec) + "\n")


def read_embeddings(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header_at = None
    for lineno, line in enumerate(lines, start=1):
        if line.strip() and not line.lstrip().startswith("#"):
            header_at = lineno
            break
    if header_at is None:
        raise ParseError("missing 'D=<dim> N=<count>' header", path=path)
    try:
        fields_ = dict(tok.split("=", 1) for tok in lines[header_at - 1].split())
        dim, count = int(fields_["D"]), int(fields_["N"])
    except (ValueError, KeyError):
        raise ParseError("malformed header, expected 'D=<dim> N=<count>'", line=header_at, path=path) from None
    ids, idents, mods, rows = [], [], [], []
    for lineno in range(header_at + 1, len(lines) + 1):
        line = lines[lineno - 1]
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        row_index = len(rows)
        if len(parts) != dim + 3:
            raise ParseError(f"row {row_index} has {len(parts) - 3} values, expected D={dim}", line=lineno, path=path)
        try:
            ident = int(parts[1])
            mod = check_modality(parts[2])
            vec = [float(v) for v in parts[3:]]
        except (ValueError, ParameterError) as exc:
            raise ParseError(f"row {row_index}: {exc}", line=lineno, path=path) from None
        ids.append(parts[0])
        idents.append(ident)
        mods.append(mod)
        rows.append(vec)
    if len(rows) != count:
        raise ParseError(f"header declares N={count} rows but the file has {len(rows)}", path=path)
    vectors = np.array(rows, dtype=np.float64).reshape(count, dim)
    return EmbeddingDump(ids, np.array(idents, dtype=np.int64), mods, vectors)
