"""Command-line interface: gradcheck, train, eval, synth and project.

Configuration files are INI text with sections ``data``, ``encoder``,
``train`` and ``weights``; any key can be overridden on the command line as
``--section.key=value``.  Precedence: defaults < config file < overrides <
dedicated flags such as ``--steps``.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import dataclasses
import os
import sys

import numpy as np

from . import gradsuite
from .data import EmbeddingDump, SynthConfig, load_dataset, read_embeddings, save_dataset, synth_generate, write_embeddings
from .encoder import EncoderConfig, check_modality, load_checkpoint
from .evaluation import evaluate_protocol, project_2d, write_projection, write_projection_svg
from .exceptions import DimensionError, ReIDError
from .trainer import TrainConfig, train

PROG = "crossmodal-reid"
SECTIONS = ("data", "encoder", "train", "weights")
DATA_KEYS = {f.name for f in dataclasses.fields(SynthConfig)} | {"manifest", "synth", "split"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights"}
ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)} - {"input_shape", "num_classes"}
WEIGHT_KEYS = {"eat", "cmkd", "id", "triplet"}
KEYS = {"data": DATA_KEYS, "encoder": ENCODER_KEYS, "train": TRAIN_KEYS, "weights": WEIGHT_KEYS}


class UsageError(ReIDError):
    """Bad command-line input; exit status 2."""


# -- configuration -------------------------------------------------------------


def _value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return tuple(_value(part) for part in text.split(","))
        return text


def default_config():
    toy = TrainConfig.toy()
    cfg = {
        "data": {**dataclasses.asdict(SynthConfig()), "manifest": None, "synth": False, "split": "train"},
        "encoder": {k: v for k, v in EncoderConfig().to_dict().items() if k in ENCODER_KEYS},
        "train": {k: v for k, v in toy.to_dict().items() if k in TRAIN_KEYS},
        "weights": dict(toy.weights),
    }
    return cfg


def _set(cfg, section, key, value, origin):
    if section not in SECTIONS:
        raise UsageError(f"{origin}: unknown section [{section}] (expected one of {', '.join(SECTIONS)})")
    if key not in KEYS[section]:
        raise UsageError(f"{origin}: unknown field {section}.{key} (valid: {', '.join(sorted(KEYS[section]))})")
    cfg[section][key] = value


def load_config_file(path, cfg):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        for key, text in parser.items(section):
            _set(cfg, section, key, _value(text), path)
    return cfg


def parse_overrides(tokens, cfg):
    """Apply ``--section.key=value`` tokens; anything else is a usage error."""
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {tok!r} (overrides look like --section.key=value)")
        name, text = tok[2:].split("=", 1)
        section, key = name.split(".", 1)
        _set(cfg, section, key, _value(text), "override")
    return cfg


def parse_weights(spec, cfg):
    for item in spec.replace(",", " ").split():
        if "=" not in item:
            raise UsageError(f"--loss-weights expects name=value pairs, got {item!r}")
        key, text = item.split("=", 1)
        value = _value(text)
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise UsageError(f"loss weight {key} must be a number, got {text!r}")
        _set(cfg, "weights", key, float(value), "--loss-weights")
    return cfg


def _build(factory, section, values):
    try:
        return factory(**values)
    except (TypeError, ValueError, ReIDError) as exc:
        raise UsageError(f"invalid [{section}] configuration: {exc}") from None


def build_configs(cfg):
    data = {k: v for k, v in cfg["data"].items() if k not in ("manifest", "synth", "split")}
    synth = _build(SynthConfig, "data", data)
    train_cfg = _build(TrainConfig, "train", {**cfg["train"], "weights": dict(cfg["weights"])})
    return synth, train_cfg


def config_text(cfg):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser[section] = {}
        for key in sorted(cfg[section]):
            value = cfg[section][key]
            if isinstance(value, (tuple, list)):
                text = ",".join(str(v) for v in value)
            else:
                text = "none" if value is None else str(value)
            parser[section][key] = text
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def _header(cfg, seed, command):
    lines = [f"{PROG} {command}", f"seed = {seed}", "effective config:"]
    lines.extend(line for line in config_text(cfg).splitlines() if line)
    return lines


# -- data resolution -------------------------------------------------------------


def _load_data(args, cfg, split_default):
    manifest = getattr(args, "manifest", None) or cfg["data"].get("manifest")
    use_synth = getattr(args, "synth", False) or cfg["data"].get("synth")
    if manifest:
        if not os.path.exists(manifest):
            raise UsageError(f"manifest not found: {manifest}")
        return load_dataset(manifest)
    if use_synth:
        synth, _ = build_configs(cfg)
        return synth_generate(synth, cfg["data"].get("split") or split_default)
    raise UsageError("no dataset: pass --manifest PATH or --synth")


# -- subcommands ---------------------------------------------------------------


def cmd_gradcheck(args):
    rows = gradsuite.run_suite(configs=args.configs, seed=args.seed, h=args.h, tol=args.tol,
                               names=args.only or None, inject_bug=args.inject_bug)
    table = gradsuite.format_rows(rows)
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(f"# {PROG} gradcheck\n# seed = {args.seed}\n# h = {args.h!r} tol = {args.tol!r}\n")
            fh.write(table + "\n")
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"gradient check failed: {r.name} (parameter {r.worst_param}, config {r.worst_config}, "
              f"relative error {r.max_rel_error:.3e} > {r.tol:g})", file=sys.stderr)
    return 1 if failed else 0


def cmd_train(args, overrides):
    cfg = default_config()
    if args.config:
        load_config_file(args.config, cfg)
    parse_overrides(overrides, cfg)
    if args.loss_weights:
        parse_weights(args.loss_weights, cfg)
    if args.identities is not None:
        cfg["data"]["identities"] = args.identities
    if args.samples_per_identity is not None:
        cfg["data"]["samples_per_identity"] = args.samples_per_identity
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    if args.seed is not None:
        for section in ("data", "encoder", "train"):
            cfg[section]["seed"] = args.seed
    if args.manifest:
        cfg["data"]["manifest"] = args.manifest
    if args.synth:
        cfg["data"]["synth"] = True
    _, train_cfg = build_configs(cfg)
    dataset = _load_data(args, cfg, "train")
    enc_cfg = _build(EncoderConfig, "encoder", {**cfg["encoder"], "input_shape": dataset.feature_shape})
    seed = train_cfg.seed

    log = None
    if args.log_every:
        def log(step, b):
            if step % args.log_every == 0:
                print(f"step {step}\tL_ALL {b.L_ALL:.6f}\tL_EAT {b.L_EAT:.6f}\tL_CMKD {b.L_CMKD:.6f}\tL_ID {b.L_ID:.6f}",
                      file=sys.stderr)

    encoder, history = train(dataset, enc_cfg, train_cfg, log=log)
    os.makedirs(args.out, exist_ok=True)
    header = _header(cfg, seed, "train")
    encoder.save(os.path.join(args.out, "model.ckpt"),
                 meta={"seed": seed, "config": cfg, "classes": dataset.identity_list, "dataset": dataset.name})
    history.write(os.path.join(args.out, "history.tsv"), header)
    with open(os.path.join(args.out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write("".join(f"# {line}\n" for line in header[:2]))
        fh.write(config_text(cfg))
    last = history.rows[-1]
    print(f"trained {len(history)} steps on {dataset.name} ({len(dataset)} samples); final L_ALL {last['L_ALL']:.6f}")
    print(f"wrote {args.out}/model.ckpt, history.tsv, config.ini")
    return 0


def _dumps_from_args(args):
    """Query and gallery EmbeddingDumps plus a description of their origin."""
    query_mod = check_modality(args.query_modality)
    if args.dump or args.query or args.gallery:
        if args.checkpoint:
            raise UsageError("pass either --checkpoint or embedding dumps, not both")
        if args.dump:
            if args.query or args.gallery:
                raise UsageError("--dump cannot be combined with --query/--gallery")
            dump = read_embeddings(args.dump)
            query = dump.select(query_mod)
            gallery = EmbeddingDump(*_other(dump, query_mod))
            source = args.dump
        else:
            if not (args.query and args.gallery):
                raise UsageError("--query and --gallery must be given together")
            query, gallery = read_embeddings(args.query), read_embeddings(args.gallery)
            source = f"{args.query} vs {args.gallery}"
        if query.dim != gallery.dim:
            raise DimensionError(f"query dimension {query.dim} does not match gallery dimension {gallery.dim}")
        return query, gallery, source, {}
    if not args.checkpoint:
        raise UsageError("no embeddings: pass --checkpoint with data, --dump, or --query/--gallery")
    encoder, meta = load_checkpoint(args.checkpoint)
    cfg = default_config()
    for section, values in (meta.get("config") or {}).items():
        if section in cfg:
            cfg[section].update({k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()})
    cfg["data"]["split"] = args.split
    cfg["data"]["manifest"] = None  # evaluation data is named explicitly, never the training manifest
    dataset = _load_data(args, cfg, args.split)
    full = embed_dataset(encoder, dataset)
    query = full.select(query_mod)
    gallery = EmbeddingDump(*_other(full, query_mod))
    return query, gallery, f"{args.checkpoint} on {dataset.name}", {"full": full}


def _other(dump, modality):
    keep = [m != modality for m in dump.modalities]
    mask = np.array(keep, dtype=bool)
    return ([i for i, k in zip(dump.ids, keep) if k], dump.identities[mask],
            [m for m, k in zip(dump.modalities, keep) if k], dump.vectors[mask])


def embed_dataset(encoder, dataset):
    vectors = np.empty((len(dataset), encoder.config.embedding_dim))
    for modality in ("visible", "infrared"):
        mask = dataset.modalities == modality
        if mask.any():
            vectors[mask] = encoder.embed(dataset.features[mask], modality)
    return EmbeddingDump([r.sample_id for r in dataset.records], dataset.identities, list(dataset.modalities), vectors)


def _shots(text):
    if text in ("all", "multi", "none"):
        return None
    try:
        shots = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"shots must be a positive int or 'all', got {text!r}") from None
    if shots < 1:
        raise argparse.ArgumentTypeError("shots must be >= 1")
    return shots


def cmd_eval(args):
    query, gallery, source, extra = _dumps_from_args(args)
    if len(query) == 0 or len(gallery) == 0:
        raise UsageError(f"{check_modality(args.query_modality)} queries need a non-empty gallery of the other modality")
    direction = f"{query.modalities[0]}-to-{gallery.modalities[0]}"
    report = evaluate_protocol(query.vectors, query.identities, gallery.vectors, gallery.identities,
                               trials=args.trials, shots=args.shots, rng=args.seed, protocol=direction)
    report.meta = {"source": source, "seed": args.seed, **report.meta}
    header = [f"{PROG} eval", f"seed = {args.seed}", f"trials = {args.trials}",
              f"shots = {'all' if args.shots is None else args.shots}", f"source = {source}"]
    print(f"rank1 {report.cmc[1]:.4f}  rank10 {report.cmc[10]:.4f}  rank20 {report.cmc[20]:.4f}  mAP {report.mAP:.4f}")
    if args.out:
        report.write(args.out, header)
        print(f"wrote {args.out}")
    if args.write_dump and "full" in extra:
        write_embeddings(extra["full"], args.write_dump, header)
    if args.projection:
        both = extra.get("full") or _concat(query, gallery)
        _project(both, args.projection, args.svg, header)
    return 0


def _concat(a, b):
    return EmbeddingDump(a.ids + b.ids, np.concatenate([a.identities, b.identities]),
                         a.modalities + b.modalities, np.vstack([a.vectors, b.vectors]))


def _project(dump, path, svg, header):
    proj = project_2d(dump.vectors)
    notes = list(header) + [f"explained variance = {proj.explained_variance[0]!r} {proj.explained_variance[1]!r}"]
    if proj.degenerate:
        notes.append("degenerate: embeddings have zero variance")
    write_projection(path, dump.ids, dump.identities, dump.modalities, proj.points, notes)
    if svg:
        write_projection_svg(svg, dump.identities, dump.modalities, proj.points)
    print(f"wrote {path}" + (f" and {svg}" if svg else ""))


def cmd_project(args):
    if args.dump:
        dump = read_embeddings(args.dump)
        source = args.dump
    elif args.checkpoint:
        encoder, meta = load_checkpoint(args.checkpoint)
        cfg = default_config()
        for section, values in (meta.get("config") or {}).items():
            if section in cfg:
                cfg[section].update({k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items()})
        cfg["data"]["split"] = args.split
        cfg["data"]["manifest"] = None
        dataset = _load_data(args, cfg, args.split)
        dump = embed_dataset(encoder, dataset)
        source = f"{args.checkpoint} on {dataset.name}"
    else:
        raise UsageError("pass --dump or --checkpoint with data")
    _project(dump, args.out, args.svg, [f"{PROG} project", f"source = {source}"])
    return 0


def cmd_synth(args, overrides):
    cfg = default_config()
    if args.config:
        load_config_file(args.config, cfg)
    parse_overrides(overrides, cfg)
    for key in ("identities", "samples_per_identity", "noise", "spatial", "gain", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg["data"][key] = value
    if args.offset is not None:
        cfg["data"]["modality_offset"] = args.offset
    if args.shape is not None:
        cfg["data"]["feature_shape"] = args.shape
    synth, _ = build_configs(cfg)
    splits = ("train", "test") if args.split == "both" else (args.split,)
    header = [f"{PROG} synth", f"seed = {synth.seed}"] + [f"{k} = {v}" for k, v in dataclasses.asdict(synth).items()]
    for split in splits:
        path = save_dataset(synth_generate(synth, split), args.out, stem=split, header=header + [f"split = {split}"])
        print(f"wrote {path}")
    return 0


# -- argument parsing ---------------------------------------------------------


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like C,H,W, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"shape must have three dimensions, got {text!r}")
    return dims


def build_parser():
    parser = argparse.ArgumentParser(prog=PROG, description="Cross-modality (visible/infrared) embedding learning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every loss term and encoder block")
    g.add_argument("--configs", type=int, default=50, help="random configurations per check (default 50)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    g.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    g.add_argument("--only", nargs="+", metavar="CHECK", help="run only these checks")
    g.add_argument("--inject-bug", action="store_true", help="perturb analytic gradients by 1%% (negative control)")
    g.add_argument("--out", help="also write the table to this file")

    t = sub.add_parser("train", help="train an encoder; extra --section.key=value flags override the config",
                       epilog="Override example: --train.lr=0.005 --encoder.non_local=false --data.noise=0.4")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--manifest", help="dataset manifest (payload locators resolved relative to it)")
    t.add_argument("--synth", action="store_true", help="train on the seeded synthetic dataset")
    t.add_argument("--identities", type=int, help="synthetic identities")
    t.add_argument("--samples-per-identity", type=int, help="synthetic samples per identity and modality")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int, help="seed for data, initialisation, sampling and augmentation")
    t.add_argument("--loss-weights", help="e.g. 'eat=0,cmkd=0' (terms: eat, cmkd, id, triplet)")
    t.add_argument("--out", default="run", help="output directory (default ./run)")
    t.add_argument("--log-every", type=int, default=0, help="print losses every N steps to stderr")

    def data_flags(p):
        p.add_argument("--checkpoint", help="model.ckpt written by train")
        p.add_argument("--manifest", help="dataset manifest to embed with the checkpoint")
        p.add_argument("--synth", action="store_true", help="regenerate the checkpoint's synthetic dataset")
        p.add_argument("--split", default="test", help="synthetic split to embed (default test)")

    e = sub.add_parser("eval", help="CMC/mAP over repeated random gallery draws")
    data_flags(e)
    e.add_argument("--dump", help="embedding dump holding both modalities")
    e.add_argument("--query", help="query embedding dump")
    e.add_argument("--gallery", help="gallery embedding dump")
    e.add_argument("--query-modality", default="infrared", help="modality of the queries (default infrared)")
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--shots", type=_shots, default=1, help="gallery samples per identity per trial, or 'all'")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="report file")
    e.add_argument("--write-dump", help="write the embedded dataset as a dump (checkpoint input only)")
    e.add_argument("--projection", help="also write a 2-D projection table")
    e.add_argument("--svg", help="with --projection: scatter plot file")

    p = sub.add_parser("project", help="2-D principal-component projection of embeddings")
    data_flags(p)
    p.add_argument("--dump", help="embedding dump")
    p.add_argument("--out", required=True, help="projection table (TSV)")
    p.add_argument("--svg", help="scatter plot file")

    s = sub.add_parser("synth", help="write a synthetic two-modality dataset (manifest + .npy payload)")
    s.add_argument("--config", help="INI config file ([data] section is used)")
    s.add_argument("--identities", type=int)
    s.add_argument("--samples-per-identity", type=int)
    s.add_argument("--shape", type=_shape, help="feature map shape C,H,W")
    s.add_argument("--noise", type=float)
    s.add_argument("--offset", type=float, help="modality offset (RMS)")
    s.add_argument("--spatial", type=float, help="share of identity signal that varies by position, in [0, 1]")
    s.add_argument("--gain", type=float, help="log-normal per-sample gain spread")
    s.add_argument("--seed", type=int)
    s.add_argument("--split", default="both", choices=("train", "test", "both"))
    s.add_argument("--out", default="synth", help="output directory")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command in ("train", "synth"):
            return cmd_train(args, extra) if args.command == "train" else cmd_synth(args, extra)
        if extra:
            raise UsageError(f"unrecognised arguments: {' '.join(extra)}")
        return {"gradcheck": cmd_gradcheck, "eval": cmd_eval, "project": cmd_project}[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ReIDError as exc:
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{PROG} {args.command}: error: {exc}", file=sys.stderr)
        return 1
