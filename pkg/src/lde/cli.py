"""Command-line workflow: gen, split, train, embed, eval, verify.

Every subcommand resolves its settings from defaults, an optional YAML
``--config`` file, ``--set a.b=value`` overrides and ``--seed``, in that order,
and writes the result to ``resolved_config.yaml`` next to its outputs.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or numeric
failure (including failed verification checks).
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import verify as verify_mod
from .data import PROTOCOLS, SynthConfig, load_images, parse_manifest, split, synth_generate, write_split
from .evaluation import evaluate, read_embeddings, write_embeddings, write_report
from .model import LdeModel, ModelConfig, load_checkpoint
from .numcore import NumericError
from .train import TrainConfig, TrainData, load_train_checkpoint, read_log, train

log = logging.getLogger("lde")

SNAPSHOT = "resolved_config.yaml"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    def fields(cls, skip=()):
        return {f.name: copy.deepcopy(f.default) for f in dataclasses.fields(cls)
                if f.name not in skip and f.default is not dataclasses.MISSING}

    tc = fields(TrainConfig)
    tc["adam_betas"] = list(tc["adam_betas"])
    tc["widths"] = list(tc["widths"])
    tc.pop("seed")
    gen = fields(SynthConfig, skip=("seed",))
    return {
        "seed": 0,
        "gen": gen,
        "split": {"protocol": "open_scene", "train_ratio": 0.5, "test_scenes": None},
        "train": {**tc, "scenes_per_domain": None, "data_root": None},
        "embed": {"batch_size": 64, "data_root": None},
        "eval": {},
        "verify": {"level": "quick", "inject_fault": None},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"config key '{where}' must be a mapping")
        if isinstance(base[k], dict) and isinstance(v, dict) and base[k]:
            _merge(base[k], v, where + ".")
        else:
            base[k] = v
    return base


def _apply_set(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got '{item}'")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as e:
        raise ConfigError(f"--set {key}: cannot parse value '{raw}' ({e})") from None
    node = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    _merge(cfg, node)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = _defaults()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{args.config}: invalid YAML ({e})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        _merge(cfg, loaded)
    for item in args.set or []:
        _apply_set(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _snapshot(cfg: dict, command: str, inputs: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    section = {k: cfg[k] for k in ("seed", command) if k in cfg}
    doc = {"command": command, "inputs": inputs, **section}
    (out / SNAPSHOT).write_text(yaml.safe_dump(doc, sort_keys=True, default_flow_style=False))


def _read_snapshot(directory: Path) -> dict:
    p = directory / SNAPSHOT
    return yaml.safe_load(p.read_text()) if p.is_file() else {}


def _data_root_for(split_dir: Path, explicit) -> Path:
    """Image root: explicit setting, else the manifest directory recorded when the split was made."""
    if explicit:
        return Path(explicit)
    manifest = _read_snapshot(split_dir).get("inputs", {}).get("manifest")
    if manifest:
        return Path(manifest).parent
    raise ConfigError(f"cannot find the image root for {split_dir}; pass --data or --set train.data_root=...")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen(args, cfg) -> int:
    g = dict(cfg["gen"])
    try:
        sc = SynthConfig(**g, seed=cfg["seed"])
    except TypeError as e:
        raise ConfigError(f"gen: {e}") from None
    out = Path(args.out)
    manifest = synth_generate(sc, out)
    _snapshot(cfg, "gen", {}, out)
    print(f"wrote {sc.total_images} images ({sc.num_domains} domains x {sc.ids_per_domain} ids x "
          f"{sc.images_per_id} images) and {manifest}")
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    s = cfg["split"]
    if args.protocol:
        s["protocol"] = args.protocol
    if s["protocol"] not in PROTOCOLS:
        raise ConfigError(f"unknown protocol '{s['protocol']}' (choose from {', '.join(PROTOCOLS)})")
    records = parse_manifest(args.manifest)
    res = split(records, s["protocol"], {"train": s["train_ratio"]}, seed=cfg["seed"], test_scenes=s["test_scenes"])
    out = Path(args.out)
    summary = write_split(res, out)
    _snapshot(cfg, "split", {"manifest": str(Path(args.manifest).resolve())}, out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _scenes_per_domain(root: Path) -> int:
    """Domain grouping recorded by ``gen``; a manifest without one treats each scene as a domain."""
    meta = root / "dataset.json"
    if meta.is_file():
        return int(json.loads(meta.read_text()).get("scenes_per_domain", 1))
    return 1


def _train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "data_root"}
    try:
        return TrainConfig(**t, seed=cfg["seed"])
    except TypeError as e:
        raise ConfigError(f"train: {e}") from None


def cmd_train(args, cfg) -> int:
    if args.lam is not None:
        cfg["train"]["lam"] = args.lam
    if args.iterations is not None:
        cfg["train"]["iterations"] = args.iterations
    split_dir = Path(args.split_dir)
    root = _data_root_for(split_dir, args.data or cfg["train"]["data_root"])
    cfg["train"]["data_root"] = str(root)
    if cfg["train"]["scenes_per_domain"] is None:
        cfg["train"]["scenes_per_domain"] = _scenes_per_domain(root)
    tc = _train_config(cfg)
    records = parse_manifest(split_dir / "train.jsonl")
    data = TrainData.from_records(records, root, tc.scenes_per_domain, tc.dtype)
    out = Path(args.out)
    state, rows = None, None
    if args.resume:
        state, _ = load_train_checkpoint(args.resume)
        state.config = tc
        log_path = Path(args.resume).parent / "train_log.csv"
        rows = [r for r in read_log(log_path) if r["iteration"] < state.iteration] if log_path.is_file() else []
        log.info("resuming from %s at iteration %d", args.resume, state.iteration)
    _snapshot(cfg, "train", {"split_dir": str(split_dir.resolve()),
                             "resume": str(Path(args.resume).resolve()) if args.resume else None}, out)

    def progress(row):
        if row["iteration"] % 50 == 0 or row["iteration"] == tc.iterations:
            log.info("iter %d lr %.3g ce %.4f trace %.4f triplet %.4f total %.4f", row["iteration"], row["lr"],
                     row["ce"], row["trace_term"], row["triplet"], row["total"])

    res = train(tc, data, out, state=state, log_rows=rows, progress=progress)
    last = res.log[-1] if res.log else None
    msg = f"trained to iteration {res.state.iteration}; checkpoint {res.checkpoint}"
    if last:
        msg += f"; final total loss {last['total']:.4f}"
    print(msg)
    return EXIT_OK


def cmd_embed(args, cfg) -> int:
    e = cfg["embed"]
    records_path = Path(args.records)
    root = _data_root_for(records_path.parent, args.data or e["data_root"])
    e["data_root"] = str(root)
    mcfg, tensors, _ = load_checkpoint(args.checkpoint)
    mc = ModelConfig(**mcfg)
    model = LdeModel.from_state(mc, tensors)
    records = parse_manifest(records_path)
    images = load_images(records, root, mc.dtype)
    embs = model.embed(images, batch_size=int(e["batch_size"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "embeddings.jsonl"
    write_embeddings([r.path for r in records], embs, target)
    _snapshot(cfg, "embed", {"checkpoint": str(Path(args.checkpoint).resolve()),
                             "records": str(records_path.resolve())}, out)
    print(f"wrote {len(records)} embeddings of dimension {embs.shape[1]} to {target}")
    return EXIT_OK


def _lookup(embs: dict, records, what: str) -> np.ndarray:
    missing = [r.path for r in records if r.path not in embs]
    if missing:
        raise ConfigError(f"{len(missing)} {what} record(s) have no embedding, e.g. {missing[0]}")
    return np.stack([embs[r.path] for r in records]) if records else np.zeros((0, 0))


def cmd_eval(args, cfg) -> int:
    embs = read_embeddings(args.embeddings)
    query, gallery = parse_manifest(args.query), parse_manifest(args.gallery)
    rep = evaluate([r.pid for r in query], [r.cam for r in query], [r.pid for r in gallery],
                   [r.cam for r in gallery], _lookup(embs, query, "query"), _lookup(embs, gallery, "gallery"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rep, out / "report.json", out / "report.csv")
    _snapshot(cfg, "eval", {"embeddings": str(Path(args.embeddings).resolve()), "query": str(Path(args.query).resolve()),
                            "gallery": str(Path(args.gallery).resolve())}, out)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    v = cfg["verify"]
    if args.level:
        v["level"] = args.level
    if args.inject_fault:
        v["inject_fault"] = args.inject_fault
    print(f"{'check':<28} {'status':<5} {'measured':<21} threshold")
    results = verify_mod.run_checks(v["level"], echo=lambda line: print(line, flush=True),
                                    inject_fault=v["inject_fault"])
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        _snapshot(cfg, "verify", {}, out)
        (out / "verify_report.json").write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "measured": r.measured, "threshold": r.threshold,
              "detail": r.detail} for r in results], indent=2) + "\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_RUNTIME if failed else EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are validation errors, not argparse's default status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file with gen/split/train/embed/eval/verify sections")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.lam=0")
    common.add_argument("--seed", type=int)

    p = _Parser(prog="lde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic multi-domain dataset")
    g.add_argument("--out", required=True)

    s = sub.add_parser("split", parents=[common], help="split a manifest under an evaluation protocol")
    s.add_argument("manifest")
    s.add_argument("--protocol", choices=PROTOCOLS)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train on a split's train.jsonl")
    t.add_argument("split_dir")
    t.add_argument("--out", required=True)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--data", help="image root (default: the manifest directory recorded by split)")

    e = sub.add_parser("embed", parents=[common], help="export eval-mode embeddings for a record file")
    e.add_argument("checkpoint")
    e.add_argument("records")
    e.add_argument("--out", required=True)
    e.add_argument("--data", help="image root (default: the manifest directory recorded by split)")

    v = sub.add_parser("eval", parents=[common], help="mAP / CMC report from embeddings")
    v.add_argument("embeddings")
    v.add_argument("query")
    v.add_argument("gallery")
    v.add_argument("--out", required=True)

    c = sub.add_parser("verify", parents=[common], help="run the numerical self-checks")
    c.add_argument("--level", choices=("quick", "full"))
    c.add_argument("--out")
    c.add_argument("--inject-fault", choices=("trace_sign",), help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train, "embed": cmd_embed, "eval": cmd_eval,
            "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("LDE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (NumericError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
