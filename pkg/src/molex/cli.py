"""Command-line entry point: ``molex <command> [flags]``.

Settings resolve as CLI flag > ``MOLEX_SEED`` (seed only) > config file > built-in
default. Every command that writes a run directory archives the resolved settings
there as ``resolved_config.json``. Failures print one line of the form
``molex: error[<category>]: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data as data_mod
from .backbone import Encoder, ModelConfig
from .checkpoint import ModelCheckpoint
from .errors import ConfigError, MolexError
from .freeze import FreezeMask
from .losses import (UtilizationAccumulator, count_params, eer_details, effective_ranks, utilization_csv)
from .training import TrainConfig, adapt, pretrain, score_dataset, train

log = logging.getLogger("molex")

EXIT_CODES = {"usage": 2, "config": 3, "format": 4, "missing_file": 5, "numeric": 6}
CHECKPOINT_NAME = "checkpoint.molx"
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": data_mod.SynthSpec}


# ---------------------------------------------------------------- config resolution

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, title: str, skip=()) -> None:
    group = p.add_argument_group(f"{title} settings (also [{title}] in the config file)")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.type in (bool, "bool"):
            group.add_argument(_flag(f.name), dest=f"{title}.{f.name}", action=argparse.BooleanOptionalAction,
                               default=None, help=f"default: {f.default}")
        else:
            kind = {"int": int, "float": float, "str": str}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            group.add_argument(_flag(f.name), dest=f"{title}.{f.name}", type=kind, default=None,
                               metavar=f.name.upper(), help=f"default: {f.default}")


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing config file {p}")
    try:
        with p.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    for key, value in raw.items():
        if key not in SECTIONS or not isinstance(value, dict):
            raise ConfigError(f"{p}: unexpected top-level entry {key!r}; use [model], [train] or [data] tables")
        unknown = set(value) - {f.name for f in dataclasses.fields(SECTIONS[key])}
        if unknown:
            raise ConfigError(f"{p}: unknown [{key}] keys {sorted(unknown)}")
    return raw


def resolve(args: argparse.Namespace, section: str, cls, base: dict | None = None):
    """Build ``cls`` from defaults, then ``base``, the config file, MOLEX_SEED and CLI flags."""
    merged = {f.name: f.default for f in dataclasses.fields(cls)}
    merged.update(base or {})
    merged.update(args._file.get(section, {}))
    env_seed = os.environ.get("MOLEX_SEED")
    if env_seed is not None and "seed" in merged:
        try:
            merged["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"MOLEX_SEED must be an integer, got {env_seed!r}") from None
    for key, value in vars(args).items():
        if key.startswith(section + ".") and value is not None:
            merged[key.split(".", 1)[1]] = value
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _archive(out: Path, command: str, args: argparse.Namespace, **sections) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command,
              "inputs": {k: v for k, v in vars(args).items()
                         if not k.startswith("_") and "." not in k and k not in ("func", "command")},
              **{k: (dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v) for k, v in sections.items()}}
    (out / "resolved_config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _load_data(path: str) -> data_mod.Dataset:
    return data_mod.load(path)


def _checkpoint_path(path: str) -> Path:
    p = Path(path)
    return p / CHECKPOINT_NAME if p.is_dir() else p


def _write_history(out: Path, hist) -> None:
    (out / "history.csv").write_text(hist.to_csv())


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    spec = resolve(args, "data", data_mod.SynthSpec)
    out = Path(args.out)
    ds = data_mod.generate(spec)
    data_mod.save(ds, out)
    _archive(out, "gen", args, data=spec)
    print(f"wrote {len(ds)} utterances to {out}")
    return 0


def cmd_pretrain(args) -> int:
    model = resolve(args, "model", ModelConfig)
    cfg = resolve(args, "train", TrainConfig)
    ds = _load_data(args.data)
    dev = _load_data(args.dev) if args.dev else None
    if ds and ds.d_in != model.d_in:
        raise ConfigError(f"dataset feature dim {ds.d_in} != model d_in {model.d_in}")
    out = Path(args.out)
    _archive(out, "pretrain", args, model=model, train=cfg)
    enc = Encoder.build(model, cfg.seed)
    hist = pretrain(enc, ds, cfg, dev)
    ModelCheckpoint.from_encoder(enc, FreezeMask.pretrain(enc), cfg.seed, {"phase": "pretrain"}).save(
        out / CHECKPOINT_NAME)
    _write_history(out, hist)
    print(f"phase A done: {len(hist.records)} epochs, checkpoint {out / CHECKPOINT_NAME}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve(args, "train", TrainConfig)
    ckpt = ModelCheckpoint.load(_checkpoint_path(args.checkpoint))
    enc = ckpt.build()
    ds = _load_data(args.data)
    dev = _load_data(args.dev) if args.dev else None
    out = Path(args.out)
    _archive(out, "train", args, model=ckpt.config, train=cfg)
    mask = FreezeMask.molex(enc)
    hist = train(enc, ds, cfg, mask, dev)
    ModelCheckpoint.from_encoder(enc, mask, cfg.seed, {"phase": "train"}).save(out / CHECKPOINT_NAME)
    _write_history(out, hist)
    last = hist.last if hist.records else None
    if last is not None:
        print(f"phase B done: l_ce {last.l_ce:.4f}  l_orth {last.l_orth:.4f}  mean_eff_rank {last.mean_eff_rank:.2f}")
    return 0


def cmd_adapt(args) -> int:
    cfg = resolve(args, "train", TrainConfig)
    ckpt = ModelCheckpoint.load(_checkpoint_path(args.checkpoint))
    enc = ckpt.build()
    new = _load_data(args.new_data)
    old = _load_data(args.old_data) if args.old_data else None
    dev = _load_data(args.dev) if args.dev else None
    out = Path(args.out)
    _archive(out, "adapt", args, model=ckpt.config, train=cfg)
    hist = adapt(enc, new, old, args.new_experts, cfg, dev)
    mask = FreezeMask.adaptation(enc, train_head=cfg.train_head_in_adapt)
    ModelCheckpoint.from_encoder(enc, mask, cfg.seed, {"phase": "adapt"}).save(out / CHECKPOINT_NAME)
    _write_history(out, hist)
    print(f"adapted: experts per layer {enc.experts_per_layer()}")
    return 0


def cmd_eval(args) -> int:
    enc = ModelCheckpoint.load(_checkpoint_path(args.checkpoint)).build()
    ds = _load_data(args.data)
    scores = score_dataset(enc, ds)
    lines = [f"{u.id}\t{u.label}\t{s:.10g}" for u, s in zip(ds, scores)]
    text = "".join(line + "\n" for line in lines)
    if args.scores:
        Path(args.scores).parent.mkdir(parents=True, exist_ok=True)
        Path(args.scores).write_text(text)
    res = eer_details(scores, [u.label for u in ds])
    print(f"EER: {100 * res.eer:.2f}%")
    if res.inverted:
        print("warning: scores rank spoof above bonafide (EER > 50%)", file=sys.stderr)
    return 0


def cmd_analyze_rank(args) -> int:
    enc = ModelCheckpoint.load(_checkpoint_path(args.checkpoint)).build()
    mods = enc.molex_layers
    taus = args.tau or [1e-2]
    rows = ["tau,layer,expert,rank,effective_rank"]
    for tau in taus:
        ranks = effective_ranks(mods, tau)
        for li, mod in enumerate(mods):
            for ei, e in enumerate(mod.experts):
                rows.append(f"{tau:g},{li},{ei},{e.rank},{ranks[li, ei]}")
        valid = ranks[ranks >= 0]
        print(f"tau={tau:g}  allocated rank r={enc.cfg.rank}  mean effective rank {valid.mean():.2f}")
        for li in range(len(mods)):
            print(f"  layer {li}: " + " ".join(f"{v:3d}" for v in ranks[li] if v >= 0))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(rows) + "\n")
    return 0


def cmd_heatmap(args) -> int:
    enc = ModelCheckpoint.load(_checkpoint_path(args.checkpoint)).build()
    acc = UtilizationAccumulator()
    score_dataset(enc, _load_data(args.data), accumulator=acc)
    text = utilization_csv(acc.report())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_params(args) -> int:
    if args.checkpoint:
        ckpt = ModelCheckpoint.load(_checkpoint_path(args.checkpoint))
        enc = ckpt.build()
        report = count_params(enc, FreezeMask.molex(enc))
        model = ckpt.config
    else:
        base = ModelConfig.full_scale().to_dict() if args.full_scale else None
        model = resolve(args, "model", ModelConfig, base)
        report = count_params(model)
    print(report.render())
    if args.out:
        out = Path(args.out)
        _archive(out, "params", args, model=model)
        (out / "params.txt").write_text(report.render() + "\n")
        (out / "params.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molex", description="Mixture of LoRA experts for spoof detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML file with [model], [train] and [data] tables")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "Generate a synthetic bonafide/spoof dataset.")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_dataclass_flags(p, data_mod.SynthSpec, "data")

    p = command("pretrain", cmd_pretrain, "Phase A: train the backbone with the experts frozen.")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--dev", help="optional dev dataset directory, scored every epoch")
    p.add_argument("--out", required=True, help="run directory for checkpoint, history and config")
    _add_dataclass_flags(p, ModelConfig, "model")
    _add_dataclass_flags(p, TrainConfig, "train", skip=("replay_fraction", "train_head_in_adapt"))

    p = command("train", cmd_train, "Phase B: freeze the backbone and train experts, routers, merge and classifier.")
    p.add_argument("--checkpoint", required=True, help="Phase A checkpoint file or run directory")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--dev", help="optional dev dataset directory, scored every epoch")
    p.add_argument("--out", required=True, help="run directory for checkpoint, history and config")
    _add_dataclass_flags(p, TrainConfig, "train", skip=("replay_fraction", "train_head_in_adapt"))

    p = command("adapt", cmd_adapt, "Add experts to every MoLEx layer and train them on a new domain.")
    p.add_argument("--checkpoint", required=True, help="base checkpoint file or run directory")
    p.add_argument("--new-data", required=True, help="new-domain dataset directory")
    p.add_argument("--old-data", help="old-domain dataset directory used for replay")
    p.add_argument("--new-experts", type=int, default=2, help="experts added per layer (default: 2)")
    p.add_argument("--dev", help="optional dev dataset directory, scored every epoch")
    p.add_argument("--out", required=True, help="run directory for checkpoint, history and config")
    _add_dataclass_flags(p, TrainConfig, "train")

    p = command("eval", cmd_eval, "Score a dataset and print the EER.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--scores", help="write utt_id<TAB>label<TAB>score lines to this file")

    p = command("analyze-rank", cmd_analyze_rank, "Per-expert effective rank of every MoLEx layer.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--tau", type=float, action="append", help="singular value threshold, repeatable (default: 1e-2)")
    p.add_argument("--out", help="write the table as CSV to this file")

    p = command("heatmap", cmd_heatmap, "Expert utilization per layer over a dataset, as CSV.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="CSV file to write (default: stdout)")

    p = command("params", cmd_params, "Count total and trainable parameters for a checkpoint or configuration.")
    p.add_argument("--checkpoint", help="checkpoint file or run directory (otherwise count from config)")
    p.add_argument("--full-scale", action="store_true", help="start from the large reference layout")
    p.add_argument("--out", help="directory for params.txt, params.json and the resolved config")
    _add_dataclass_flags(p, ModelConfig, "model")
    return parser


def _category(exc: BaseException) -> str:
    if isinstance(exc, MolexError):
        return exc.category
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, (IsADirectoryError, NotADirectoryError, PermissionError)):
        return "io"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args._file = _read_config_file(args.config)
        return args.func(args)
    except (MolexError, OSError) as exc:
        cat = _category(exc)
        msg = " ".join(str(exc).split())
        print(f"molex: error[{cat}]: {msg}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
