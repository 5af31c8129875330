"""``derain`` command line: synth, train, infer, eval, ablate, replay.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, metrics, raindrop
from .autoencoder import NonFiniteLossError
from .training import (
    Checkpoint,
    TrainConfig,
    Trainer,
    TrainingAborted,
    evaluate_checkpoint,
    infer,
    truncate_log,
)

log = logging.getLogger("derain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
SEED_ENV = "DERAIN_SEED"
# fields a resumed run may change; everything else comes from the checkpoint
RESUMABLE = {"steps", "checkpoint_every", "eval_every"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- manifests -----------------------------------------------------------------


@dataclasses.dataclass
class RunManifest:
    command: str
    arguments: dict
    config: dict
    seed: int | None
    dataset_root: str | None
    outputs: list[str]
    tool_version: str = __version__
    timestamp: str = ""

    def write(self, path):
        self.timestamp = self.timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def _arguments(args):
    return {k: v for k, v in vars(args).items() if k not in ("func", "config_file")}


# --- config resolution -----------------------------------------------------------------


def _parse_value(field, text):
    default = field.default
    if isinstance(default, tuple):
        cast = float if default and isinstance(default[0], float) else int
        return tuple(cast(v) for v in str(text).replace("(", "").replace(")", "").split(",") if v.strip())
    if isinstance(default, bool):
        if str(text).lower() in ("1", "true", "yes"):
            return True
        if str(text).lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return type(default)(text)


def read_config_file(path):
    """Flat ``key = value`` text; ``#`` starts a comment. Keys are TrainConfig fields."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(fields[key], val)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from exc
    return values


def _cli_overrides(args):
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig) if getattr(args, f.name, None) is not None}


def resolve_config(args):
    """defaults < config file < CLI flags; ``DERAIN_SEED`` fills the seed only when nothing else does."""
    values = {}
    if getattr(args, "config_file", None):
        if not Path(args.config_file).is_file():
            raise DataError(f"config file not found: {args.config_file}")
        values.update(read_config_file(args.config_file))
    values.update(_cli_overrides(args))
    if "seed" not in values and os.environ.get(SEED_ENV):
        values["seed"] = _env_seed()
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _env_seed():
    try:
        return int(os.environ[SEED_ENV])
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from exc


def _seed_or_env(value, default=0):
    if value is not None:
        return value
    if os.environ.get(SEED_ENV):
        return _env_seed()
    return default


def _prepare_out(path, force):
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return Checkpoint.load(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def _load_pairs(root, split):
    try:
        pairs = raindrop.load_dataset(root, split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if not pairs:
        raise DataError(f"no image pairs under {Path(root) / split}")
    return pairs


# --- commands ---------------------------------------------------------------------


def cmd_synth(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 16 or args.size % 4:
        raise UsageError("--size must be >= 16 and divisible by 4")
    if args.drops_min < 0 or args.drops_max < args.drops_min:
        raise UsageError("need 0 <= --drops-min <= --drops-max")
    args.seed = _seed_or_env(args.seed)
    out = _prepare_out(args.out, args.force)
    RunManifest("synth", _arguments(args), {}, args.seed, str(out), [str(out / args.split)]).write(out / MANIFEST_NAME)
    pairs = raindrop.make_dataset(args.count, args.size, (args.drops_min, args.drops_max), seed=args.seed)
    raindrop.write_dataset(out, pairs, split=args.split)
    print(f"wrote {len(pairs)} pairs to {out / args.split}")
    return EXIT_OK


def cmd_train(args):
    pairs = _load_pairs(args.data, args.split)
    out = Path(args.out)
    ckdir = out / "checkpoints"
    log_path = out / "log.csv"
    if args.resume:
        ckpt = _load_checkpoint(args.resume)
        requested = read_config_file(args.config_file) if args.config_file else {}
        requested.update(_cli_overrides(args))
        fixed = [
            k
            for k, v in requested.items()
            if k not in RESUMABLE and getattr(dataclasses.replace(ckpt.config, **{k: v}), k) != getattr(ckpt.config, k)
        ]
        if fixed:
            raise UsageError(f"cannot change {sorted(fixed)} when resuming; they come from the checkpoint")
        config = dataclasses.replace(ckpt.config, **{k: v for k, v in requested.items() if k in RESUMABLE})
        out.mkdir(parents=True, exist_ok=True)
        trainer = Trainer.from_checkpoint(ckpt, config)
        truncate_log(log_path, ckpt.step)
        manifest_path = out / f"run_manifest_resume_{ckpt.step:06d}.json"
    else:
        config = resolve_config(args)
        _prepare_out(out, args.force)
        trainer = Trainer(config)
        manifest_path = out / MANIFEST_NAME
    args_record = _arguments(args)
    args_record["resolved"] = config.to_dict()
    RunManifest("train", args_record, config.to_dict(), config.seed, str(args.data), [str(log_path), str(ckdir)]).write(manifest_path)

    eval_pair = pairs[0] if config.eval_every else None
    try:
        trainer.fit(pairs, log_path=log_path, checkpoint_dir=ckdir, eval_pair=eval_pair, progress=_progress(config))
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"trained {config.variant} to step {trainer.step}; checkpoint {ckdir / 'final.ckpt'}")
    return EXIT_OK


def _progress(config):
    every = max(1, config.steps // 10)

    def report(rec):
        if rec["step"] % every == 0:
            terms = " ".join(f"{k}={v:.4g}" for k, v in rec.items() if k != "step" and v is not None)
            log.info("step %d %s", rec["step"], terms)

    return report


def cmd_infer(args):
    ckpt = _load_checkpoint(args.checkpoint)
    if not Path(args.input).is_file():
        raise DataError(f"input image not found: {args.input}")
    image = raindrop.read_image(args.input)
    try:
        output, maps = infer(image, ckpt)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = [out]
    # stage everything, then move into place: a failure leaves no partial outputs
    with tempfile.TemporaryDirectory(dir=out.parent) as tmp:
        tmp = Path(tmp)
        raindrop.write_image(tmp / "out.png", output)
        staged = [(tmp / "out.png", out)]
        if args.steps_out:
            steps_dir = Path(args.steps_out)
            for t, a in enumerate(maps, start=1):
                name = f"attention_t{t}.png"
                raindrop.write_gray(tmp / name, a)
                staged.append((tmp / name, steps_dir / name))
                written.append(steps_dir / name)
        manifest = RunManifest("infer", _arguments(args), ckpt.config.to_dict(), ckpt.config.seed, None, [str(p) for p in written])
        manifest.write(tmp / "manifest.json")
        staged.append((tmp / "manifest.json", out.with_name(out.name + ".run.json")))
        for src, dst in staged:
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
    print(f"wrote {out}" + (f" and {len(maps)} attention maps to {args.steps_out}" if args.steps_out and maps else ""))
    return EXIT_OK


def _emit(table_or_report, out, name, as_json):
    if isinstance(table_or_report, metrics.AblationTable):
        text, csv_text, js = table_or_report.to_text(), table_or_report.to_csv(), table_or_report.to_json()
    else:
        rep = table_or_report
        js = json.dumps(rep.to_dict(), indent=2)
        lines = ["id,psnr,ssim"] + [f"{i},{p!r},{s!r}" for i, p, s in zip(rep.ids, rep.psnr, rep.ssim)]
        csv_text = "\n".join(lines) + "\n"
        text = f"{rep.variant}: PSNR {rep.mean_psnr:.2f} dB, SSIM {rep.mean_ssim:.4f} over {len(rep.psnr)} images\n"
        if rep.attention_iou:
            text += "attention IoU per step: " + " ".join(f"{v:.3f}" for v in rep.attention_iou) + "\n"
    if out is not None:
        (out / f"{name}.csv").write_text(csv_text)
        (out / f"{name}.txt").write_text(text)
        (out / f"{name}.json").write_text(js + "\n")
    sys.stdout.write(js + "\n" if as_json else text)


def cmd_eval(args):
    pairs = _load_pairs(args.data, args.split)
    out = _prepare_out(args.out, args.force) if args.out else None
    if args.sanity:
        report = metrics.evaluate_outputs(args.variant or "AA+AD", [p.clean for p in pairs], [p.clean for p in pairs], ids=[p.id for p in pairs])
        config = {}
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --sanity)")
        ckpt = _load_checkpoint(args.checkpoint)
        config = ckpt.config.to_dict()
        if args.variant and ckpt.config.variant != args.variant:
            raise DataError(f"checkpoint {args.checkpoint} was trained as {ckpt.config.variant!r}, not {args.variant!r}")
        try:
            report = evaluate_checkpoint(ckpt, pairs)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if out is not None:
        RunManifest("eval", _arguments(args), config, None, str(args.data), [str(out)]).write(out / MANIFEST_NAME)
    _emit(report, out, "report", args.json)
    return EXIT_OK


def cmd_ablate(args):
    pairs = _load_pairs(args.data, args.split)
    ckpts = [(p, _load_checkpoint(p)) for p in args.checkpoint]
    seen = {}
    for path, ck in ckpts:
        if ck.config.variant in seen:
            raise DataError(f"two checkpoints for {ck.config.variant}: {seen[ck.config.variant]} and {path}")
        seen[ck.config.variant] = path
    out = _prepare_out(args.out, args.force) if args.out else None
    if out is not None:
        RunManifest("ablate", _arguments(args), {}, None, str(args.data), [str(out)]).write(out / MANIFEST_NAME)
    reports = {}
    for path, ck in ckpts:
        try:
            reports[ck.config.variant] = evaluate_checkpoint(ck, pairs)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
    h, w = pairs[0].clean.shape[:2]
    header = {"data": str(args.data), "split": args.split, "pairs": len(pairs), "resolution": f"{h}x{w}"}
    _emit(metrics.ablation_report(reports, header), out, "ablation", args.json)
    return EXIT_OK


def cmd_replay(args):
    if not Path(args.manifest).is_file():
        raise DataError(f"manifest not found: {args.manifest}")
    manifest = RunManifest.read(args.manifest)
    recorded = dict(manifest.arguments)
    recorded.pop("resolved", None)
    commands = build_parser().commands
    if manifest.command not in commands:
        raise DataError(f"unknown command {manifest.command!r} in {args.manifest}")
    ns = argparse.Namespace(func=commands[manifest.command].get_default("func"))
    for k, v in recorded.items():
        setattr(ns, k, tuple(v) if isinstance(v, list) else v)
    if manifest.command == "train" and "resolved" in manifest.arguments and not ns.resume:
        # replay from the resolved config so the original config file and env are not needed
        for k, v in manifest.arguments["resolved"].items():
            setattr(ns, k, tuple(v) if isinstance(v, list) else v)
    if args.out is not None:
        ns.out = args.out
    ns.force = args.force
    ns.config_file = None
    return ns.func(ns)


# --- parser -------------------------------------------------------------------------


def _add_config_flags(p):
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, tuple):
            p.add_argument(flag, dest=f.name, type=lambda s, f=f: _parse_value(f, s), default=None, metavar="V,V,...")
        elif isinstance(default, bool):
            p.add_argument(flag, dest=f.name, type=lambda s, f=f: _parse_value(f, s), default=None, metavar="BOOL")
        else:
            p.add_argument(flag, dest=f.name, type=type(default), default=None)


def build_parser():
    parser = _Parser(prog="derain", description="Raindrop removal: data synthesis, training, inference and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic raindrop dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--drops-min", type=int, default=3)
    p.add_argument("--drops-max", type=int, default=6)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a variant on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--config", dest="config_file", default=None, help="key = value file of training fields")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps-out", default=None, help="directory for per-step attention maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score one checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--variant", default=None, choices=metrics.VARIANTS)
    p.add_argument("--sanity", action="store_true", help="score ground truth against itself")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="four-variant comparison table")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat once per variant")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a command from its run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="redirect outputs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_replay)
    parser.commands = sub.choices
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, raindrop.ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
