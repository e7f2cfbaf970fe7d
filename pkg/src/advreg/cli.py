"""``advreg`` command line: generate, train, eval, probe, sweep, ensemble.

Every command writes its artifact plus ``<artifact>.manifest.json`` recording
the command line, resolved configuration, seeds, artifact paths and sha256
hashes. The manifest is written on failure too, with the cause.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .evaluation import (
    Experiment,
    ProbeConfig,
    ensembles,
    evaluate,
    lambda_sweep,
    qonly_probe,
    softmax,
    write_sweep_csv,
)
from .harness import TrainConfig, TrainingError, train
from .models import ModelBundle, ModelDims, load_checkpoint, predict, save_checkpoint
from .objective import RegularizerConfig
from .synthcp import WorldSpec, default_cp_spec, generate_split, load_dataset, save_dataset

REQUIRED_CONFIG_KEYS = ("lambda_q", "lambda_h", "epochs", "seed")
OPTIONAL_CONFIG_KEYS = {
    "learning_rate": 0.001,
    "batch_size": 150,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "lr_decay_per_epoch": 1.0,
    "spec_hash": None,
    "vocab_size": None,
    "num_answers": None,
}


class CliError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Manifest:
    def __init__(self, command: str, argv: list[str], primary: Path):
        self.path = primary.with_name(primary.name + ".manifest.json")
        self.doc = {
            "command": command,
            "argv": argv,
            "config_path": None,
            "config": {},
            "seed": None,
            "artifacts": {},
            "tool_version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "status": "running",
        }

    def artifact(self, role: str, path):
        self.doc["artifacts"][role] = {"path": str(path), "sha256": sha256_file(path)}

    def finish(self, error: BaseException | None = None):
        self.doc["status"] = "ok" if error is None else "failed"
        if error is not None:
            self.doc["error"] = f"{type(error).__name__}: {error}"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _write_json(self.path, self.doc)


def load_train_config(path) -> tuple[TrainConfig, dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config must be a JSON object")
    for key in REQUIRED_CONFIG_KEYS:
        if key not in raw:
            raise CliError(f"{path}: missing config key {key!r}")
    unknown = set(raw) - set(REQUIRED_CONFIG_KEYS) - set(OPTIONAL_CONFIG_KEYS)
    if unknown:
        raise CliError(f"{path}: unknown config key {sorted(unknown)[0]!r}")
    resolved = {**OPTIONAL_CONFIG_KEYS, **raw}
    config = TrainConfig(
        regularizer=RegularizerConfig(float(resolved["lambda_q"]), float(resolved["lambda_h"])),
        learning_rate=float(resolved["learning_rate"]),
        batch_size=int(resolved["batch_size"]),
        epochs=int(resolved["epochs"]),
        beta1=float(resolved["beta1"]),
        beta2=float(resolved["beta2"]),
        eps=float(resolved["eps"]),
        lr_decay_per_epoch=float(resolved["lr_decay_per_epoch"]),
        seed=int(resolved["seed"]),
    )
    return config, resolved


def _resolve_spec(args) -> WorldSpec | None:
    if getattr(args, "spec", None):
        return WorldSpec.load(args.spec)
    if getattr(args, "default", False):
        return default_cp_spec(args.world_seed)
    return None


def _check_compatible(bundle: ModelBundle, header: dict, path):
    dims = bundle.dims
    for key, have in (
        ("vocab_size", dims.vocab_size),
        ("num_answers", dims.num_answers),
        ("feature_dim", dims.feature_dim),
    ):
        if header.get(key) != have:
            raise CliError(f"{path}: dataset {key}={header.get(key)} but checkpoint expects {have}")


# ---------------------------------------------------------------- commands


def cmd_generate(args, manifest: Manifest):
    if args.n < 1:
        raise CliError("--n must be at least 1")
    spec = _resolve_spec(args)
    if spec is None:
        raise CliError("one of --spec or --default is required")
    manifest.doc.update(
        seed=args.seed,
        config_path=args.spec,
        config={"split": args.split, "n": args.n, "world_seed": args.world_seed, "spec_hash": spec.digest()},
    )
    ds = generate_split(spec, args.split, args.n, args.seed)
    save_dataset(ds, args.out, spec)
    manifest.artifact("dataset", args.out)
    if args.spec_out:
        spec.save(args.spec_out)
        manifest.artifact("spec", args.spec_out)
    print(f"wrote {args.n} {args.split} records to {args.out} (spec {spec.digest()[:12]})")


def cmd_train(args, manifest: Manifest):
    config, resolved = load_train_config(args.config)
    manifest.doc.update(config_path=args.config, config=resolved, seed=config.seed)
    ds, header = load_dataset(args.train_data)
    if resolved["spec_hash"] is not None and resolved["spec_hash"] != header["spec_hash"]:
        raise CliError(
            f"dataset spec hash {header['spec_hash'][:12]} does not match config spec_hash "
            f"{str(resolved['spec_hash'])[:12]}; refusing to train"
        )
    for key in ("vocab_size", "num_answers"):
        if resolved[key] is not None and resolved[key] != header[key]:
            raise CliError(f"config {key}={resolved[key]} but dataset has {header[key]}; refusing to train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = ModelDims(header["vocab_size"], header["num_answers"], header["feature_dim"])
    bundle = ModelBundle.init(dims, config.seed)
    bundle, trace = train(bundle, ds, config)
    ckpt = out / "checkpoint.json"
    save_checkpoint(bundle, ckpt, {"spec_hash": header["spec_hash"], "config": config.to_dict()})
    trace.write_csv(out / "trace.csv")
    manifest.artifact("checkpoint", ckpt)
    manifest.artifact("trace", out / "trace.csv")
    last = trace.rows[-1] if trace.rows else {}
    print(f"trained {config.epochs} epochs; final train accuracy {last.get('train_accuracy', float('nan')):.4f}")


def cmd_eval(args, manifest: Manifest):
    bundle, _ = load_checkpoint(args.checkpoint)
    ds, header = load_dataset(args.data)
    _check_compatible(bundle, header, args.data)
    spec = _resolve_spec(args)
    if spec is not None and spec.digest() != header["spec_hash"]:
        raise CliError("world spec does not match the dataset's spec hash")
    manifest.doc["config"] = {"checkpoint": args.checkpoint, "data": args.data}
    report = evaluate(bundle, ds, spec)
    _write_json(args.out, report.to_dict())
    manifest.artifact("report", args.out)
    print(f"accuracy {report.overall_accuracy:.4f} on {len(ds)} {header['split']} records")


def cmd_probe(args, manifest: Manifest):
    bundle, _ = load_checkpoint(args.checkpoint)
    train_ds, th = load_dataset(args.train_data)
    _check_compatible(bundle, th, args.train_data)
    evals = {}
    for path in args.data:
        ds, h = load_dataset(path)
        _check_compatible(bundle, h, path)
        evals[Path(path).stem] = ds
    probe = ProbeConfig(epochs=args.epochs, seed=args.seed)
    manifest.doc.update(seed=args.seed, config={"epochs": args.epochs, "hidden": probe.hidden})
    acc = qonly_probe(bundle, train_ds, evals, probe)
    _write_json(args.out, {"probe_accuracy": acc, "probe": probe.__dict__})
    manifest.artifact("report", args.out)
    print(" ".join(f"{k}={v:.4f}" for k, v in acc.items()))


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args, manifest: Manifest):
    spec = _resolve_spec(args) or default_cp_spec(args.world_seed)
    base = TrainConfig(epochs=args.epochs)
    if args.config:
        base, resolved = load_train_config(args.config)
        manifest.doc.update(config_path=args.config)
    grid = [(lq, lh) for lq in args.lambda_q for lh in args.lambda_h]
    if not grid:
        raise CliError("empty lambda grid")
    manifest.doc.update(
        seed=args.seeds,
        config={
            "train": base.to_dict(),
            "grid": grid,
            "n_train": args.n_train,
            "n_test": args.n_test,
            "spec_hash": spec.digest(),
        },
    )
    exp = Experiment(spec, args.n_train, args.n_test, base)
    rows = lambda_sweep(exp, grid, args.seeds, probe=not args.no_probe, jobs=args.jobs)
    write_sweep_csv(rows, args.out)
    manifest.artifact("sweep", args.out)
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} rows ({failed} failed) written to {args.out}")


def cmd_ensemble(args, manifest: Manifest):
    if len(args.checkpoints) != 2:
        raise CliError("--checkpoints takes exactly two paths")
    ds, header = load_dataset(args.data)
    dists, accs = [], []
    for path in args.checkpoints:
        bundle, _ = load_checkpoint(path)
        _check_compatible(bundle, header, args.data)
        _, logits, _ = predict(bundle, ds.tokens, ds.features)
        dists.append(softmax(logits))
        accs.append(float((np.argmax(logits, axis=1) == ds.answers).mean()))
    oracle, mean_acc = ensembles(dists[0], dists[1], ds.answers)
    manifest.doc["config"] = {"checkpoints": args.checkpoints, "data": args.data}
    _write_json(
        args.out,
        {"member_accuracy": accs, "oracle_accuracy": oracle, "mean_ensemble_accuracy": mean_acc},
    )
    manifest.artifact("report", args.out)
    print(f"members {accs[0]:.4f} {accs[1]:.4f}  oracle {oracle:.4f}  mean-ensemble {mean_acc:.4f}")


# ---------------------------------------------------------------- parser


def _add_world(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--spec", help="world spec JSON file")
    g.add_argument("--default", action="store_true", help="use the built-in changing-priors world")
    p.add_argument("--world-seed", type=int, default=0, help="seed for --default prototypes/priors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a benchmark split")
    _add_world(p)
    p.add_argument("--split", choices=["train", "test"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec-out", help="also write the resolved world spec here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a bundle from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train, primary=lambda a: Path(a.out) / "checkpoint.json")

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    _add_world(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="question-only probe on frozen encodings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--data", nargs="+", required=True, help="evaluation datasets")
    p.add_argument("--epochs", type=int, default=ProbeConfig.epochs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="train+evaluate over a lambda grid")
    _add_world(p)
    p.add_argument("--config", help="base training config (lambdas are overridden)")
    p.add_argument("--lambda-q", type=_floats, required=True)
    p.add_argument("--lambda-h", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=5000)
    p.add_argument("--epochs", type=int, default=60, help="used when --config is absent")
    p.add_argument("--no-probe", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ensemble", help="oracle and mean ensembles of two checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    primary = args.primary(args) if hasattr(args, "primary") else Path(args.out)
    manifest = Manifest(args.command, argv, primary)
    if args.command == "generate" and args.n < 1:
        manifest.finish(CliError("--n must be at least 1"))
        parser.error("--n must be at least 1")
    try:
        args.func(args, manifest)
    except (CliError, ad.ConfigError, ad.ShapeError, ad.ContractError, TrainingError,
            ValueError, IndexError, OSError, KeyError) as exc:  # fmt: skip
        manifest.finish(exc)
        print(f"advreg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    manifest.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
