"""splashlab command line: train, compare, attack, fit-fn.

Exit codes: 0 success, 1 runtime or IO failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import tempfile
from pathlib import Path

from . import __version__
from .activations import ActivationKind, frozen_kind_from_snapshots, load_shape_file
from .approx import error_table, fit_splash
from .attacks import (FGSM_EPSILONS, AttackConfig, AttackError, dump_adversarial, paired_margin, run_campaign,
                      verify_successes, write_reports)
from .data import resolve_dataset, synthetic_grounded_functions
from .nn import (MODEL_NAMES, TrainConfig, TrainingLog, build_model, load_checkpoint, save_checkpoint, train,
                 write_log_csv)

ALIASES = {"splash-positive": "positive", "splash-negative": "negative", "fixed-splash": "frozen"}
ACTIVATIONS = ActivationKind.NAMES + tuple(ALIASES)
SPLASH_S = (3, 5, 7, 9, 11)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers shared with library callers
# ---------------------------------------------------------------------------
def resolve_activation(name: str, S: int = 7, independent: bool = False, constraint: str | None = None,
                       shape_file=None, snapshots: dict | None = None) -> ActivationKind:
    """Turn CLI activation flags into an :class:`ActivationKind`.

    ``splash-positive``/``splash-negative``/``fixed-splash`` are shorthands
    for SPLASH with the matching constraint. Frozen SPLASH takes its slopes
    from ``snapshots`` or from the shape file.
    """
    if name not in ACTIVATIONS:
        raise UsageError(f"unknown activation {name!r}; expected one of {', '.join(ACTIVATIONS)}")
    if name in ALIASES:
        if constraint not in (None, "none", ALIASES[name]):
            raise UsageError(f"{name} conflicts with --constraint {constraint}")
        name, constraint = "splash", ALIASES[name]
    constraint = constraint or "none"
    if name != "splash":
        if constraint != "none":
            raise UsageError("--constraint only applies to splash activations")
        return ActivationKind(name)
    if S not in SPLASH_S:
        raise UsageError(f"--splash-s must be one of {SPLASH_S}")
    if constraint == "frozen":
        if snapshots is None:
            if not shape_file:
                raise UsageError("--constraint frozen needs --shape-file")
            snapshots = load_shape_file(shape_file)
        return frozen_kind_from_snapshots(snapshots)
    return ActivationKind("splash", S=S, sharing="neuron" if independent else "layer", constraint=constraint)


def merge_logs(logs: dict[str, TrainingLog]) -> list[dict]:
    """One row per epoch with ``<activation>_train_loss`` / ``_test_error`` columns."""
    epochs = {name: [r.epoch for r in log.records] for name, log in logs.items()}
    reference = next(iter(epochs.values()), [])
    for name, e in epochs.items():
        if e != reference:
            raise ValueError(f"run {name!r} has epochs {e}, expected {reference}")
    rows = []
    for i, epoch in enumerate(reference):
        row = {"epoch": epoch}
        for name, log in logs.items():
            rec = log.records[i]
            row[f"{name}_train_loss"] = f"{rec.train_loss:.17g}"
            row[f"{name}_test_error"] = "" if rec.test_error is None else f"{rec.test_error:.17g}"
        rows.append(row)
    return rows


def compare_activations(names: list[str], model_name: str, train_set, test_set, config: TrainConfig,
                        S: int = 7, independent: bool = False, shape_file=None,
                        progress=None) -> dict[str, TrainingLog]:
    """Train one model per activation from the same seed.

    ``fixed-splash`` freezes the final shape of the ``splash`` run (trained
    here if not requested) unless a shape file is given.
    """
    logs: dict[str, TrainingLog] = {}
    order = list(names)
    needs_splash = "fixed-splash" in order and not shape_file
    if needs_splash:
        order.remove("fixed-splash")
        if "splash" not in order:
            order.insert(0, "splash")
        order.append("fixed-splash")
    snapshots = None
    for name in order:
        kind = resolve_activation(name, S, independent, shape_file=shape_file if name == "fixed-splash" else None,
                                  snapshots=snapshots if name == "fixed-splash" else None)
        model = build_model(model_name, kind, train_set.image_shape, train_set.num_classes, seed=config.seed)
        log = train(model, train_set, config, test_set, snapshot_shapes=name == "splash",
                    progress=(lambda r, n=name: progress(n, r)) if progress else None)
        if name == "splash":
            snapshots = {}
            for rec in log.snapshots:
                snapshots[rec["layer"]] = rec
        logs[name] = log
    return {name: logs[name] for name in names}


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, config: dict, artifacts: list[str]) -> None:
    _write_json(out_dir / "manifest.json", {"command": command, "version": __version__, "config": config,
                                           "artifacts": sorted(artifacts)})


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _report(msg: str, quiet: bool) -> None:
    if not quiet:
        print(msg, file=sys.stderr)


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                           weight_decay=args.weight_decay, lr_decay=args.lr_decay, seed=args.seed,
                           augmentation=args.augmentation)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _datasets(args):
    train_set = resolve_dataset(args.dataset, "train", args.n_train, seed=args.data_seed)
    test_set = resolve_dataset(args.dataset, "test", args.n_test, seed=args.data_seed)
    return train_set, test_set


def _check_model(name: str) -> None:
    if name not in MODEL_NAMES:
        raise UsageError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_train(args) -> int:
    _check_model(args.model)
    kind = resolve_activation(args.activation, args.splash_s, args.independent_units, args.constraint,
                              args.shape_file)
    config = _train_config(args)
    out = Path(args.out_dir)
    train_set, test_set = _datasets(args)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(args.model, kind, train_set.image_shape, train_set.num_classes, seed=args.seed)
    log = train(model, train_set, config, test_set, snapshot_shapes=args.snapshot_shapes,
                progress=lambda r: _report(f"epoch {r.epoch}: loss {r.train_loss:.4f} "
                                           f"test error {r.test_error:.4f}", args.quiet))
    resolved = _resolved(args)
    save_checkpoint(model, out / "model.ckpt", extra=resolved)
    write_log_csv(log, out / "log.csv", wall_time=args.record_wall_time)
    artifacts = ["model.ckpt", "log.csv"]
    if args.snapshot_shapes:
        _write_json(out / "shapes.json", log.snapshots)
        artifacts.append("shapes.json")
    _write_manifest(out, "train", resolved, artifacts)
    return 0


def cmd_compare(args) -> int:
    names = list(dict.fromkeys(args.activations))
    for name in names:
        if name not in ACTIVATIONS:
            raise UsageError(f"unknown activation {name!r}")
    if len(names) == 1:
        args.activation = names[0]
        return cmd_train(args)
    _check_model(args.model)
    config = _train_config(args)
    out = Path(args.out_dir)
    train_set, test_set = _datasets(args)
    out.mkdir(parents=True, exist_ok=True)
    logs = compare_activations(names, args.model, train_set, test_set, config, args.splash_s,
                               args.independent_units, args.shape_file,
                               progress=lambda n, r: _report(f"{n} epoch {r.epoch}: loss {r.train_loss:.4f}",
                                                             args.quiet))
    rows = merge_logs(logs)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_manifest(out, "compare", _resolved(args), ["compare.csv"])
    return 0


def cmd_attack(args) -> int:
    if args.epsilon is not None and args.method != "fgsm":
        raise UsageError("--epsilon only applies to --method fgsm")
    if args.pixels is not None and args.method != "one_pixel":
        raise UsageError("--pixels only applies to --method one_pixel")
    if args.method == "fgsm":
        sweep = [dict(epsilon=e) for e in (args.epsilon or FGSM_EPSILONS)]
    elif args.method == "one_pixel":
        sweep = [dict(pixels=k) for k in (args.pixels or [1])]
    else:
        sweep = [{}]
    try:
        configs = [AttackConfig(method=args.method, de_iters=args.de_iters, pop=args.pop, de_classic=args.de_classic,
                                random_start=not args.no_random_start, boundary_steps=args.boundary_steps,
                                cw_bsearch=args.cw_bsearch, cw_steps=args.cw_steps, seed=args.seed,
                                repeats=args.repeats, **s) for s in sweep]
    except AttackError as exc:
        raise UsageError(str(exc)) from exc
    model, header = load_checkpoint(args.checkpoint)
    models = {Path(args.checkpoint).stem if args.name is None else args.name: model}
    if args.paired_with:
        other, _ = load_checkpoint(args.paired_with)
        models[Path(args.paired_with).stem + "-paired"] = other
    samples = resolve_dataset(args.dataset, args.split, args.n, seed=args.data_seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = run_campaign(models, samples, configs,
                           progress=lambda r: _report(f"{r.method} {r.config.strength}: {r.counts}", args.quiet))
    extra = {"config": _resolved(args), "checkpoint_header": {k: header[k] for k in ("architecture", "activation")}}
    if args.paired_with:
        n_cfg = len(configs)
        extra["paired_margins"] = [
            {"method": a.method, "strength": a.config.strength, "repeat": i,
             "margins": list(paired_margin(ra, rb))}
            for a, b in zip(reports[:n_cfg], reports[n_cfg:]) for i, (ra, rb) in enumerate(zip(a.repeats, b.repeats))]
    write_reports(reports, out / "report.json", out / "report.csv", extra)
    artifacts = ["report.json", "report.csv"]
    failed = 0
    nets = list(models.values())
    for i, rep in enumerate(reports):
        # successes are re-checked after an exact IDX round trip
        with tempfile.TemporaryDirectory() as tmp:
            verified, claimed = verify_successes(nets[i // len(configs)], rep, tmp)
        failed += claimed - verified
        if args.dump_adversarial:
            for r in range(len(rep.repeats)):
                stem = f"adv-{i}-{r}"
                dump_adversarial(rep, r, out / f"{stem}-images.idx", out / f"{stem}-labels.idx")
                artifacts += [f"{stem}-images.idx", f"{stem}-labels.idx"]
    _write_manifest(out, "attack", _resolved(args), artifacts)
    if failed:
        print(f"splashlab: {failed} reported successes did not re-verify", file=sys.stderr)
        return 1
    return 0


def cmd_fit_fn(args) -> int:
    targets = synthetic_grounded_functions()
    if args.target not in targets:
        raise UsageError(f"unknown target {args.target!r}; expected one of {', '.join(targets)}")
    if args.b <= 0 or args.eps <= 0:
        raise UsageError("--b and --eps must be positive")
    f = targets[args.target]
    result = fit_splash(f, args.b, args.eps, grid_n=args.grid_n)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(args)
    _write_json(out / "fit.json", {"target": args.target, "config": resolved, **result.to_dict()})
    table = error_table(f, result, args.csv_points)
    with open(out / "fit_error.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "f", "splash", "error"])
        w.writerows([[f"{v:.17g}" for v in row] for row in table])
    _write_manifest(out, "fit-fn", resolved, ["fit.json", "fit_error.csv"])
    _report(f"S={result.S} delta={result.delta:.6g} sup_error={result.sup_error:.3g}", args.quiet)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="mlp", help=f"one of {', '.join(MODEL_NAMES)}")
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic', a directory with MNIST IDX or CIFAR-10 binary files, "
                        "or a name under $SPLASHLAB_DATA_DIR")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--lr-decay", type=float, default=1e-6)
    p.add_argument("--augmentation", default="none", choices=["none", "flip+translate"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splash-s", type=int, default=7, choices=SPLASH_S)
    p.add_argument("--independent-units", action="store_true", help="one slope vector per neuron")
    p.add_argument("--shape-file", default=None, help="shapes.json used to freeze SPLASH slopes")
    p.add_argument("--record-wall-time", action="store_true", help="fill the wall_seconds log column")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="splashlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"splashlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON file of flag values; explicit flags win")
    common.add_argument("--out-dir", default="out")
    common.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train a model")
    _training_flags(p)
    p.add_argument("--activation", default="splash", help=f"one of {', '.join(ACTIVATIONS)}")
    p.add_argument("--constraint", default=None, choices=["positive", "negative", "frozen"])
    p.add_argument("--snapshot-shapes", action="store_true", help="write SPLASH shapes after every epoch")
    p.set_defaults(func=cmd_train)
    train_p = p

    p = sub.add_parser("compare", parents=[common], help="train one model per activation and merge the logs")
    _training_flags(p)
    p.add_argument("--activations", nargs="+", default=["splash", "splash-positive", "splash-negative",
                                                        "fixed-splash", "relu"])
    p.set_defaults(func=cmd_compare, constraint=None, snapshot_shapes=False)
    compare_p = p

    p = sub.add_parser("attack", parents=[common], help="attack a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--name", default=None, help="model name in the report (default: checkpoint stem)")
    p.add_argument("--method", default="fgsm", choices=["one_pixel", "boundary", "fgsm", "cw_l2"])
    p.add_argument("--epsilon", type=float, nargs="+", default=None,
                   help="fgsm strengths (default 0.02 0.04 0.06)")
    p.add_argument("--no-random-start", action="store_true", help="plain fgsm without the random start")
    p.add_argument("--pixels", type=int, nargs="+", default=None, help="pixels changed by one_pixel (default 1)")
    p.add_argument("--de-iters", type=int, default=40)
    p.add_argument("--pop", type=int, default=400)
    p.add_argument("--de-classic", action="store_true", help="use the difference mutation x1 + F(x2 - x3)")
    p.add_argument("--boundary-steps", type=int, default=6000)
    p.add_argument("--cw-bsearch", type=int, default=7)
    p.add_argument("--cw-steps", type=int, default=1000)
    p.add_argument("--n", type=int, default=1000, help="number of samples to attack")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--split", default="test")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paired-with", default=None, help="second checkpoint for the paired margin metric")
    p.add_argument("--dump-adversarial", action="store_true", help="write adversarial images as float64 IDX")
    p.set_defaults(func=cmd_attack)
    attack_p = p

    p = sub.add_parser("fit-fn", parents=[common], help="fit a SPLASH to a grounded function")
    p.add_argument("--target", default="tanh", help=f"one of {', '.join(synthetic_grounded_functions())}")
    p.add_argument("--b", type=float, default=2.0, help="half-width of the interval [-b, b]")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--grid-n", type=int, default=2000)
    p.add_argument("--csv-points", type=int, default=1001)
    p.set_defaults(func=cmd_fit_fn)
    fit_p = p

    return parser, {"train": train_p, "compare": compare_p, "attack": attack_p, "fit-fn": fit_p}


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - (set(vars(args)) - {"command", "func", "config"}))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {unknown}")
        subs[args.command].set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except SystemExit as exc:          # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    except UsageError as exc:
        print(f"splashlab: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"splashlab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
