"""Command-line surface.

Subcommands: gen-data, train, eval, grad-check, suite, inspect.  Every
artifact (dataset, checkpoint, log, table) is an explicit file path; there is
no implicit state.  Hyperparameters resolve with precedence
flags > JSON config file > defaults, and every run logs its fully resolved
configuration to stderr.  Exit codes: 0 success, 1 validation or assertion
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datagen, harness, models, training
from .models import Dims

TRAIN_DEFAULTS = {
    "learning_rate": 0.09,
    "minibatch": 10,
    "dropout_p": 0.5,
    "max_epochs": 150,
    "seed": 0,
    "patience": 0,
    "m": 64,
    "hidden": 300,
    "probe": "retrieved",
    "deterministic": True,
}


def _resolve_train_config(args, variant: str) -> training.TrainConfig:
    resolved = dict(TRAIN_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(TRAIN_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown keys in config file: {sorted(unknown)}")
        resolved.update(file_cfg)
    flag_map = {"learning_rate": "lr", "minibatch": "minibatch", "dropout_p": "dropout",
                "max_epochs": "epochs", "seed": "seed", "patience": "patience",
                "m": "m", "hidden": "hidden", "probe": "probe",
                "deterministic": "deterministic"}
    for key, flag in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            resolved[key] = val
    cfg = training.TrainConfig(variant=variant, **resolved)
    cfg.check()
    print(f"resolved config: {json.dumps({'variant': variant, **resolved}, sort_keys=True)}",
          file=sys.stderr)
    return cfg


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.09)")
    p.add_argument("--minibatch", type=int, help="minibatch size (default 10)")
    p.add_argument("--dropout", type=float, help="dropout probability (default 0.5)")
    p.add_argument("--epochs", type=int, help="maximum epochs (default 150)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--patience", type=int, help="early-stopping patience; 0 disables")
    p.add_argument("--m", type=int, help="multimodal dimensionality (default 64)")
    p.add_argument("--hidden", type=int, help="hidden width for ff/rnn (default 300)")
    p.add_argument("--probe", choices=["retrieved", "query"],
                   help="candidate-scoring probe for the library model")
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_const", const=True)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_const", const=False)
    p.set_defaults(deterministic=None)


def _load_splits(data_dir):
    d = Path(data_dir)
    return tuple(datagen.read_split(d / f"{name}.jsonl") for name in ("train", "val", "test"))


def cmd_gen_data(args) -> int:
    if args.image_vectors:
        if not (args.attribute_vectors and args.noun_vectors):
            raise ValueError("--image-vectors needs --attribute-vectors and --noun-vectors too")
        world = datagen.world_from_vector_files(args.image_vectors, args.attribute_vectors,
                                                args.noun_vectors)
    else:
        world = datagen.make_world(v=args.v, t=args.t, t_c=args.tc,
                                   n_categories=args.categories,
                                   entities_per_category=args.entities_per_category,
                                   n_attributes=args.attributes,
                                   noise=args.noise, seed=args.seed)
    splits = datagen.generate_dataset(world, (args.train, args.val, args.test), seed=args.seed)
    for name, dps in zip(("train", "val", "test"), splits):
        for i, dp in enumerate(dps):
            rep = datagen.validate_datapoint(dp)
            if not rep.ok:
                print(f"invalid datapoint {name}[{i}]: {rep.violations}", file=sys.stderr)
                return 1
    meta = datagen.write_dataset_dir(args.out, world, splits, seed=args.seed, debug=args.debug)
    print(f"resolved config: {json.dumps(meta, sort_keys=True)}", file=sys.stderr)
    print(f"wrote {meta['sizes']} to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args, args.model)
    train_dps, val_dps, _ = _load_splits(args.data)
    hook = lambda r: print(f"epoch {r.epoch}: train_loss={r.train_loss:.4f} val_acc={r.val_acc:.2f}",
                           file=sys.stderr)
    try:
        params, log = training.train(args.model, train_dps, val_dps, cfg, log_hook=hook)
    except training.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    models.save_checkpoint(params, args.out, seed_lineage=f"seed={cfg.seed}")
    if args.log:
        log.to_csv(args.log, deterministic=cfg.deterministic)
    print(f"best val_acc {log.best_val_acc:.2f} at epoch {log.best_epoch}; "
          f"final val_acc {log.final_val_acc:.2f}; checkpoint -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, _ = models.load_checkpoint(args.ckpt)
    dps = datagen.read_split(args.data)
    result = harness.evaluate(params, dps)
    report = {
        "accuracy": result.accuracy,
        "n": result.n,
        "correct": result.correct,
        "records": [{"predicted": r.predicted, "gold": r.gold,
                     "category_match": r.category_match} for r in result.records],
    }
    if all(dp.debug is not None for dp in dps):
        report["error_analysis"] = harness.error_analysis(result, dps).summary()
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
    print(f"accuracy {result.accuracy:.2f} over {result.n} datapoints")
    return 0


def cmd_grad_check(args) -> int:
    dims = Dims(v=args.v, t=args.t, t_c=args.tc, m=args.m, hidden=args.hidden,
                n_exposures=args.exposures)
    variants = models.VARIANTS if args.model == "all" else [args.model]
    ok = True
    for variant in variants:
        rep = training.grad_check(variant, trials=args.trials, dims=dims,
                                  tolerance=args.tol, h=args.h, seed=args.seed,
                                  n_candidates=args.candidates)
        ok &= rep.passed
        print(f"{variant}: max_rel_error={rep.max_rel_error:.2e} "
              f"({'PASS' if rep.passed else 'FAIL'} at tol {rep.tolerance:g})")
        for name, err in sorted(rep.per_block.items()):
            print(f"  {name}: {err:.2e}")
    return 0 if ok else 1


def cmd_suite(args) -> int:
    cfg = _resolve_train_config(args, "suite")
    if args.models == "all":
        variants = list(harness.SUITE_VARIANTS)
    else:
        variants = [v.strip() for v in args.models.split(",") if v.strip()]
        for v in variants:
            if v != "random" and v not in models.VARIANTS:
                raise ValueError(f"unknown model variant {v!r}")
    splits = _load_splits(args.data)
    ckpt_dir = args.ckpt_dir or str(Path(args.out).parent / "checkpoints")
    rows = harness.run_suite(variants, splits, cfg, ckpt_dir=ckpt_dir)
    harness.suite_csv(rows, args.out, deterministic=cfg.deterministic)
    for r in rows:
        va = "" if r.val_acc is None else f"{r.val_acc:.2f}"
        ta = "" if r.test_acc is None else f"{r.test_acc:.2f}"
        print(f"{r.model}: val={va} test={ta} epochs={r.epochs_run} [{r.status}]")
    return 0 if all(r.status == "ok" for r in rows) else 1


def cmd_inspect(args) -> int:
    params, _ = models.load_checkpoint(args.ckpt)
    dps = datagen.read_split(args.data)
    if not 0 <= args.index < len(dps):
        raise ValueError(f"index {args.index} out of range for {len(dps)} datapoints")
    dump = harness.inspect_datapoint(params, dps[args.index])
    text = json.dumps(dump, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enttrack",
                                     description="Cross-modal entity tracking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=4000)
    p.add_argument("--val", type=int, default=500)
    p.add_argument("--test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--debug", action="store_true", help="include hidden labels in the files")
    p.add_argument("--v", type=int, default=64, help="image vector dim")
    p.add_argument("--t", type=int, default=32, help="attribute vector dim")
    p.add_argument("--tc", type=int, default=32, help="noun vector dim")
    p.add_argument("--categories", type=int, default=16)
    p.add_argument("--entities-per-category", type=int, default=8)
    p.add_argument("--attributes", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--image-vectors", help="precomputed image vectors (name=category:index)")
    p.add_argument("--attribute-vectors", help="precomputed attribute vectors")
    p.add_argument("--noun-vectors", help="precomputed noun vectors")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--model", required=True, choices=models.VARIANTS)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="write the per-epoch training log CSV here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="a .jsonl split file")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify analytic gradients against finite differences")
    p.add_argument("--model", default="all", choices=("all",) + models.VARIANTS)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--v", type=int, default=4)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--tc", type=int, default=4)
    p.add_argument("--m", type=int, default=8)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--exposures", type=int, default=4)
    p.add_argument("--candidates", type=int, default=3)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("suite", help="train and evaluate a set of variants into one table")
    p.add_argument("--models", default="all", help="'all' or a comma-separated variant list")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--ckpt-dir", help="where to store per-variant checkpoints")
    _add_train_flags(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("inspect", help="dump the forward trace of one datapoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="a .jsonl split file")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
