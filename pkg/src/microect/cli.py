"""Command-line entry point: ``microect <subcommand> ...``.

Every subcommand is reproducible from its flags and ``--seed``.  Exit codes:
0 success, 2 usage error (bad flags, missing paths), 3 runtime or numeric
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    from .phantoms import default_workers
    return default_workers()


def _require_dir(path: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file() or not (p / "samples.bin").is_file():
        raise UsageError(f"{path} is not a dataset directory")
    return p


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _select(dataset, which: str, seed: int):
    from .phantoms import split
    if which == "all":
        return dataset
    train, val, test = split(dataset, seed=seed)
    return {"train": train, "val": val, "test": test}[which]


def cmd_gen_data(args) -> int:
    from .forward import PhysicalPermittivity
    from .geometry import DomainSpec
    from .phantoms import NoiseModel, PhantomSpec, build_dataset, write_dataset

    if args.count <= 0:
        raise UsageError("--count must be positive")
    try:
        overrides = {}
        if args.depth_range:
            overrides["center_depth_um"] = tuple(args.depth_range)
        if args.radius_range:
            overrides["radius_um"] = tuple(args.radius_range)
        if args.thickness_range:
            overrides["thickness_um"] = tuple(args.thickness_range)
        if args.roughness_range:
            overrides["roughness_um"] = tuple(args.roughness_range)
        phantom = PhantomSpec(kind=args.kind, **overrides)
        domain = DomainSpec(elements_per_um=args.elements_per_um)
        phys = PhysicalPermittivity(args.eps_background, args.eps_inclusion)
        noise = NoiseModel(args.noise_std)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = build_dataset(args.count, phantom, domain, phys, noise, seed=args.seed,
                       workers=_threads(args))
    write_dataset(ds, args.out)
    m = ds.manifest
    print(f"wrote {m['count']} samples ({m['m']}x{m['n']} -> {m['img_h']}x{m['img_w']}) "
          f"kind={args.kind} seed={args.seed} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .network import TrainConfig, save_model, train, write_history
    from .phantoms import read_dataset, split

    data = _require_dir(args.data)
    terms = tuple(t.strip() for t in args.loss.split(",") if t.strip())
    try:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                          noise_std=args.noise_std, seed=args.seed, terms=terms)
        from .losses import TERMS
        if not terms or set(terms) - set(TERMS):
            raise ValueError(f"--loss must be a comma list drawn from {','.join(TERMS)}")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = read_dataset(data)
    tr, va, _ = split(dataset, seed=args.split_seed)
    model = train(tr, va, train_config=cfg,
                  progress=lambda r: print(json.dumps(r), flush=True) if args.verbose else None)
    save_model(model, args.out)
    history = args.history or str(args.out) + ".history.jsonl"
    write_history(model.history, history)
    print(f"saved model to {args.out}; best val CC {model.metadata['best_val_cc']:.4f} "
          f"at epoch {model.metadata['best_epoch']}")
    return EXIT_OK


def _predictor(args):
    """(name, callable) for --model or --baseline."""
    if args.model:
        from .network import load_model, predict
        model = load_model(_require_file(args.model))
        return Path(args.model).name, lambda c: predict(model, c)
    from .linear_inverse import BASELINES, read_sensitivity, sensitivity_matrix, write_sensitivity
    if args.baseline not in BASELINES:
        raise UsageError(f"unknown baseline {args.baseline!r}; choose from {sorted(BASELINES)}")
    cache = Path(args.sensitivity) if args.sensitivity else None
    if cache is not None and cache.is_file():
        J = read_sensitivity(cache)
    else:
        J = sensitivity_matrix()
        if cache is not None:
            write_sensitivity(J, cache)
    fn = BASELINES[args.baseline]
    return args.baseline, lambda c: fn(c, J)


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .phantoms import read_dataset

    data = _require_dir(args.data)
    name, fn = _predictor(args)
    subset = _select(read_dataset(data), args.split, args.split_seed)
    report = evaluate(fn, subset, name)
    report.write(args.out)
    means = report.means
    print(f"{name}: n={report.count} " + " ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .pgm import write_pgm
    from .phantoms import read_dataset

    data = _require_dir(args.data)
    name, fn = _predictor(args)
    subset = _select(read_dataset(data), args.split, args.split_seed)
    if not 0 <= args.index < len(subset):
        raise UsageError(f"--index must be in [0, {len(subset)})")
    c, _ = subset[args.index]
    image = fn(c)
    write_pgm(args.out, image)
    if args.npy:
        np.save(args.npy, image)
    print(f"{name}: wrote reconstruction of sample {args.index} to {args.out}")
    return EXIT_OK


def cmd_stitch(args) -> int:
    from .metrics import stitch
    from .pgm import read_pgm, write_pgm

    windows = [read_pgm(_require_file(p)) for p in args.inputs]
    try:
        if args.overlap == 0:
            wide = stitch(windows, 0)
        else:
            wide = stitch([w / 255.0 for w in windows], args.overlap)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_pgm(args.out, wide)
    print(f"stitched {len(windows)} windows into {wide.shape[0]}x{wide.shape[1]} -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_suite

    results = run_suite(args.seed)
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} (threshold {THRESHOLD:g})")
    return EXIT_OK if worst < THRESHOLD else EXIT_RUNTIME


def cmd_export_image(args) -> int:
    from .pgm import write_pgm
    from .phantoms import read_dataset

    if args.npy:
        image = np.load(_require_file(args.npy))
    else:
        if not args.data:
            raise UsageError("give --data DIR --index K or --npy FILE")
        ds = read_dataset(_require_dir(args.data))
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index must be in [0, {len(ds)})")
        image = ds.images[args.index]
    write_pgm(args.out, image)
    print(f"wrote {image.shape[0]}x{image.shape[1]} PGM to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microect",
        description="Planar microscale capacitance tomography: simulate, train, reconstruct, evaluate. "
                    "Every command is reproducible from its flags and --seed.")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for parallel stages (default: $ECT_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a synthetic dataset")
    p.add_argument("--kind", choices=["microsphere", "biofilm"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--radius-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--thickness-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--roughness-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--elements-per-um", type=int, default=1)
    p.add_argument("--eps-background", type=float, default=2.0)
    p.add_argument("--eps-inclusion", type=float, default=2.6)
    p.add_argument("--noise-std", type=float, default=0.03)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the reconstruction network (80/10/10 split)")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--noise-std", type=float, default=0.03)
    p.add_argument("--loss", default="smoothl1,focal,dice",
                   help="comma-separated subset of smoothl1,focal,dice")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="per-epoch history file (default: OUT.history.jsonl)")
    p.set_defaults(func=cmd_train)

    def predictor_args(p):
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--model")
        g.add_argument("--baseline", help="tikhonov, landweber or lbp")
        p.add_argument("--sensitivity", help="sensitivity-matrix cache file (read if present, else written)")
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
        p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("eval", help="metrics report for a model or baseline")
    predictor_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="reconstruct one sample to PGM")
    predictor_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--npy", help="also save the float image as .npy")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("stitch", help="concatenate PGM windows left to right")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and a small network")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-image", help="export a stored image to PGM")
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--npy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_image)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"microect {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"microect {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
