"""Command-line entry point: ``smtl {synth,train,eval,visualize,ablate,gradcheck}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (BiomarkerLabels, DataError, PhantomConfig, auto_radius_range, generate_dataset,
                   generate_phantom, list_case_ids, load_case, load_dataset, save_dataset, split_dataset)
from .evaluation import (_atomic_write, attention_report, colormap, export_confusion, export_heatmap,
                         export_profiles, export_report)
from .model import (CLASS_TASKS, SUBTYPES, TASKS, ModelConfig, init_model, load_checkpoint, make_batch,
                    predict, save_checkpoint, subtype_from_biomarkers, with_variant)
from .stats import mae, roc_auc
from .training import (VARIANTS, NumericError, TrainConfig, ablation_csv, check_model_gradients, run_ablation,
                       train)

log = logging.getLogger("smtl")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be H,W,D integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_manifest(out: Path, command: str, args: argparse.Namespace, started: float, **extra):
    manifest = {
        "command": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"},
        "tool_version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        **extra,
    }
    _atomic_write(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n").encode())


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    started = time.perf_counter()
    radius = tuple(args.radius) if args.radius else auto_radius_range(args.dims)
    cfg = PhantomConfig(dims=args.dims, radius_range=radius, noise_sd=args.noise, rho=args.rho)
    cases = generate_dataset(cfg, args.n, args.seed)
    out = Path(args.out)
    save_dataset(cases, out)
    _write_manifest(out, "synth", args, started, phantom_config=asdict(cfg), seeds={"dataset": args.seed},
                    outputs=[str(out / "index.json")])
    print(f"wrote {len(cases)} cases to {out}")
    return 0


# ---------------------------------------------------------------- train


def _model_config(args, dims) -> ModelConfig:
    return ModelConfig(dims=dims, widths=args.widths, radii=args.radii, hidden=args.hidden,
                       keep_prob=args.keep, seed=args.seed, attention_offset=args.attention_offset)


def _train_config(args, tasks=TASKS) -> TrainConfig:
    return TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, l2=args.l2,
                       augment=not args.no_augment, seed=args.seed, tasks=tasks)


def cmd_train(args) -> int:
    started = time.perf_counter()
    if args.ablate not in VARIANTS:
        raise UsageError(f"unknown variant {args.ablate!r}; valid: {', '.join(VARIANTS)}")
    cases = load_dataset(args.data)
    if len(cases) < 10:
        raise DataError(f"dataset {args.data} has {len(cases)} cases; training needs at least 10")
    train_set, val_set, test_set = split_dataset(cases, args.split_seed)
    mc = with_variant(_model_config(args, cases[0].dims), args.ablate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [(t,) for t in TASKS] if args.ablate == "no_multitask" else [TASKS]
    written = []
    for tasks in runs:
        suffix = "" if len(runs) == 1 else f"_{tasks[0]}"
        tc = _train_config(args, tasks)
        params, hist = train(train_set, val_set, tc, mc)
        ckpt = out / f"model{suffix}.ckpt"
        save_checkpoint(ckpt, params, mc, epoch=hist.best_epoch, seed=args.seed, split_seed=args.split_seed,
                        variant=args.ablate, tasks=list(tasks), train_config=asdict(tc))
        _atomic_write(out / f"history{suffix}.csv", hist.to_csv().encode())
        written += [str(ckpt), str(out / f"history{suffix}.csv")]
        print(f"{ckpt}: best epoch {hist.best_epoch}")
    _write_manifest(out, "train", args, started, model_config=mc.to_dict(),
                    seeds={"model": args.seed, "train": args.seed, "split": args.split_seed},
                    split_sizes=[len(train_set), len(val_set), len(test_set)], outputs=written)
    return 0


# ---------------------------------------------------------------- eval


def _eval_cases(args, header):
    cases = load_dataset(args.data)
    if args.split == "all":
        return cases
    split_seed = header.get("split_seed", 0)
    tr, va, te = split_dataset(cases, split_seed)
    return {"train": tr, "val": va, "test": te}[args.split]


def _check_dims(cases, mc: ModelConfig):
    for c in cases:
        if c.dims != mc.dims:
            raise DataError(f"case {c.id} has dims {c.dims} but the checkpoint expects {mc.dims}")


def evaluate_cases(cases, params, mc: ModelConfig, k: float = 30.0):
    preds = predict(cases, params, mc)
    metrics, curves = {}, {}
    aucs = []
    for t in CLASS_TASKS:
        y = [c.labels.binary(t) for c in cases]
        if 0 < sum(y) < len(y):
            roc = roc_auc([p.prob(t) for p in preds], y)
            metrics[f"auc_{t}"] = roc.auc
            curves[t] = roc
            aucs.append(roc.auc)
        else:
            metrics[f"auc_{t}"] = None
    metrics["auc_avg"] = float(np.mean(aucs)) if len(aucs) == len(CLASS_TASKS) else None
    metrics["ki67_mae_pp"], metrics["ki67_sd_pp"] = mae([p.ki67 for p in preds], [c.labels.ki67 for c in cases])
    metrics["n_cases"] = len(cases)
    reports = [attention_report(c.id, p.attention, c.mask, k) for c, p in zip(cases, preds)]
    conf = np.zeros((len(SUBTYPES), len(SUBTYPES)), dtype=int)
    for c, p in zip(cases, preds):
        guess = BiomarkerLabels(int(p.p_er >= 0.5), int(p.p_pr >= 0.5), int(p.p_her2 >= 0.5), p.ki67)
        conf[SUBTYPES.index(subtype_from_biomarkers(c.labels)), SUBTYPES.index(subtype_from_biomarkers(guess))] += 1
    return preds, metrics, curves, reports, conf


def cmd_eval(args) -> int:
    started = time.perf_counter()
    params, mc, header = load_checkpoint(args.ckpt)
    cases = _eval_cases(args, header)
    _check_dims(cases, mc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, metrics, curves, reports, conf = evaluate_cases(cases, params, mc, args.k)
    written = export_report(reports, metrics, out, curves)
    written.append(export_confusion(conf, SUBTYPES, out / "subtype_confusion.csv"))
    _write_manifest(out, "eval", args, started, outputs=[str(p) for p in written])
    for key in ("auc_er", "auc_pr", "auc_her2", "ki67_mae_pp"):
        v = metrics[key]
        print(f"{key}: {'NA' if v is None else f'{v:.4f}'}")
    return 0


# ---------------------------------------------------------------- visualize


def _overlay(slice_img: np.ndarray, heat: np.ndarray, roi: np.ndarray) -> np.ndarray:
    lo, hi = slice_img.min(), slice_img.max()
    gray = (slice_img - lo) / (hi - lo) if hi > lo else np.zeros_like(slice_img)
    base = np.repeat((255 * gray)[..., None], 3, axis=-1)
    rgb = 0.5 * base + 0.5 * colormap(heat).astype(np.float64)
    inner = roi.copy()
    inner[1:-1, 1:-1] = roi[1:-1, 1:-1] & roi[:-2, 1:-1] & roi[2:, 1:-1] & roi[1:-1, :-2] & roi[1:-1, 2:]
    rgb[roi & ~inner] = 255.0
    return np.floor(rgb + 0.5).astype(np.uint8)


def cmd_visualize(args) -> int:
    started = time.perf_counter()
    ids = list_case_ids(args.data)
    if args.case not in ids:
        raise DataError(f"case {args.case!r} not found; available: {', '.join(ids)}")
    params, mc, _ = load_checkpoint(args.ckpt)
    case = load_case(args.data, args.case)
    _check_dims([case], mc)
    pred = predict([case], params, mc)[0]
    rep = attention_report(case.id, pred.attention, case.mask, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [export_heatmap(rep.attention_2d, out / "heatmap.ppm")]
    d = rep.slice_index
    ov = _overlay(case.volume[:, :, d].astype(np.float64), rep.attention_2d, case.mask[:, :, d])
    h, w = ov.shape[:2]
    _atomic_write(out / "overlay.ppm", f"P6\n{w} {h}\n255\n".encode() + ov.tobytes())
    written += [out / "overlay.ppm", export_profiles(rep, out / "profiles.csv")]
    written += export_report([rep], None, out)[:1]
    _write_manifest(out, "visualize", args, started, outputs=[str(p) for p in written])
    print(f"slice {d}: dice@{args.k:g} = {rep.dice_k:.4f}, ratio = {rep.stats.ratio:.3f}, p = {rep.stats.p_value:.3g}")
    return 0


# ---------------------------------------------------------------- ablation


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    cases = load_dataset(args.data)
    train_set, val_set, test_set = split_dataset(cases, args.split_seed)
    mc = _model_config(args, cases[0].dims)
    rows = run_ablation(train_set, val_set, test_set, _train_config(args), mc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "ablation.csv", ablation_csv(rows).encode())
    _write_manifest(out, "ablate", args, started, outputs=[str(out / "ablation.csv")],
                    runtimes={r.variant: round(r.seconds, 1) for r in rows})
    print(ablation_csv(rows), end="")
    return 0


# ---------------------------------------------------------------- gradcheck


def gradcheck_setup(dims=(16, 16, 16), seed: int = 0):
    """Tiny model (one 8-channel stage) plus one phantom for the end-to-end check.

    The attention offset is zeroed here: a closed gate shrinks many gradients
    to within a few ulps of the loss, below what central differences resolve.
    """
    mc = ModelConfig(dims=dims, widths=(8,), radii=(1, 2, 3), hidden=8, keep_prob=1.0, seed=seed,
                     attention_offset=0.0)
    pc = PhantomConfig(dims=dims, radius_range=auto_radius_range(dims), noise_sd=0.2)
    case = generate_phantom(pc, seed * 2, case_id="gc0")
    params = init_model(mc)
    # move biases off zero so no relu sits exactly on its kink
    rng = np.random.default_rng(seed + 1)
    for k, v in params.items():
        if k.rsplit(".", 1)[1].startswith("b"):
            params[k] = v + rng.uniform(-0.05, 0.05, size=v.shape)
    return params, make_batch([case], mc), mc


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    params, batch, mc = gradcheck_setup(args.dims, args.seed)
    res = check_model_gradients(params, batch, mc, h=args.h)
    ok = res.max_rel_error < args.tol
    print(f"parameters checked: {res.n_params}")
    print(f"max relative error: {res.max_rel_error:.3e}")
    print(f"worst parameter: {res.worst_param}{list(res.worst_index)}")
    print("PASS" if ok else "FAIL")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, "gradcheck", args, started, result=asdict(res), passed=ok)
    return 0 if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def _add_model_flags(p):
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--keep", type=float, default=0.5, help="dropout keep probability")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--widths", type=_ints, default=(8, 16))
    p.add_argument("--radii", type=_ints, default=(1, 2, 3))
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--attention-offset", type=float, default=-1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smtl", description="Spatial multi-task biomarker prediction on phantom volumes.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--rho", type=float, default=0.8)
    p.add_argument("--radius", type=float, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", default="full", help=f"one of: {', '.join(VARIANTS)}")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--k", type=float, default=30.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="attention heatmap and profiles for one case")
    p.add_argument("--data", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float, default=30.0)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="train and score every ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="end-to-end finite-difference gradient check")
    p.add_argument("--dims", type=_dims, default=(16, 16, 16))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def _limit_threads():
    n = os.environ.get("SMTL_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
