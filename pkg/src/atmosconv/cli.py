"""Command-line entry point.

Every subcommand writes ``resolved_config.json`` into its output directory;
``atmosconv rerun <that file>`` repeats the run from the snapshot alone.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .atf import VARIANTS, corrupt_dataset
from .classic import SceneSpec, checkerboard_scene, demo_response_analysis, dog_kernel
from .data import Dataset, load_dataset, train_val_split, write_png_dir, write_raw_set
from .errors import AtmosConvError, ConfigError, NumericError
from .nn import ModelConfig, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger("atmosconv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SNAPSHOT = "resolved_config.json"
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
# keys a --paired-with run copies from its sibling: everything that decides
# initial weights, data order and augmentation draws
PAIR_KEYS = ("seed", "train_set", "val_set", "val_fraction", "low_shot_fraction", "epochs",
             "batch_size", "augment_fraction", "architecture", "width", "depth", "norm_layer",
             "num_classes", "in_channels")


class GradcheckFailed(NumericError):
    pass


def write_csv(path, rows: list[dict], fieldnames=None) -> Path:
    path = Path(path)
    fieldnames = fieldnames or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def _outdir(args) -> Path:
    out = Path(args.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(args, out: Path) -> None:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    (out / SNAPSHOT).write_text(json.dumps({"version": __version__, "command": args.command,
                                            "args": d}, indent=2))


def _read_snapshot(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / SNAPSHOT
    if not p.exists():
        raise ConfigError(f"no run snapshot at {p}")
    return json.loads(p.read_text())


# ---------------------------------------------------------------------------
# corrupt


def cmd_corrupt(args) -> int:
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; expected one of {VARIANTS}")
    out = _outdir(args)
    ds = load_dataset(args.input, args.split)
    imgs, labels, manifest = corrupt_dataset(ds.images, ds.labels, args.variant, args.seed,
                                             args.severity)
    cds = Dataset(imgs, labels, ds.num_classes, ds.names)
    if args.format in ("raw", "both"):
        write_raw_set(out, cds)
    if args.format in ("png", "both"):
        write_png_dir(out, cds)
    manifest.save(out / "manifest.json")
    _snapshot(args, out)
    ranges = ", ".join(f"{k} in [{lo:g}, {hi:g}]" for k, (lo, hi) in manifest.ranges().items())
    print(f"variant D_{args.variant}  seed {args.seed}  images {len(cds)}  "
          f"severity {args.severity:g}  ({ranges})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _model_config(args) -> ModelConfig:
    base = ModelConfig.from_text(Path(args.config).read_text()) if args.config else ModelConfig()
    kw = asdict(base)
    for k in MODEL_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            kw[k] = v
    cfg = ModelConfig(**kw)
    for k in MODEL_KEYS:   # record the resolved values in the snapshot
        if hasattr(args, k):
            setattr(args, k, getattr(cfg, k))
    return cfg


def cmd_train(args) -> int:
    from .plotting import plot_training_log
    from .train import LOG_FIELDS, TrainHyper, evaluate, low_shot_subsample, train

    if args.paired_with:
        sib = _read_snapshot(args.paired_with)["args"]
        for k in PAIR_KEYS:
            if k in sib:
                setattr(args, k, sib[k])
    cfg = _model_config(args)
    out = _outdir(args)
    train_set = load_dataset(args.train_set, "train")
    if args.val_set:
        val_set = load_dataset(args.val_set, "test")
    elif args.val_fraction:
        train_set, val_set = train_val_split(train_set, args.val_fraction, cfg.seed)
    else:
        val_set = None
    if args.low_shot_fraction < 1.0:
        train_set = low_shot_subsample(train_set, args.low_shot_fraction, cfg.seed)
    hyper = TrainHyper(lr=args.lr, momentum=args.momentum, schedule=args.schedule,
                       step_epochs=args.step_epochs, step_gamma=args.step_gamma,
                       epochs=args.epochs, batch_size=args.batch_size,
                       weight_decay=args.weight_decay, reg_strength=args.reg_strength,
                       augment_fraction=args.augment_fraction, seed=cfg.seed)
    _snapshot(args, out)
    model = build_model(cfg)
    rows: list = []
    try:
        train(model, train_set, hyper, val_set, log_rows=rows)
    finally:
        write_csv(out / "train_log.csv", rows, list(LOG_FIELDS))
    save_checkpoint(model, out / "model.ckpt")
    (out / "model_config.txt").write_text(cfg.to_text())
    if rows:
        plot_training_log(out / "training_curve.png", rows)
    last = rows[-1]
    msg = f"trained {cfg.conv_mode} {cfg.architecture}: train_acc {last['train_acc']:.4f}"
    if val_set is not None:
        msg += f", val_acc {evaluate(model, val_set):.4f}"
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _parse_sets(items: list[str]) -> dict:
    sets = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"--set expects NAME=SOURCE, got {it!r}")
        name, spec = it.split("=", 1)
        sets[name] = load_dataset(spec, "test")
    return sets


def _load_model(args):
    expect = None
    if getattr(args, "config", None):
        expect = ModelConfig.from_text(Path(args.config).read_text())
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
    return load_checkpoint(args.checkpoint, expect)


def cmd_eval(args) -> int:
    from .experiments import SET_NAMES, corrupted_sets, evaluate_sets
    from .plotting import plot_accuracy_table, plot_contrast_bins

    model = _load_model(args)
    out = _outdir(args)
    sets = _parse_sets(args.set or [])
    manifests = {}
    if args.test_set:
        gen, manifests = corrupted_sets(load_dataset(args.test_set, "test"),
                                        args.corruption_seed, args.severity)
        sets.update(gen)
    if not sets:
        raise ConfigError("nothing to evaluate: give --set and/or --test-set")
    flip = None
    if args.flip_rate:
        a, _, b = args.flip_rate.partition(",")
        if a not in sets or b not in sets:
            raise ConfigError(f"--flip-rate names unknown sets {args.flip_rate!r}")
        flip = (a, b)
    contrast = args.contrast_set if args.contrast_bins else None
    if contrast is not None and contrast not in sets:
        raise ConfigError(f"--contrast-set {contrast!r} is not among the evaluated sets")
    _snapshot(args, out)
    report = evaluate_sets(model, sets, contrast, flip, manifests=manifests)
    report.meta["checkpoint"] = str(args.checkpoint)
    (out / "eval_report.json").write_text(report.to_json())
    label = model.config.conv_mode
    if all(k in sets for k in SET_NAMES):
        row = {"model": label, **report.row()}
        write_csv(out / "accuracy_table.csv", [row], ["model", *SET_NAMES])
        plot_accuracy_table(out / "accuracy.png", {label: report.row()})
    write_csv(out / "accuracy_by_set.csv",
              [{"set": k, "accuracy": v} for k, v in report.accuracy.items()])
    if report.contrast_bins is not None:
        write_csv(out / "contrast_bins.csv",
                  [{"bin": i + 1, "min_contrast": e, "accuracy": a} for i, (e, a) in
                   enumerate(zip(report.meta["contrast_edges"], report.contrast_bins))])
        plot_contrast_bins(out / "contrast_bins.png", np.asarray(report.contrast_bins))
    print("  ".join(f"{k} {v:.4f}" for k, v in report.accuracy.items()))
    if report.flip_rate is not None:
        print(f"flip rate {flip[0]} -> {flip[1]}: {report.flip_rate:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo-checker


def cmd_demo_checker(args) -> int:
    from .plotting import plot_demo

    out = _outdir(args)
    _snapshot(args, out)
    scene = SceneSpec(tiles=args.tiles, tile_px=args.tile_px,
                      illumination="uniform" if args.ramp_lo == args.ramp_hi else "linear_ramp",
                      lo=args.ramp_lo, hi=args.ramp_hi, angle_deg=args.angle, offset=args.offset)
    img = checkerboard_scene(scene)
    kernels = {"normalized": dog_kernel(args.sigma_inner, args.sigma_outer, args.size, True),
               "unnormalized": dog_kernel(args.sigma_inner, args.sigma_outer, args.size, False)}
    stats = {k: demo_response_analysis(img, kern, args.tile_px) for k, kern in kernels.items()}
    n = img.shape[1]
    write_csv(out / "profiles.csv",
              [{"column": c, "scene": img[n // 2, c],
                **{k: s.profile[c] for k, s in stats.items()}} for c in range(n)])
    write_csv(out / "region_stats.csv",
              [{"kernel": k, "flat_bias": s.flat_bias, "edge_mag": s.edge_mag, "ratio": s.ratio}
               for k, s in stats.items()])
    plot_demo(out / "demo.png", img, {k: s.profile for k, s in stats.items()})
    for k, s in stats.items():
        print(f"{k:>12}: flat_bias {s.flat_bias:.3e}  edge_mag {s.edge_mag:.3e}  "
              f"ratio {s.ratio:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def _diagnose_one(model, ds: Dataset, args) -> dict:
    from .diagnostics import (dichotomy_violations, filter_error_analysis,
                              guided_backprop_similarity, ratio_error_correlation,
                              ratio_histogram)

    hist = ratio_histogram(model)
    rows = filter_error_analysis(model, ds, min(args.k, len(ds)), args.layer, args.response)
    n_img = min(args.images, len(ds))
    sim = guided_backprop_similarity(model, ds.images[:n_img], args.layer)
    return {"hist": hist, "errors": rows, "sim": sim,
            "spearman": ratio_error_correlation(rows),
            "dichotomy_violations": len(dichotomy_violations(model)),
            "mass_below_0.05": float(hist.counts[0] / hist.total)}


def cmd_diagnose(args) -> int:
    from .atf import corrupt_dataset as _corrupt
    from .diagnostics import severity_flip_rates
    from .plotting import (plot_filter_errors, plot_ratio_histogram, plot_severity,
                           plot_similarity)

    models = {"model": _load_model(args)}
    if args.compare:
        models = {"model": models["model"], "compare": load_checkpoint(args.compare)}
    labels = {}
    for key, m in models.items():
        lab = m.config.conv_mode
        labels[key] = lab if lab not in labels.values() else f"{lab}_{key}"
    out = _outdir(args)
    _snapshot(args, out)
    ds = load_dataset(args.set, "test")
    if args.variant:
        ds = ds.with_images(_corrupt(ds.images, ds.labels, args.variant, args.corruption_seed)[0])
    results = {labels[k]: _diagnose_one(m, ds, args) for k, m in models.items()}

    summary = {}
    for lab, r in results.items():
        write_csv(out / f"ratio_histogram_{lab}.csv", r["hist"].as_rows())
        write_csv(out / f"filter_errors_{lab}.csv", r["errors"])
        sim = r["sim"]
        write_csv(out / f"guided_similarity_{lab}.csv",
                  [{"lo": sim.edges[i], "hi": sim.edges[i + 1], "count": int(c)}
                   for i, c in enumerate(sim.counts)])
        summary[lab] = {"ratio_mass_below_0.05": r["mass_below_0.05"],
                        "ratio_mean": r["hist"].mean(),
                        "dichotomy_violations": r["dichotomy_violations"],
                        "spearman_abs_r_vs_error": r["spearman"],
                        "guided_similarity_mean": sim.mean(),
                        "guided_zero_variance_pairs": sim.flagged_pairs}
    sweep = []
    for lab, (key, m) in zip(results, models.items()):
        for v in VARIANTS:
            for row in severity_flip_rates(m, ds, v, args.corruption_seed):
                sweep.append({"model": lab, **row})
    write_csv(out / "severity_flip.csv", sweep)
    (out / "diagnose_summary.json").write_text(json.dumps(summary, indent=2))

    first = next(iter(results.values()))
    plot_ratio_histogram(out / "ratio_histogram.png", first["hist"].edges,
                         {lab: r["hist"].counts for lab, r in results.items()})
    plot_filter_errors(out / "filter_errors.png", {lab: r["errors"] for lab, r in results.items()})
    plot_similarity(out / "guided_similarity.png", first["sim"].edges,
                    {lab: r["sim"].counts for lab, r in results.items()})
    plot_severity(out / "severity_flip.png", [r for r in sweep if r["model"] == next(iter(results))])
    for lab, s in summary.items():
        print(f"{lab}: |r|<0.05 mass {s['ratio_mass_below_0.05']:.3f}, "
              f"dichotomy violations {s['dichotomy_violations']}, "
              f"spearman {s['spearman_abs_r_vs_error']:.3f}, "
              f"guided similarity mean {s['guided_similarity_mean']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model_gradients

    if args.checkpoint:
        model = _load_model(args)
    else:
        model = build_model(_model_config(args))
    out = _outdir(args)
    _snapshot(args, out)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    c = model.config.in_channels
    x = rng.normal(size=(args.batch, c, args.size, args.size))
    y = rng.integers(0, model.config.num_classes, size=args.batch)
    reports = check_model_gradients(model, x, y, args.probes, seed=int(rng.integers(2**31)),
                                    reg_strength=args.reg_strength, floor=args.floor)
    write_csv(out / "gradcheck.csv", [asdict(r) for r in reports])
    worst = max(reports, key=lambda r: r.max_rel_error)
    bad = [r for r in reports if not r.max_rel_error < args.tol]
    for r in reports:
        log.info("%-40s %.2e (%d probes, %d rejected at kinks)", r.name, r.max_rel_error,
                 r.probes, r.rejected)
    print(f"{len(reports)} parameter tensors, worst {worst.name} {worst.max_rel_error:.2e}, "
          f"tolerance {args.tol:g}: {'FAIL' if bad else 'ok'}")
    if bad:
        raise GradcheckFailed(", ".join(r.name for r in bad))
    return EXIT_OK


# ---------------------------------------------------------------------------
# overhead


def cmd_overhead(args) -> int:
    from .data import synthetic_shapes
    from .diagnostics import overhead

    out = _outdir(args)
    cfg = _model_config(args)
    _snapshot(args, out)
    imgs = synthetic_shapes(args.images, seed=0, size=args.size,
                            channels=cfg.in_channels).images if args.images else None
    rows = []
    for nl in ("batch", "instance"):
        o = overhead(cfg.replace(norm_layer=nl), imgs)
        rows.append(o.as_dict())
        print(f"{cfg.architecture} width {cfg.width} {nl}: +{o.added_params} params "
              f"({100 * o.added_fraction:.3f}%), +{o.added_ms:.3f} ms/image")
    write_csv(out / "overhead.csv", rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(args) -> int:
    snap = _read_snapshot(args.snapshot)
    ns = argparse.Namespace(**snap["args"])
    if args.out:
        ns.out = args.out
    try:
        return COMMANDS[snap["command"]](ns)
    except KeyError:
        raise ConfigError(f"snapshot names unknown command {snap['command']!r}") from None


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config", help="key=value model config file")
    g.add_argument("--architecture", choices=("tiny_cnn", "mini_resnet"))
    g.add_argument("--conv-mode", dest="conv_mode", choices=("vanilla", "normalized"))
    g.add_argument("--norm-layer", dest="norm_layer", choices=("batch", "instance", "none"))
    g.add_argument("--width", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--affine", choices=("auto", "on", "off"))
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--in-channels", dest="in_channels", type=int)
    g.add_argument("--eps", type=float)
    g.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atmosconv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=__version__)
    sp = p.add_subparsers(dest="command", required=True)

    c = sp.add_parser("corrupt", help="write a corrupted copy of a dataset plus its manifest")
    c.add_argument("--in", dest="input", required=True, help="dataset path or synthetic:...")
    c.add_argument("--variant", required=True, help="C, L, B or S")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--severity", type=float, default=1.0)
    c.add_argument("--split", default="test")
    c.add_argument("--format", choices=("png", "raw", "both"), default="both")
    c.add_argument("--out")
    c.set_defaults(func=cmd_corrupt)

    t = sp.add_parser("train", help="train a model")
    _add_model_args(t)
    t.add_argument("--train-set", dest="train_set", default="synthetic:n=10000,seed=1")
    t.add_argument("--val-set", dest="val_set")
    t.add_argument("--val-fraction", dest="val_fraction", type=float, default=0.0)
    t.add_argument("--low-shot-fraction", dest="low_shot_fraction", type=float, default=1.0)
    t.add_argument("--augment-fraction", dest="augment_fraction", type=float, default=0.0)
    t.add_argument("--reg-strength", dest="reg_strength", type=float, default=0.0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--schedule", choices=("cosine", "step"), default="cosine")
    t.add_argument("--step-epochs", dest="step_epochs", type=int, default=10)
    t.add_argument("--step-gamma", dest="step_gamma", type=float, default=0.1)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    t.add_argument("--weight-decay", dest="weight_decay", type=float, default=5e-4)
    t.add_argument("--paired-with", dest="paired_with",
                   help="earlier run directory whose seeds and data settings to reuse")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sp.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="expected model config; mismatch is an error")
    e.add_argument("--set", action="append", help="NAME=SOURCE, repeatable")
    e.add_argument("--test-set", dest="test_set",
                   help="clean source; D and all four corrupted sets are generated from it")
    e.add_argument("--corruption-seed", dest="corruption_seed", type=int, default=7)
    e.add_argument("--severity", type=float, default=1.0)
    e.add_argument("--contrast-bins", dest="contrast_bins", action="store_true")
    e.add_argument("--contrast-set", dest="contrast_set", default="D")
    e.add_argument("--flip-rate", dest="flip_rate", metavar="CLEAN,CORRUPTED",
                   help="report the flip rate between two evaluated sets")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sp.add_parser("demo-checker", help="checkerboard DoG illumination demo")
    d.add_argument("--tiles", type=int, default=8)
    d.add_argument("--tile-px", dest="tile_px", type=int, default=16)
    d.add_argument("--ramp-lo", dest="ramp_lo", type=float, default=0.5)
    d.add_argument("--ramp-hi", dest="ramp_hi", type=float, default=1.5)
    d.add_argument("--angle", type=float, default=0.0)
    d.add_argument("--offset", type=float, default=0.0)
    d.add_argument("--sigma-inner", dest="sigma_inner", type=float, default=1.0)
    d.add_argument("--sigma-outer", dest="sigma_outer", type=float, default=2.0)
    d.add_argument("--size", type=int, default=9)
    d.add_argument("--out")
    d.set_defaults(func=cmd_demo_checker)

    g = sp.add_parser("diagnose", help="filter diagnostics for a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--compare", help="second checkpoint to report alongside")
    g.add_argument("--set", required=True, help="clean evaluation source")
    g.add_argument("--variant", help="corrupt the set with this variant first (C, L, B, S)")
    g.add_argument("--corruption-seed", dest="corruption_seed", type=int, default=7)
    g.add_argument("--k", type=int, default=100)
    g.add_argument("--layer")
    g.add_argument("--response", choices=("mean", "max"), default="mean")
    g.add_argument("--images", type=int, default=16, help="images for guided backprop")
    g.add_argument("--out")
    g.set_defaults(func=cmd_diagnose)

    k = sp.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    _add_model_args(k)
    k.add_argument("--checkpoint")
    k.add_argument("--probes", type=int, default=20)
    k.add_argument("--batch", type=int, default=8)
    k.add_argument("--size", type=int, default=8)
    k.add_argument("--reg-strength", dest="reg_strength", type=float, default=0.01)
    k.add_argument("--tol", type=float, default=1e-4)
    k.add_argument("--floor", type=float, default=1e-6,
                   help="gradients below this are compared in absolute terms")
    k.add_argument("--out")
    k.set_defaults(func=cmd_gradcheck)

    o = sp.add_parser("overhead", help="parameter and latency cost of normalization")
    _add_model_args(o)
    o.add_argument("--images", type=int, default=64, help="batch for timing (0 skips timing)")
    o.add_argument("--size", type=int, default=32)
    o.add_argument("--out")
    o.set_defaults(func=cmd_overhead, architecture="mini_resnet")

    r = sp.add_parser("rerun", help="repeat a run from its resolved_config.json")
    r.add_argument("snapshot")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rerun)
    return p


COMMANDS = {"corrupt": cmd_corrupt, "train": cmd_train, "eval": cmd_eval,
            "demo-checker": cmd_demo_checker, "diagnose": cmd_diagnose,
            "gradcheck": cmd_gradcheck, "overhead": cmd_overhead}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AtmosConvError, OSError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
