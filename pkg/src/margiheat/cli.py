"""Command-line interface: ``margiheat <subcommand> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import bench, data_synth, gradcheck, metrics, network, skeleton, training
from .errors import MargiheatError
from .heatmap_ops import marginal_coords
from .pnm import read_pgm, write_pgm

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _print_config(name: str, cfg: dict) -> None:
    print(f"# {name} config: {json.dumps(cfg, sort_keys=True, default=str)}", flush=True)


# ---------------------------------------------------------------------------
# Config files


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if key == "fe_channels":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if key == "sigma_px" and raw.lower() in ("none", "auto", ""):
            return None
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key!r}: {raw!r}") from None


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Unknown keys are a usage error."""
    known = {f: training.TrainConfig.__dataclass_fields__[f].type for f in training.TrainConfig.field_names()}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = known[key]
        kind = {"int": int, "bool": bool}.get(kind, kind)
        out[key] = _parse_value(key, value, kind)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    values = read_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = training.TrainConfig(**values)
    out_dir = Path(args.out_dir)
    _print_config("train", {**cfg.to_dict(), "out_dir": str(out_dir)})
    result = training.train(cfg, out_dir, resume_from=args.resume)
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.final_eval is not None:
        print(f"test MPJPE: {result.final_eval['mpjpe_mm']:.2f} mm")
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config("eval", {k: v for k, v in vars(args).items() if k != "func"})
    report = metrics.evaluate(args.pred, args.gt, procrustes=args.procrustes, subset=args.subset,
                              universal=args.universal)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.csv())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _print_config("gradcheck", {"seed": args.seed, "tolerance": args.tolerance, "n_seeds": args.n_seeds})
    results = gradcheck.run_suite(args.seed, args.n_seeds, args.tolerance)
    print(f"{'op':<18} {'worst rel err':>14} {'tolerance':>10}  status")
    for r in results:
        print(f"{r.name:<18} {r.worst:>14.3e} {r.tolerance:>10.1e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_ERROR
    print("all gradient checks passed")
    return EXIT_OK


def load_image(path, size: int) -> np.ndarray:
    """``(3, S, S)`` image from ``.npy``, a stacked-plane PGM (``3S x S``) or a grey PGM (``S x S``)."""
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path)
    else:
        grey, _ = read_pgm(path)
        if grey.shape == (3 * size, size):
            img = grey.reshape(3, size, size)
        else:
            img = np.repeat(grey[None], 3, axis=0)
    if img.shape != (3, size, size):
        raise MargiheatError(f"{path}: image shape {img.shape} does not match model input (3, {size}, {size})")
    return img


def cmd_export_heatmaps(args) -> int:
    _print_config("export-heatmaps", {"checkpoint": args.checkpoint, "input": args.input, "out_dir": args.out_dir})
    if not Path(args.checkpoint).is_file():
        raise MargiheatError(f"checkpoint not found: {args.checkpoint}")
    model = network.load_checkpoint(args.checkpoint, dtype=np.float64)
    cfg = model.config
    img = load_image(args.input, cfg.input_size)
    pred = model.forward(img[None])[-1]
    hms = pred.heatmaps
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = skeleton.JOINT_NAMES if cfg.n_joints == skeleton.N_JOINTS else [f"joint{j:02d}" for j in range(cfg.n_joints)]
    for j, name in enumerate(names):
        for plane, arr in (("xy", hms.xy), ("zy", hms.zy), ("xz", hms.xz)):
            write_pgm(out / f"{name}_{plane}.pgm", arr[0, j])
    mu = marginal_coords(hms, validate=False)[0]
    coords = {
        "heatmap_size": cfg.heatmap_size,
        "stage": pred.stage_index,
        "joints": {
            name: {
                "pixels": [float(v) for v in mu[j]],
                "normalized": [float(v) for v in skeleton.pixel_to_normalized(mu[j], cfg.heatmap_size)],
            }
            for j, name in enumerate(names)
        },
    }
    (out / "coords.json").write_text(json.dumps(coords, indent=2) + "\n")
    print(f"wrote {3 * len(names)} heatmaps and coords.json to {out}")
    return EXIT_OK


def _write_rows(rows, fields, dest):
    if dest is None:
        w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return
    with open(dest, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_bench_strategies(args) -> int:
    _print_config("bench-strategies", {"trials": args.trials, "noise": args.noise, "size": args.size,
                                       "sigma": args.sigma, "seed": args.seed})
    rows = bench.bench_strategies(args.trials, args.noise, args.size, args.sigma, args.seed)
    _write_rows(rows, bench.STRATEGY_FIELDS, args.out)
    if args.memory_csv:
        sizes = [int(s) for s in args.memory_sizes.split(",")]
        _write_rows(bench.memory_table(sizes, args.n_joints), bench.MEMORY_FIELDS, args.memory_csv)
    else:
        for r in bench.memory_table([args.size], args.n_joints):
            print(f"# memory ratio at H={r['size']}: {r['ratio']} ({r['marginal_scalars']} vs {r['volumetric_scalars']})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if not 0 <= args.n2d <= args.n:
        raise UsageError("--n2d must be between 0 and --n")
    _print_config("gen-data", {"n": args.n, "n2d": args.n2d, "seed": args.seed, "size": args.size,
                               "augment": not args.no_augment, "out_dir": args.out_dir})
    manifest = data_synth.dump_dataset(args.out_dir, args.n, args.seed, args.size, args.n2d, not args.no_augment)
    print(f"wrote {manifest['n']} examples to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="margiheat", description="Marginal-heatmap 3D pose estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on the synthetic task")
    t.add_argument("--config", required=True, help="flat 'key = value' config file (TrainConfig fields)")
    t.add_argument("--seed", type=int, help="override the config's seed")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints, log.csv and config.json")
    t.add_argument("--resume", help="checkpoint to resume from (needs its .opt.npz)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a prediction pose file against ground truth")
    e.add_argument("--pred", required=True, help="predicted poses (JSON Lines)")
    e.add_argument("--gt", required=True, help="ground-truth poses (JSON Lines)")
    e.add_argument("--procrustes", action="store_true", help="similarity-align each prediction first")
    e.add_argument("--subset", choices=sorted(metrics.SUBSETS), default="eval14", help="joints to score")
    e.add_argument("--universal", action="store_true", help="rescale both skeletons to a 920 mm knee-neck length")
    e.add_argument("--csv", help="write per-pose rows to this CSV file")
    e.add_argument("--json", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0, help="first seed")
    g.add_argument("--n-seeds", type=int, default=20, help="number of seeds per check")
    g.add_argument("--tolerance", type=float, help="override every per-op tolerance")
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-heatmaps", help="write a model's marginal heatmaps for one image as PGM files")
    x.add_argument("--checkpoint", required=True, help="model checkpoint (.mhpm)")
    x.add_argument("--input", required=True, help="image: .npy (3,S,S), stacked-plane PGM (3S x S) or grey PGM")
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_export_heatmaps)

    b = sub.add_parser("bench-strategies", help="argmax vs soft-argmax precision and memory accounting")
    b.add_argument("--trials", type=int, default=10000)
    b.add_argument("--noise", type=float, default=0.0, help="noise std relative to the heatmap peak")
    b.add_argument("--size", type=int, default=16, help="heatmap edge length")
    b.add_argument("--sigma", type=float, help="Gaussian width in pixels (default scales with size)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--n-joints", type=int, default=skeleton.N_JOINTS)
    b.add_argument("--out", help="strategy CSV path (default stdout)")
    b.add_argument("--memory-csv", help="write the memory table for --memory-sizes to this CSV")
    b.add_argument("--memory-sizes", default="16,32,64")
    b.set_defaults(func=cmd_bench_strategies)

    d = sub.add_parser("gen-data", help="dump a regenerable synthetic dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--n2d", type=int, default=0, help="how many examples have depth withheld")
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--no-augment", action="store_true")
    d.set_defaults(func=cmd_gen_data)
    return p


def _thread_limit():
    raw = os.environ.get("MARGIHEAT_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MargiheatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
