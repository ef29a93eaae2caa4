"""Command-line entry point.

Subcommands: dataset, train, estimate, baseline, eval, gradcheck.
Exit codes: 0 success, 1 partial failure (some shapes/metrics failed),
2 usage or configuration error. Every command validates its inputs before
writing anything, echoes its resolved configuration to <out>/run.json,
and is reproducible end to end for a fixed --seed (the PCP_SEED
environment variable is the fallback when the flag is absent).
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__, io
from .baselines import SCALE_NEIGHBORS, baseline_estimate, mst_orient, write_baseline_sidecar
from .dataset import (
    DatasetConfig,
    NOISE_LEVELS_DEFAULT,
    ShapeSpec,
    _generate_one,
)
from .evaluation import (
    GroundTruthEstimator,
    ModelEstimator,
    PrecomputedEstimator,
    emit_report,
    evaluate,
)
from .network import load_checkpoint
from .shapes import parse_analytic
from .training import TrainConfig, gradcheck, required_attributes, train
from .util import derive_rng


def _fail(message, code=2):
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_seed(args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("PCP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"PCP_SEED must be an integer, got {env!r}") from None
    return 0


def _load_config_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if path.endswith(".json"):
        with open(path) as fh:
            data = json.load(fh)
    elif path.endswith(".toml"):
        try:
            import tomllib as toml
        except ImportError:  # python 3.10
            import tomli as toml
        with open(path, "rb") as fh:
            data = toml.load(fh)
    else:
        raise ValueError(f"config file must be .json or .toml: {path}")
    if not isinstance(data, dict):
        raise ValueError(f"config file must hold a table/object: {path}")
    return data


def _write_run_json(out_dir, command, args, seed):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "arguments": {
            k: v for k, v in sorted(vars(args).items())
            if k not in ("func", "config") and not k.startswith("_")
        },
    }
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset(args):
    seed = _resolve_seed(args)
    specs = []
    for path in args.meshes or []:
        if os.path.isdir(path):
            entries = sorted(
                os.path.join(path, f)
                for f in os.listdir(path)
                if f.lower().endswith((".obj", ".ply"))
            )
            if not entries:
                return _fail(f"no .obj/.ply meshes in directory {path}")
            for p in entries:
                specs.append(ShapeSpec(os.path.splitext(os.path.basename(p))[0],
                                       mesh_path=p))
        elif os.path.exists(path):
            specs.append(ShapeSpec(os.path.splitext(os.path.basename(path))[0],
                                   mesh_path=path))
        else:
            return _fail(f"mesh path does not exist: {path}")
    for item in (args.analytic.split(",") if args.analytic else []):
        item = item.strip()
        if not item:
            continue
        try:
            shape = parse_analytic(item)
        except ValueError as exc:
            return _fail(str(exc))
        specs.append(ShapeSpec(shape.name, analytic=shape))
    if not specs:
        return _fail("nothing to generate: give --meshes and/or --analytic")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        return _fail(f"duplicate shape names: {sorted(names)}")

    noise_levels = ()
    if args.noise != "none":
        try:
            noise_levels = tuple(float(x) for x in args.noise.split(","))
        except ValueError:
            return _fail(f"bad --noise value {args.noise!r}")
        if any(x < 0 for x in noise_levels):
            return _fail("noise levels must be >= 0")
    density = ()
    if args.density and args.density != "none":
        density = tuple(s.strip() for s in args.density.split(","))
        for scheme in density:
            if scheme not in ("gradient", "stripes"):
                return _fail(f"unknown density scheme {scheme!r}")

    cfg = DatasetConfig(
        n_points=args.points,
        noise_levels=noise_levels,
        density_schemes=density,
        pidx_count=args.pidx,
        with_curvatures=not args.no_curvatures,
        seed=seed,
    )
    _write_run_json(args.out, "dataset", args, seed)

    entries = []
    failures = []
    for spec in specs:
        try:
            entries.extend(_generate_one(spec, cfg, args.out))
        except (ValueError, OSError) as exc:
            failures.append((spec.name, str(exc)))
            print(f"error: shape {spec.name!r} failed: {exc}", file=sys.stderr)
    stems = [e["stem"] for e in entries]
    io.write_manifest(args.out, stems)
    io.write_dataset_json(
        args.out,
        {
            "seed": seed,
            "n_points": cfg.n_points,
            "noise_levels": list(cfg.noise_levels),
            "density_schemes": list(cfg.density_schemes),
            "pidx_count": cfg.pidx_count,
            "shapes": entries,
        },
    )
    print(f"wrote {len(stems)} point clouds to {args.out}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# train


OUTPUT_ALIASES = {
    "normals": "unoriented_normals",
    "unoriented_normals": "unoriented_normals",
    "oriented_normals": "oriented_normals",
    "curvatures": "curvatures",
    "joint": "joint",
}


def cmd_train(args):
    seed = _resolve_seed(args)
    output = OUTPUT_ALIASES[args.outputs]
    try:
        stems = io.read_manifest(args.dataset)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    need_n, need_c = required_attributes(output)
    for stem in stems:
        for needed, suffix in ((need_n, ".normals"), (need_c, ".curv")):
            path = os.path.join(args.dataset, stem + suffix)
            if needed and not os.path.exists(path):
                return _fail(
                    f"outputs={args.outputs} needs {suffix} files, "
                    f"but {path} is missing"
                )
    cfg = TrainConfig(
        arch=args.arch,
        output=output,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        momentum=args.momentum,
        patches_per_cloud=args.patches_per_cloud,
        max_epochs=args.max_epochs,
        n_points=args.n_points,
        lambda_joint=args.lambda_joint,
        seed=seed,
        checkpoint_every=args.checkpoint_every,
    )
    _write_run_json(args.out, "train", args, seed)
    result = train(args.dataset, cfg, args.out, quiet=args.quiet)
    print(f"final loss: {result['final_loss']:.8g}")
    print(f"checkpoint: {result['final_checkpoint']}")
    return 0


# ---------------------------------------------------------------------------
# estimate / baseline


def _resolve_queries(args, cloud, stem_dir, stem):
    if args.query == "all":
        return np.arange(len(cloud), dtype=np.intp)
    pidx = io.read_cloud_pidx(stem_dir, stem)
    if pidx is None:
        raise FileNotFoundError(
            f"--query pidx requires {os.path.join(stem_dir, stem + '.pidx')}"
        )
    return pidx


def cmd_estimate(args):
    seed = _resolve_seed(args)
    if not os.path.exists(args.input):
        return _fail(f"input cloud not found: {args.input}")
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot load checkpoint: {exc}")
    stem_dir = os.path.dirname(os.path.abspath(args.input))
    stem = os.path.splitext(os.path.basename(args.input))[0]
    cloud = io.read_cloud(stem_dir, stem, normals=False, curvatures=False)
    try:
        queries = _resolve_queries(args, cloud, stem_dir, stem)
    except FileNotFoundError as exc:
        return _fail(str(exc))

    _write_run_json(args.out, "estimate", args, seed)
    estimator = ModelEstimator(model, batch_size=args.batch_size)
    rng = derive_rng(seed, "estimate", stem)
    result = estimator.estimate(cloud, queries, rng)
    if result.normals is not None:
        io.write_normals(os.path.join(args.out, stem + ".normals"), result.normals)
    if result.curvatures is not None:
        io.write_curvatures(os.path.join(args.out, stem + ".curv"), result.curvatures)
    print(f"estimated {len(queries)} points from {stem}")
    return 0


def cmd_baseline(args):
    seed = _resolve_seed(args)
    if not os.path.exists(args.input):
        return _fail(f"input cloud not found: {args.input}")
    stem_dir = os.path.dirname(os.path.abspath(args.input))
    stem = os.path.splitext(os.path.basename(args.input))[0]
    cloud = io.read_cloud(stem_dir, stem, normals=False, curvatures=False)
    if SCALE_NEIGHBORS[args.scale] > len(cloud):
        return _fail(
            f"scale {args.scale} needs {SCALE_NEIGHBORS[args.scale]} neighbors, "
            f"cloud has {len(cloud)}"
        )
    try:
        queries = _resolve_queries(args, cloud, stem_dir, stem)
    except FileNotFoundError as exc:
        return _fail(str(exc))

    _write_run_json(args.out, "baseline", args, seed)
    result = baseline_estimate(cloud, args.method, args.scale, queries)
    normals = result.normals
    orient_info = {}
    if args.orient == "mst":
        ok = ~np.isnan(normals).any(axis=1)
        filled = np.where(ok[:, None], normals, (0.0, 0.0, 1.0))
        oriented = mst_orient(cloud.select(queries), filled, k=args.mst_k)
        normals = np.where(ok[:, None], oriented.normals, np.nan)
        orient_info = {"orientation": "mst", "mst_k": args.mst_k,
                       "n_components": oriented.n_components}

    io.write_normals(os.path.join(args.out, stem + ".normals"), normals)
    if result.curvatures is not None:
        io.write_curvatures(os.path.join(args.out, stem + ".curv"), result.curvatures)
    write_baseline_sidecar(
        os.path.join(args.out, stem + ".json"), result,
        extra={"scale": args.scale, **orient_info},
    )
    print(
        f"{args.method}/{args.scale}: {len(queries)} queries, "
        f"{len(result.failures)} failures"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    seed = _resolve_seed(args)
    try:
        stems = io.read_manifest(args.dataset)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))

    estimators = []
    if args.gt_passthrough:
        estimators.append(GroundTruthEstimator())
    for spec in args.pred or []:
        name, _, directory = spec.partition("=")
        if not directory:
            return _fail(f"--pred needs NAME=DIR, got {spec!r}")
        if not os.path.isdir(directory):
            return _fail(f"prediction directory not found: {directory}")
        estimators.append(PrecomputedEstimator(directory, name=name))
    for spec in args.checkpoint or []:
        name, _, path = spec.partition("=")
        if not path:
            name, path = "model", name
        try:
            model, _ = load_checkpoint(path)
        except (OSError, ValueError) as exc:
            return _fail(f"cannot load checkpoint {path}: {exc}")
        estimators.append(ModelEstimator(model, name=name))
    if not estimators:
        return _fail("nothing to evaluate: give --pred, --checkpoint, "
                     "or --gt-passthrough")

    # precomputed predictions must cover the manifest before we start
    missing = []
    for est in estimators:
        if isinstance(est, PrecomputedEstimator):
            for stem in stems:
                has_n = os.path.exists(os.path.join(est.directory, stem + ".normals"))
                has_c = os.path.exists(os.path.join(est.directory, stem + ".curv"))
                if not (has_n or has_c):
                    missing.append(f"{est.name}: {stem}")
    if missing:
        print("missing predictions:", file=sys.stderr)
        for entry in missing:
            print(f"  {entry}", file=sys.stderr)
        return 1

    _write_run_json(args.out, "eval", args, seed)
    report = evaluate(estimators, args.dataset, stems=stems, seed=seed,
                      n_queries=args.queries)
    report_path, summary_path, svg_path = emit_report(report, args.out)
    for row in report.aggregate():
        if row["category"] == "all":
            print(
                f"{row['method']:>24s}  {row['metric']:<20s} {row['value']:.6g}"
            )
    print(f"report: {report_path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    seed = _resolve_seed(args)
    report = gradcheck(seed=seed)
    print(f"{'layer':<12s} max relative error")
    for section, err in report.rows():
        print(f"{section:<12s} {err:.3e}")
    print(f"checked {report.n_parameters} parameters; "
          f"max {report.max_rel_error:.3e}, threshold {args.threshold:g}")
    return 0 if report.max_rel_error < args.threshold else 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pointprops",
        description="Point-cloud local surface property toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (default: $PCP_SEED or 0)")
        p.add_argument("--config", default=None,
                       help="JSON/TOML file with defaults for this command")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker cap; 1 = deterministic sequential mode (default 1)")

    p = sub.add_parser("dataset", help="generate labeled point-cloud variants")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--meshes", nargs="*", default=None,
                   help="mesh files or directories (.obj/.ply)")
    p.add_argument("--analytic", default=None,
                   help="comma list, e.g. sphere,cylinder:radius=2,sheet")
    p.add_argument("--points", type=int, default=100_000,
                   help="samples per shape (default 100000)")
    p.add_argument("--noise", default=",".join(str(x) for x in NOISE_LEVELS_DEFAULT),
                   help="comma list of noise levels relative to the bbox "
                        "diagonal, or 'none' (default 0.0025,0.012,0.024)")
    p.add_argument("--density", default="none",
                   help="density schemes: gradient,stripes or 'none' (default none)")
    p.add_argument("--pidx", type=int, default=0,
                   help="also write a .pidx test subset of this size (default 0)")
    p.add_argument("--no-curvatures", action="store_true",
                   help="skip curvature ground truth")
    add_common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the patch network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("ss", "ms"), default="ss",
                   help="single-scale (0.05) or multi-scale (0.01,0.03,0.07)")
    p.add_argument("--outputs", choices=sorted(OUTPUT_ALIASES), default="normals")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--patches-per-cloud", type=int, default=1000)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--n-points", type=int, default=500)
    p.add_argument("--lambda-joint", type=float, default=1.0)
    p.add_argument("--checkpoint-every", type=int, default=50)
    p.add_argument("--quiet", action="store_true")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="run a trained model over a cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input .xyz file")
    p.add_argument("--out", required=True)
    p.add_argument("--query", choices=("all", "pidx"), default="all")
    p.add_argument("--batch-size", type=int, default=128)
    add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("baseline", help="run a classical estimator over a cloud")
    p.add_argument("--input", required=True, help="input .xyz file")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("pca", "jet"), required=True)
    p.add_argument("--scale", choices=tuple(SCALE_NEIGHBORS), default="small",
                   help="small=18, medium=112, large=450 neighbors")
    p.add_argument("--orient", choices=("none", "mst"), default="none")
    p.add_argument("--mst-k", type=int, default=6,
                   help="neighborhood size of the orientation graph (default 6)")
    p.add_argument("--query", choices=("all", "pidx"), default="all")
    add_common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred", action="append", default=None, metavar="NAME=DIR",
                   help="directory of precomputed predictions (repeatable)")
    p.add_argument("--checkpoint", action="append", default=None,
                   metavar="[NAME=]PATH", help="model checkpoint to run (repeatable)")
    p.add_argument("--gt-passthrough", action="store_true",
                   help="also score the ground truth against itself")
    p.add_argument("--queries", type=int, default=5000,
                   help="query subset size per shape (default 5000)")
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--threshold", type=float, default=1e-4)
    add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = _load_config_file(args.config)
        except (OSError, ValueError) as exc:
            return _fail(str(exc))
        valid = set(vars(args))
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in valid:
                return _fail(f"unknown config key {key!r} for {args.command}")
            # command line wins: only fill values the user left at default
            if f"--{key.replace('_', '-')}" not in (argv or sys.argv[1:]):
                setattr(args, dest, value)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
