"""Test-set metrics, the evaluation harness, and report emission.

Per shape variant, a seeded random subset of query points (or the shipped
.pidx subset, when present) is fed to an estimator; angle and curvature
errors are aggregated per category: no noise, low/medium/high noise, the
two density schemes, and a global average. Category values are means of
per-shape errors. Reports land as two CSV files plus a static SVG chart.
"""

import csv
import math
import os
import xml.sax.saxutils as saxutils
from dataclasses import dataclass, field

import numpy as np

from . import io
from .baselines import baseline_estimate, mst_orient
from .core import bbox_diagonal, build_index, extract_patch
from .network import PatchBatch, forward, load_checkpoint, transform_outputs
from .training import rectified_curvature_error
from .util import derive_rng

NOISE_CATEGORY = {0.0025: "noise_low", 0.012: "noise_med", 0.024: "noise_high"}
CATEGORY_ORDER = (
    "no_noise",
    "noise_low",
    "noise_med",
    "noise_high",
    "density_gradient",
    "density_stripes",
    "all",
)
METRICS = ("rms_oriented_deg", "rms_unoriented_deg", "flip_fraction",
           "curv_rms_k1", "curv_rms_k2")


# ---------------------------------------------------------------------------
# metrics


def rms_angle_error(pred, gt, oriented=True):
    """RMS angle between normal sets, in degrees.

    Per pair theta = arccos(clamped dot); unoriented folds theta to
    min(theta, 180 - theta).
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    dots = np.clip(np.einsum("ij,ij->i", pred, gt), -1.0, 1.0)
    theta = np.degrees(np.arccos(dots))
    if not oriented:
        theta = np.minimum(theta, 180.0 - theta)
    return float(np.sqrt(np.mean(theta**2)))


def flip_fraction(pred, gt):
    """Fraction of predictions pointing against ground truth (dot < 0)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ValueError("length mismatch")
    return float(np.mean(np.einsum("ij,ij->i", pred, gt) < 0))


def curvature_rms(pred, gt):
    """RMS of the rectified curvature error, per principal value."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ValueError("length mismatch")
    err = rectified_curvature_error(pred, gt)
    return (
        float(np.sqrt(np.mean(err[:, 0] ** 2))),
        float(np.sqrt(np.mean(err[:, 1] ** 2))),
    )


# ---------------------------------------------------------------------------
# estimators


@dataclass
class EstimateResult:
    normals: np.ndarray = None  # (Q, 3); NaN rows mark failures
    curvatures: np.ndarray = None  # (Q, 2) world scale; NaN rows mark failures


class GroundTruthEstimator:
    """Passthrough of the cloud's own ground truth (sanity baseline)."""

    name = "ground_truth"

    def estimate(self, cloud, queries, rng):
        return EstimateResult(
            normals=None if cloud.gt_normals is None else cloud.gt_normals[queries],
            curvatures=None
            if cloud.gt_curvatures is None
            else cloud.gt_curvatures[queries],
        )


class FixedNormalEstimator:
    """Constant-normal estimator; useful as a known-error reference."""

    def __init__(self, direction=(0.0, 0.0, 1.0)):
        self.direction = np.asarray(direction, dtype=np.float64)
        self.direction /= np.linalg.norm(self.direction)
        self.name = "fixed_normal"

    def estimate(self, cloud, queries, rng):
        return EstimateResult(normals=np.tile(self.direction, (len(queries), 1)))


class BaselineEstimator:
    """pca or jet at a named scale, optionally MST-oriented."""

    def __init__(self, method="pca", scale="small", orient=False, mst_k=6, degree=2):
        self.method = method
        self.scale = scale
        self.orient = orient
        self.mst_k = mst_k
        self.degree = degree
        self.name = f"{method}_{scale}" + ("_mst" if orient else "")

    def estimate(self, cloud, queries, rng):
        result = baseline_estimate(cloud, self.method, self.scale, queries,
                                   degree=self.degree)
        normals = result.normals
        if self.orient:
            ok = ~np.isnan(normals).any(axis=1)
            filled = np.where(ok[:, None], normals, (0.0, 0.0, 1.0))
            sub = cloud.select(queries)
            oriented = mst_orient(sub, filled, k=self.mst_k)
            normals = np.where(ok[:, None], oriented.normals, np.nan)
        return EstimateResult(normals=normals, curvatures=result.curvatures)


class ModelEstimator:
    """Patch-network inference over query points."""

    def __init__(self, model_or_path, name="model", batch_size=128):
        if isinstance(model_or_path, (str, os.PathLike)):
            self.model, _ = load_checkpoint(model_or_path)
        else:
            self.model = model_or_path
        self.name = name
        self.batch_size = batch_size

    def estimate(self, cloud, queries, rng):
        cfg = self.model.config
        index = build_index(cloud)
        diag = bbox_diagonal(cloud)
        radii = [s * diag for s in cfg.scales]
        r_ref = max(cfg.scales) * diag
        normals = np.zeros((len(queries), 3)) if cfg.has_normals() else None
        curvatures = np.zeros((len(queries), 2)) if cfg.has_curvatures() else None
        for start in range(0, len(queries), self.batch_size):
            chunk = queries[start : start + self.batch_size]
            segments = []
            for qi in chunk:
                per_scale = []
                for r in radii:
                    patch = extract_patch(cloud, index, int(qi), r, cfg.n_points, rng)
                    per_scale.append(patch.points[: patch.valid_count])
                segments.append(per_scale)
            batch = PatchBatch.from_arrays(segments, cfg.n_points, cfg.np_dtype)
            raw, cache = forward(self.model, batch)
            out = transform_outputs(raw, cache.rotation, r_ref, cfg)
            if normals is not None:
                normals[start : start + len(chunk)] = out["normals"]
            if curvatures is not None:
                curvatures[start : start + len(chunk)] = out["curvatures"]
        return EstimateResult(normals=normals, curvatures=curvatures)


class PrecomputedEstimator:
    """Reads per-stem .normals/.curv prediction files from a directory.

    Files must align with the evaluation queries: either one row per
    cloud point, or one row per .pidx entry when the dataset ships one.
    """

    def __init__(self, directory, name=None):
        self.directory = directory
        self.name = name or os.path.basename(os.path.normpath(directory))

    def load(self, stem, cloud, queries, pidx):
        npath = os.path.join(self.directory, stem + ".normals")
        cpath = os.path.join(self.directory, stem + ".curv")
        normals = io.read_normals(npath) if os.path.exists(npath) else None
        curv = io.read_curvatures(cpath) if os.path.exists(cpath) else None
        if normals is None and curv is None:
            raise FileNotFoundError(
                f"no predictions for {stem!r} in {self.directory}"
            )

        def align(arr, what):
            if arr is None:
                return None
            if len(arr) == len(cloud):
                return arr[queries]
            if pidx is not None and len(arr) == len(pidx):
                lookup = {int(p): i for i, p in enumerate(pidx)}
                try:
                    rows = [lookup[int(q)] for q in queries]
                except KeyError as exc:
                    raise ValueError(
                        f"{what} for {stem!r} does not cover query {exc}"
                    ) from None
                return arr[rows]
            raise ValueError(
                f"{what} for {stem!r} has {len(arr)} rows; expected "
                f"{len(cloud)} (full cloud) or the .pidx subset"
            )

        return EstimateResult(align(normals, "normals"), align(curv, "curvatures"))


# ---------------------------------------------------------------------------
# harness


@dataclass
class ShapeRecord:
    stem: str
    base: str
    variant: str
    method: str
    n_queries: int
    metrics: dict
    failures: int = 0
    warnings: list = field(default_factory=list)

    def category(self):
        if self.variant == "clean":
            return "no_noise"
        if self.variant.startswith("noise_"):
            level = float(self.variant.split("_", 1)[1])
            return NOISE_CATEGORY.get(level, self.variant)
        if self.variant.startswith("density_"):
            return self.variant
        return self.variant


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    seed: int = 0

    def aggregate(self):
        """Category means of per-shape metric values, plus a global row."""
        rows = []
        methods = sorted({r.method for r in self.records})
        for method in methods:
            recs = [r for r in self.records if r.method == method]
            cats = {}
            for r in recs:
                cats.setdefault(r.category(), []).append(r)
            cats["all"] = recs
            for cat in CATEGORY_ORDER:
                if cat not in cats:
                    continue
                for metric in METRICS:
                    values = [
                        r.metrics[metric]
                        for r in cats[cat]
                        if r.metrics.get(metric) is not None
                    ]
                    if values:
                        rows.append(
                            {
                                "method": method,
                                "category": cat,
                                "metric": metric,
                                "value": float(np.mean(values)),
                                "n_shapes": len(values),
                            }
                        )
        return rows


def _variant_of(stem, dataset_info):
    if dataset_info:
        for entry in dataset_info.get("shapes", []):
            if entry["stem"] == stem:
                return entry["base"], entry["variant"]
    for label in ("clean",) + tuple(
        f"noise_{x:g}" for x in NOISE_CATEGORY
    ) + ("density_gradient", "density_stripes"):
        suffix = "_" + label
        if stem.endswith(suffix):
            return stem[: -len(suffix)], label
    return stem, "unknown"


def evaluate_cloud(estimator, cloud, queries, rng, stem=None, base=None,
                   variant=None) -> ShapeRecord:
    """Run one estimator over one cloud's query subset and score it."""
    if isinstance(estimator, PrecomputedEstimator):
        raise TypeError("use evaluate() for precomputed predictions")
    result = estimator.estimate(cloud, queries, rng)
    return _score(result, cloud, queries, estimator.name,
                  stem or cloud.name, base or cloud.name, variant or "clean")


def _score(result: EstimateResult, cloud, queries, method, stem, base, variant):
    metrics = {m: None for m in METRICS}
    warnings_list = []
    failures = 0

    if result.normals is not None and cloud.gt_normals is None:
        warnings_list.append("no ground-truth normals; angle metrics skipped")
    if result.normals is not None and cloud.gt_normals is not None:
        gt = cloud.gt_normals[queries]
        ok = ~np.isnan(result.normals).any(axis=1)
        degenerate = np.linalg.norm(gt, axis=1) < 1e-12
        if np.any(degenerate):
            warnings_list.append(f"{int(degenerate.sum())} degenerate gt normals excluded")
            ok &= ~degenerate
        failures += int((~ok).sum())
        if np.any(ok):
            pred, ref = result.normals[ok], gt[ok]
            metrics["rms_oriented_deg"] = rms_angle_error(pred, ref, oriented=True)
            metrics["rms_unoriented_deg"] = rms_angle_error(pred, ref, oriented=False)
            metrics["flip_fraction"] = flip_fraction(pred, ref)

    if result.curvatures is not None and cloud.gt_curvatures is None:
        warnings_list.append("no ground-truth curvatures; curvature metrics skipped")
    if result.curvatures is not None and cloud.gt_curvatures is not None:
        gt = cloud.gt_curvatures[queries]
        ok = ~np.isnan(result.curvatures).any(axis=1)
        if result.normals is None:
            failures += int((~ok).sum())
        if np.any(ok):
            r1, r2 = curvature_rms(result.curvatures[ok], gt[ok])
            metrics["curv_rms_k1"] = r1
            metrics["curv_rms_k2"] = r2

    return ShapeRecord(stem, base, variant, method, len(queries), metrics,
                       failures, warnings_list)


def evaluate(estimators, dataset_dir, stems=None, seed=0, n_queries=5000) -> EvalReport:
    """Evaluate estimators over a dataset directory.

    Query subsets come from each stem's .pidx file when present, else
    min(n_queries, N) points sampled without replacement with a seed
    derived per (seed, stem): two runs with the same seed are identical.
    """
    if not isinstance(estimators, (list, tuple)):
        estimators = [estimators]
    stems = stems if stems is not None else io.read_manifest(dataset_dir)
    info = io.read_dataset_json(dataset_dir)
    report = EvalReport(seed=seed)
    for stem in stems:
        cloud = io.read_cloud(dataset_dir, stem)
        pidx = io.read_cloud_pidx(dataset_dir, stem)
        if pidx is not None:
            queries = pidx
        else:
            rng_q = derive_rng(seed, "queries", stem)
            count = min(n_queries, len(cloud))
            queries = np.sort(rng_q.choice(len(cloud), size=count, replace=False))
        base, variant = _variant_of(stem, info)
        for est in estimators:
            rng = derive_rng(seed, "estimate", stem, est.name)
            if isinstance(est, PrecomputedEstimator):
                result = est.load(stem, cloud, queries, pidx)
                record = _score(result, cloud, queries, est.name, stem, base, variant)
            else:
                record = evaluate_cloud(est, cloud, queries, rng, stem, base, variant)
            report.records.append(record)
    return report


# ---------------------------------------------------------------------------
# report emission


def emit_report(report: EvalReport, out_dir):
    """Write report.csv (per shape), summary.csv (aggregates), summary.svg."""
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.csv")
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["stem", "base", "variant", "method", "n_queries", "metric",
             "value", "failures"]
        )
        for r in sorted(report.records, key=lambda r: (r.stem, r.method)):
            for metric in METRICS:
                value = r.metrics.get(metric)
                if value is None:
                    continue
                writer.writerow(
                    [r.stem, r.base, r.variant, r.method, r.n_queries, metric,
                     "%.8g" % value, r.failures]
                )

    summary_path = os.path.join(out_dir, "summary.csv")
    aggregates = report.aggregate()
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "category", "metric", "value", "n_shapes"])
        for row in aggregates:
            writer.writerow(
                [row["method"], row["category"], row["metric"],
                 "%.8g" % row["value"], row["n_shapes"]]
            )

    svg_path = os.path.join(out_dir, "summary.svg")
    _write_summary_svg(aggregates, svg_path)
    return report_path, summary_path, svg_path


def _chart_metric(aggregates):
    for metric in ("rms_unoriented_deg", "rms_oriented_deg", "curv_rms_k1"):
        if any(row["metric"] == metric for row in aggregates):
            return metric
    return None


def _write_summary_svg(aggregates, path):
    """Grouped bar chart: one group per category, one bar per method."""
    metric = _chart_metric(aggregates)
    rows = [r for r in aggregates if r["metric"] == metric] if metric else []
    methods = sorted({r["method"] for r in rows})
    categories = [c for c in CATEGORY_ORDER
                  if any(r["category"] == c for r in rows)]
    values = {(r["method"], r["category"]): r["value"] for r in rows}

    width, height = 760, 360
    margin_l, margin_b, margin_t = 60, 70, 30
    plot_w, plot_h = width - margin_l - 20, height - margin_t - margin_b
    vmax = max([v for v in values.values()] + [1e-9])
    palette = ["#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c"]

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        '<style>text{font-family:sans-serif;font-size:11px}</style>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    title = metric if metric else "no data"
    parts.append(f'<text x="{margin_l}" y="18" font-size="13">{saxutils.escape(str(title))}</text>')
    # axes
    x0, y0 = margin_l, margin_t + plot_h
    parts.append(f'<line x1="{x0}" y1="{margin_t}" x2="{x0}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
    for tick in range(5):
        v = vmax * tick / 4
        y = y0 - plot_h * tick / 4
        parts.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')

    if categories and methods:
        group_w = plot_w / len(categories)
        bar_w = min(group_w * 0.8 / len(methods), 40)
        for ci, cat in enumerate(categories):
            gx = x0 + ci * group_w
            for mi, method in enumerate(methods):
                v = values.get((method, cat))
                if v is None:
                    continue
                bh = plot_h * v / vmax
                bx = gx + group_w / 2 + (mi - len(methods) / 2) * bar_w
                parts.append(
                    f'<rect x="{bx:.1f}" y="{y0 - bh:.1f}" width="{bar_w:.1f}" '
                    f'height="{bh:.1f}" fill="{palette[mi % len(palette)]}"/>'
                )
            parts.append(
                f'<text x="{gx + group_w / 2:.1f}" y="{y0 + 16}" text-anchor="middle">'
                f"{saxutils.escape(cat)}</text>"
            )
        for mi, method in enumerate(methods):
            lx = margin_l + mi * 150
            ly = height - 18
            parts.append(
                f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" '
                f'fill="{palette[mi % len(palette)]}"/>'
            )
            parts.append(
                f'<text x="{lx + 16}" y="{ly}">{saxutils.escape(method)}</text>'
            )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
