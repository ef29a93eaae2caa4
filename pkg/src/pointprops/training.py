"""Losses, SGD with momentum, the epoch loop, and the gradient checker.

Loss conventions:

    oriented normals    mean ||n_hat - t||^2 over the batch
    unoriented normals  mean min(||n_hat - t||^2, ||n_hat + t||^2)
    curvature           rectified error L = |(k_pred - k)/max(|k|, 1)|,
                        L^2 summed over both principal values, batch mean;
                        predictions and targets in patch units (k * r)
    joint               normal loss + lambda * curvature loss

Normal predictions are unit-normalized and rotated back to the world
frame before the loss, so gradients flow through both the output path
and the quaternion transformer's rotation.
"""

import csv
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import io
from .core import bbox_diagonal, build_index, extract_patch
from .network import (
    Model,
    ModelConfig,
    PatchBatch,
    backward,
    build_model,
    forward,
    multi_scale_config,
    param_names,
    save_checkpoint,
    single_scale_config,
    tiny_config,
    zero_grads,
    _normalize_rows,
)
from .util import derive_rng

ARCH_PRESETS = {"ss": single_scale_config, "ms": multi_scale_config}


# ---------------------------------------------------------------------------
# losses (reference forms; the fused training loss reuses the same formulas)


def loss_normal_oriented(pred, target):
    """Mean squared Euclidean distance; pred must be unit-normalized."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    return float(np.mean(np.sum((pred - target) ** 2, axis=1)))


def loss_normal_unoriented(pred, target):
    """Flip-invariant squared distance: the better of +-target counts."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    plus = np.sum((pred - target) ** 2, axis=1)
    minus = np.sum((pred + target) ** 2, axis=1)
    return float(np.mean(np.minimum(plus, minus)))


def rectified_curvature_error(pred, target):
    """L = |(pred - target)| / max(|target|, 1), elementwise."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return np.abs(pred - target) / np.maximum(np.abs(target), 1.0)


def loss_curvature(pred, target):
    """Squared rectified error summed over (k1, k2), mean over batch."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    return float(np.mean(np.sum(rectified_curvature_error(pred, target) ** 2, axis=1)))


def loss_joint(pred, target, lam=1.0, oriented=False):
    """Combined loss on (normal 3, k1, k2) rows."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    normal_loss = (loss_normal_oriented if oriented else loss_normal_unoriented)(
        pred[:, :3], target[:, :3]
    )
    return normal_loss + lam * loss_curvature(pred[:, 3:5], target[:, 3:5])


# ---------------------------------------------------------------------------
# fused training loss with gradients


def training_loss(raw, rotation, targets, cfg: ModelConfig, lam=1.0):
    """Loss and gradients for raw network outputs.

    Returns (loss, d_raw, d_rotation). targets holds "normals" (world,
    unit) and/or "curvatures" (patch units, k * r_ref) as the output spec
    requires.

    The normal term is the squared Euclidean distance between the raw
    output (rotated back to the world frame) and the unit target, without
    normalizing the prediction first. Normalizing inside the loss makes it
    norm-invariant: the output norm then drifts freely while the direction
    gradient is damped by 1/|raw|, and training stalls. Regressing the raw
    vector against unit targets anchors the norm and trains stably;
    inference still unit-normalizes (see predict).
    """
    B = len(raw)
    d_raw = np.zeros_like(raw)
    d_rotation = None
    loss = 0.0

    ns = cfg.normal_slice()
    if ns is not None:
        t = np.asarray(targets["normals"], dtype=raw.dtype)
        n_raw = raw[:, ns]
        n_world = np.einsum("bi,bij->bj", n_raw, rotation)
        if cfg.output == "oriented_normals":
            t_eff = t
        else:
            sign = np.where(np.einsum("bi,bi->b", n_world, t) >= 0, 1.0, -1.0)
            t_eff = t * sign[:, None]
        diff = n_world - t_eff
        loss += float(np.mean(np.sum(diff**2, axis=1)))
        d_nw = (2.0 / B) * diff
        d_raw[:, ns] = np.einsum("bj,bij->bi", d_nw, rotation)
        d_rotation = np.einsum("bi,bj->bij", n_raw, d_nw)

    cs = cfg.curvature_slice()
    if cs is not None:
        kt = np.asarray(targets["curvatures"], dtype=raw.dtype)
        kp = raw[:, cs]
        den = np.maximum(np.abs(kt), 1.0)
        diff = (kp - kt) / den
        scale = lam if cfg.output == "joint" else 1.0
        loss += scale * float(np.mean(np.sum(diff**2, axis=1)))
        d_raw[:, cs] = scale * (2.0 / B) * diff / den

    return loss, d_raw, d_rotation


# ---------------------------------------------------------------------------
# optimizer


class SgdState:
    """Per-parameter velocity buffers, zero-initialized."""

    def __init__(self, model: Model):
        self.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}


def sgd_step(params, grads, state: SgdState, lr, momentum):
    """v <- momentum * v - lr * g;  w <- w + v  (in place)."""
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"divergence detected: non-finite gradient for {name}")
        v = state.velocity[name]
        v *= momentum
        v -= lr * g
        w += v


# ---------------------------------------------------------------------------
# batch assembly


class TrainingCloud:
    """A labeled cloud plus the per-scale absolute radii used for patches."""

    def __init__(self, cloud, scales, n_points):
        self.cloud = cloud
        self.index = build_index(cloud)
        diag = bbox_diagonal(cloud)
        self.radii = [s * diag for s in scales]
        self.r_ref = max(scales) * diag  # curvature scale reference
        self.n_points = n_points


def curvature_target(cloud, center_idx, r_ref):
    """Patch-unit curvature target (k1 * r, k2 * r) for one center."""
    return cloud.gt_curvatures[center_idx] * r_ref


def assemble_batch(train_clouds, items, cfg: ModelConfig, rng):
    """Extract patches and targets for (cloud_id, center_index) items.

    Returns (PatchBatch, targets dict, r_ref array). Consumes the rng for
    patch subsampling in item order, so results are seed-deterministic.
    """
    segments = []
    normals = []
    curvatures = []
    r_refs = []
    for cloud_id, center in items:
        tc = train_clouds[cloud_id]
        per_scale = []
        for r in tc.radii:
            patch = extract_patch(tc.cloud, tc.index, int(center), r,
                                  cfg.n_points, rng)
            per_scale.append(patch.points[: patch.valid_count])
        segments.append(per_scale)
        r_refs.append(tc.r_ref)
        if cfg.has_normals():
            normals.append(tc.cloud.gt_normals[center])
        if cfg.has_curvatures():
            curvatures.append(curvature_target(tc.cloud, center, tc.r_ref))
    batch = PatchBatch.from_arrays(segments, cfg.n_points, cfg.np_dtype)
    targets = {}
    if normals:
        targets["normals"] = np.asarray(normals, dtype=cfg.np_dtype)
    if curvatures:
        targets["curvatures"] = np.asarray(curvatures, dtype=cfg.np_dtype)
    return batch, targets, np.asarray(r_refs)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    arch: str = "ss"
    output: str = "unoriented_normals"
    batch_size: int = 64
    learning_rate: float = 1e-4
    momentum: float = 0.9
    patches_per_cloud: int = 1000
    max_epochs: int = 2000
    n_points: int = 500
    lambda_joint: float = 1.0
    seed: int = 0
    checkpoint_every: int = 50
    convergence_window: int = 50
    convergence_tol: float = 1e-4
    dtype: str = "float32"

    def __post_init__(self):
        if self.arch not in ARCH_PRESETS:
            raise ValueError(f"arch must be one of {sorted(ARCH_PRESETS)}")
        for name in ("batch_size", "learning_rate", "patches_per_cloud",
                     "max_epochs", "n_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_joint < 0:
            raise ValueError("lambda_joint must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ARCH_PRESETS[self.arch](
            output=self.output, n_points=self.n_points, dtype=self.dtype
        )


def required_attributes(output):
    need_n = output in ("unoriented_normals", "oriented_normals", "joint")
    need_c = output in ("curvatures", "joint")
    return need_n, need_c


def load_training_clouds(dataset_dir, cfg: TrainConfig, stems=None):
    """Read training clouds with the ground truth the output spec needs."""
    need_n, need_c = required_attributes(cfg.output)
    clouds = []
    stems = stems if stems is not None else io.read_manifest(dataset_dir)
    mcfg = cfg.model_config()
    for stem in stems:
        cloud = io.read_cloud(dataset_dir, stem, normals=need_n or "auto",
                              curvatures=need_c or "auto")
        clouds.append(TrainingCloud(cloud, mcfg.scales, cfg.n_points))
    return stems, clouds


def train(dataset_dir, cfg: TrainConfig, out_dir, stems=None, log_every=10,
          quiet=False):
    """Train a model on a dataset directory; returns a result summary.

    Per epoch, patches_per_cloud random centers are drawn from every
    training cloud, globally shuffled so batches mix shapes, and consumed
    in minibatches. Checkpoints: periodic, best (lowest epoch loss), and
    final. Deterministic for a fixed seed when run single-threaded.
    """
    os.makedirs(out_dir, exist_ok=True)
    stems, clouds = load_training_clouds(dataset_dir, cfg, stems)
    mcfg = cfg.model_config()
    model = build_model(mcfg, seed=derive_rng(cfg.seed, "init").integers(2**31))
    state = SgdState(model)
    rng = derive_rng(cfg.seed, "train")

    log_path = os.path.join(out_dir, "progress.csv")
    losses = []
    best_loss = np.inf
    best_params = None
    stopped = None
    with open(log_path, "w", newline="") as log_fh:
        log = csv.writer(log_fh)
        log.writerow(["epoch", "mean_loss", "wall_time_s"])
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            items = []
            for cid, tc in enumerate(clouds):
                centers = rng.integers(0, len(tc.cloud), size=cfg.patches_per_cloud)
                items.extend((cid, int(c)) for c in centers)
            order = rng.permutation(len(items))
            total_loss = 0.0
            for start in range(0, len(items), cfg.batch_size):
                chunk = [items[i] for i in order[start : start + cfg.batch_size]]
                batch, targets, _ = assemble_batch(clouds, chunk, mcfg, rng)
                raw, cache = forward(model, batch)
                loss, d_raw, d_rot = training_loss(raw, cache.rotation, targets,
                                                   mcfg, cfg.lambda_joint)
                grads = backward(model, cache, d_raw, d_rot)
                sgd_step(model.params, grads, state, cfg.learning_rate, cfg.momentum)
                total_loss += loss * len(chunk)
            mean_loss = total_loss / len(items)
            losses.append(mean_loss)
            log.writerow([epoch, f"{mean_loss:.8g}", f"{time.perf_counter() - t0:.3f}"])
            log_fh.flush()
            if not quiet and (epoch % log_every == 0 or epoch == 1):
                print(f"epoch {epoch:5d}  loss {mean_loss:.6f}")
            if mean_loss < best_loss:
                best_loss = mean_loss
                best_params = {k: v.copy() for k, v in model.params.items()}
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"model_ep{epoch:05d}.ckpt"),
                    model, _metadata(cfg, stems, epoch, mean_loss, best_loss),
                )
            w = cfg.convergence_window
            if len(losses) > w:
                prev = losses[-w - 1]
                if (prev - losses[-1]) / max(abs(prev), 1e-12) < cfg.convergence_tol:
                    stopped = epoch
                    break

    final_epoch = len(losses)
    meta = _metadata(cfg, stems, final_epoch, losses[-1], best_loss, stopped)
    final_path = os.path.join(out_dir, "model_final.ckpt")
    save_checkpoint(final_path, model, meta)
    best_path = os.path.join(out_dir, "model_best.ckpt")
    save_checkpoint(best_path, Model(mcfg, best_params), meta)
    if not quiet:
        print(f"final loss {losses[-1]:.6f} (best {best_loss:.6f}) "
              f"after {final_epoch} epochs")
    return {
        "final_checkpoint": final_path,
        "best_checkpoint": best_path,
        "log": log_path,
        "epochs": final_epoch,
        "final_loss": losses[-1],
        "best_loss": best_loss,
        "converged_at": stopped,
    }


def _metadata(cfg, stems, epoch, loss, best_loss, stopped=None):
    return {
        "train_config": asdict(cfg),
        "training_stems": list(stems),
        "epochs_trained": int(epoch),
        "final_loss": float(loss),
        "best_loss": float(best_loss),
        "converged_at": stopped,
    }


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    per_layer: dict
    max_rel_error: float
    n_parameters: int

    def rows(self):
        return sorted(self.per_layer.items())


def _gradcheck_problem_candidate(cfg: ModelConfig, rng):
    # two patches: one full, one padded, first row always the center zero
    counts = [cfg.n_points, max(cfg.n_points // 2, 1)]
    segments = []
    for c in counts:
        pts = rng.normal(0.0, 0.45, size=(c, 3))
        pts[0] = 0.0
        segments.append([pts for _ in range(cfg.n_scales)])
    batch = PatchBatch.from_arrays(segments, cfg.n_points, cfg.np_dtype)
    targets = {}
    if cfg.has_normals():
        t = rng.normal(size=(2, 3))
        targets["normals"] = (t / np.linalg.norm(t, axis=1, keepdims=True)).astype(
            cfg.np_dtype
        )
    if cfg.has_curvatures():
        targets["curvatures"] = rng.normal(0.0, 0.6, size=(2, 2)).astype(cfg.np_dtype)
    return batch, targets


def _kink_margin(cache, targets):
    """Distance of the forward pass from its nearest non-smooth point.

    Covers every ReLU pre-activation and the flip branch of the
    unoriented normal loss; finite differences are only trustworthy when
    no perturbation can cross one of these.
    """
    margins = []
    relu_tapes = (
        (cache.stn1_enc_tape, True), (cache.g_tape, True),
        (cache.stn2_enc_tape, True), (cache.h_tape, True),
        (cache.stn1_head_tape, False), (cache.stn2_head_tape, False),
        (cache.reg_tape, False),
    )
    for tape, relu_last in relu_tapes:
        if tape is None:
            continue
        pres = tape[0] if relu_last else tape[0][:-1]
        for z in pres:
            if z.size:
                margins.append(float(np.min(np.abs(z))))
    if "normals" in targets:
        n_hat, _ = _normalize_rows(cache.outputs[:, :3])
        n_world = np.einsum("bi,bij->bj", n_hat, cache.rotation)
        margins.append(float(np.min(np.abs(
            np.einsum("bi,bi->b", n_world, np.asarray(targets["normals"]))
        ))))
    return min(margins) if margins else np.inf


def _gradcheck_problem(cfg: ModelConfig, seed, eps, attempts=50):
    """Draw a (model, problem) pair whose kinks are safely out of eps reach.

    The model is nudged off its identity-initialized state so every path
    carries gradient (zero STN head weights would otherwise mask their
    encoders); nudge and data are redrawn together until no ReLU or loss
    branch sits within finite-difference range of its switch point.
    """
    margin_needed = max(20.0 * eps, 1e-4)
    init_seed = derive_rng(seed, "gradcheck-init").integers(2**31)
    for attempt in range(attempts):
        model = build_model(cfg, seed=init_seed)
        noise = derive_rng(seed, "gradcheck-noise", attempt)
        for arr in model.params.values():
            arr += noise.uniform(-0.05, 0.05, size=arr.shape)
        rng = derive_rng(seed, "gradcheck", attempt)
        batch, targets = _gradcheck_problem_candidate(cfg, rng)
        _, cache = forward(model, batch)
        if _kink_margin(cache, targets) > margin_needed:
            return model, batch, targets
    raise RuntimeError("could not find a kink-free gradcheck problem")


def gradcheck(cfg: ModelConfig = None, seed=0, eps=1e-5, lam=1.0,
              corrupt_param=None) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    Runs the full training loss (normals and/or curvature) on a small
    random problem in the config's dtype (use float64 for meaningful
    bounds). The per-entry relative error uses a floored denominator,
    max(|analytic|, |numeric|, floor): central differences at eps carry
    rounding noise of roughly |loss| * 1e-16 / eps, so gradient entries
    far below that are unresolvable no matter how exact the backward pass
    is. The floor combines that noise scale with a fraction of the
    layer's largest gradient; a wrong formula still shows up at the
    layer's own scale (see the corrupt_param negative control).

    corrupt_param deliberately perturbs one analytic gradient; it exists
    so tests can verify the check actually detects errors.
    """
    cfg = cfg or tiny_config()
    model, batch, targets = _gradcheck_problem(cfg, seed, eps)

    def loss_of(m):
        raw, cache = forward(m, batch)
        loss, _, _ = training_loss(raw, cache.rotation, targets, cfg, lam)
        return loss

    raw, cache = forward(model, batch)
    _, d_raw, d_rot = training_loss(raw, cache.rotation, targets, cfg, lam)
    grads = backward(model, cache, d_raw, d_rot)
    if corrupt_param is not None:
        grads[corrupt_param] = grads[corrupt_param] + 0.5

    sections = {}
    for name in param_names(cfg):
        section = ".".join(name.split(".")[:-1]).rstrip("0123456789")
        sections.setdefault(section, []).append(name)

    base_loss = abs(loss_of(model))
    noise_floor = 1e-4 * max(1.0, base_loss)
    per_layer = {}
    n_params = 0
    for section, names in sections.items():
        layer_max = max(np.max(np.abs(grads[n])) for n in names)
        floor = noise_floor + 1e-3 * layer_max
        worst = 0.0
        for name in names:
            flat = model.params[name].reshape(-1)
            analytic = grads[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_of(model)
                flat[i] = orig - eps
                down = loss_of(model)
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                err = abs(analytic[i] - numeric) / max(
                    abs(analytic[i]), abs(numeric), floor
                )
                if err > worst:
                    worst = err
                n_params += 1
        per_layer[section] = worst
    return GradcheckReport(per_layer, max(per_layer.values()), n_params)
