"""Patch-based neural estimator: forward, analytic backward, inference.

Architecture (per patch): a quaternion spatial transformer rotates the
input points to a canonical pose; a shared per-point stack computes
low-level features g; a second spatial transformer regresses a feature
transform (identity plus a learned matrix) applied to every g; a second
per-point stack computes the point-function values h; sum pooling over
the patch turns them into patch features; a fully connected head
regresses the output. Multi-scale models feed the union of the per-scale
patches through the same point functions and pool each scale separately,
so the pooled feature vector is (number of scales) x (point functions).

Hidden layers use ReLU; head outputs are linear. Padding slots (zero
vectors, i.e. copies of the patch center) run through the network like
any other point; internally all zero rows of a patch are folded into one
weighted row, which is algebraically the same sum.

All learnable state lives in a flat name -> array dict with a canonical
order (see param_names); checkpoints serialize a JSON header line plus
the parameters as little-endian float32 in that order.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

OUTPUT_DIMS = {
    "unoriented_normals": 3,
    "oriented_normals": 3,
    "curvatures": 2,
    "joint": 5,
}

CHECKPOINT_MAGIC = "pointprops-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size model."""

    output: str = "unoriented_normals"
    scales: tuple = (0.05,)
    n_points: int = 500
    point_functions: int = 1024
    g_widths: tuple = (64, 64)
    h_hidden: int = 128
    reg_hidden: tuple = (512, 256)
    stn1_enc: tuple = (64, 128, 1024)
    stn1_head: tuple = (512, 256)
    stn2_enc: tuple = (64, 128, 1024)
    stn2_head: tuple = (512, 256)
    dtype: str = "float32"

    def __post_init__(self):
        if self.output not in OUTPUT_DIMS:
            raise ValueError(f"unknown output spec {self.output!r}")
        if len(self.scales) not in (1, 3):
            raise ValueError(f"scales must have length 1 or 3, got {len(self.scales)}")
        if self.point_functions % len(self.scales):
            raise ValueError("point_functions must divide evenly across scales")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @property
    def out_dim(self):
        return OUTPUT_DIMS[self.output]

    @property
    def n_scales(self):
        return len(self.scales)

    @property
    def feature_dim(self):
        return self.g_widths[-1]

    @property
    def pooled_dim(self):
        return self.n_scales * self.point_functions

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def has_normals(self):
        return self.output in ("unoriented_normals", "oriented_normals", "joint")

    def has_curvatures(self):
        return self.output in ("curvatures", "joint")

    def normal_slice(self):
        return slice(0, 3) if self.has_normals() else None

    def curvature_slice(self):
        if not self.has_curvatures():
            return None
        return slice(3, 5) if self.output == "joint" else slice(0, 2)


def single_scale_config(output="unoriented_normals", **kw):
    return ModelConfig(output=output, scales=(0.05,), point_functions=1024, **kw)


def multi_scale_config(output="unoriented_normals", **kw):
    return ModelConfig(
        output=output, scales=(0.01, 0.03, 0.07), point_functions=3072, **kw
    )


def tiny_config(output="joint", n_points=6, point_functions=8, dtype="float64"):
    """Down-scaled architecture for gradient checks and fast tests."""
    return ModelConfig(
        output=output,
        scales=(0.05,),
        n_points=n_points,
        point_functions=point_functions,
        g_widths=(8, 8),
        h_hidden=16,
        reg_hidden=(16, 8),
        stn1_enc=(8, 16, 32),
        stn1_head=(16, 8),
        stn2_enc=(8, 16, 32),
        stn2_head=(16, 8),
        dtype=dtype,
    )


def _linear_dims(cfg: ModelConfig):
    """Canonical (section, in, out) triples for every linear layer."""
    gdim = cfg.feature_dim
    stacks = [
        ("stn1.enc", [3, *cfg.stn1_enc]),
        ("stn1.head", [cfg.stn1_enc[-1], *cfg.stn1_head, 4]),
        ("g", [3, *cfg.g_widths]),
        ("stn2.enc", [gdim, *cfg.stn2_enc]),
        ("stn2.head", [cfg.stn2_enc[-1], *cfg.stn2_head, gdim * gdim]),
        ("h", [gdim, cfg.h_hidden, cfg.point_functions]),
        ("reg", [cfg.pooled_dim, *cfg.reg_hidden, cfg.out_dim]),
    ]
    out = []
    for section, dims in stacks:
        for i in range(len(dims) - 1):
            out.append((f"{section}{i}", dims[i], dims[i + 1]))
    return out


def param_names(cfg: ModelConfig):
    """Checkpoint parameter order: W then b per layer, layers as in _linear_dims."""
    names = []
    for layer, _, _ in _linear_dims(cfg):
        names.append(layer + ".W")
        names.append(layer + ".b")
    return names


@dataclass
class Model:
    config: ModelConfig
    params: dict

    @property
    def dtype(self):
        return self.config.np_dtype

    def n_parameters(self):
        return sum(p.size for p in self.params.values())


def build_model(cfg: ModelConfig, seed=0) -> Model:
    """Initialize parameters: uniform +-1/sqrt(fan_in), STN heads at identity.

    The final layer of each spatial transformer head is zero-initialized
    with a bias encoding the identity transform (quaternion (1,0,0,0); the
    zero matrix that is added to the identity), so a fresh model applies
    no transform at all.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x706E]))
    dims = _linear_dims(cfg)
    last_of = {}
    for layer, _, _ in dims:
        section = layer.rstrip("0123456789")
        last_of[section] = layer

    params = {}
    for layer, fan_in, fan_out in dims:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        section = layer.rstrip("0123456789")
        if section in ("stn1.head", "stn2.head") and layer == last_of[section]:
            w = np.zeros_like(w)
            b = np.zeros_like(b)
            if section == "stn1.head":
                b[0] = 1.0  # quaternion (1, 0, 0, 0)
        params[layer + ".W"] = w.astype(cfg.np_dtype)
        params[layer + ".b"] = b.astype(cfg.np_dtype)
    return Model(cfg, params)


def zero_grads(model: Model):
    return {k: np.zeros_like(v) for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# batch container


class PatchBatch:
    """Ragged batch of patches, one segment per (patch, scale).

    Rows are valid points grouped contiguously by patch then scale; every
    segment additionally ends with one virtual row (the zero vector) whose
    pooling weight is the number of padded slots, which reproduces the
    padded dense computation exactly up to float summation order.
    """

    def __init__(self, points, weights, seg_lengths, n_patches, n_scales, n_slots):
        self.points = points
        self.weights = weights
        self.seg_lengths = np.asarray(seg_lengths, dtype=np.intp)
        self.n_patches = int(n_patches)
        self.n_scales = int(n_scales)
        self.n_slots = int(n_slots)
        self.seg_starts = np.concatenate(([0], np.cumsum(self.seg_lengths)[:-1]))
        per_patch = self.seg_lengths.reshape(n_patches, n_scales).sum(axis=1)
        self.patch_lengths = per_patch
        self.patch_starts = np.concatenate(([0], np.cumsum(per_patch)[:-1]))
        self.total_rows = int(self.seg_lengths.sum())

    @classmethod
    def from_arrays(cls, segments, n_slots, dtype):
        """segments: nested list [patch][scale] of (m, 3) valid-point arrays."""
        n_patches = len(segments)
        n_scales = len(segments[0]) if n_patches else 1
        rows = []
        weights = []
        seg_lengths = []
        for patch_segs in segments:
            if len(patch_segs) != n_scales:
                raise ValueError("inconsistent scale count across patches")
            for pts in patch_segs:
                pts = np.asarray(pts, dtype=dtype).reshape(-1, 3)
                if len(pts) > n_slots:
                    raise ValueError(
                        f"segment has {len(pts)} points, more than {n_slots} slots"
                    )
                rows.append(pts)
                rows.append(np.zeros((1, 3), dtype=dtype))
                weights.append(np.ones(len(pts), dtype=dtype))
                weights.append(
                    np.asarray([n_slots - len(pts)], dtype=dtype)
                )
                seg_lengths.append(len(pts) + 1)
        points = np.concatenate(rows, axis=0)
        w = np.concatenate(weights)
        return cls(points, w, seg_lengths, n_patches, n_scales, n_slots)

    @classmethod
    def from_dense(cls, batch, cfg: ModelConfig):
        """Dense (B, S, n, 3) or (B, n, 3) padded arrays; zero rows fold away."""
        arr = np.asarray(batch, dtype=cfg.np_dtype)
        if arr.ndim == 3:
            arr = arr[:, None, :, :]
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError(f"expected (B, S, n, 3) points, got {arr.shape}")
        b, s, n, _ = arr.shape
        if s != cfg.n_scales:
            raise ValueError(f"model expects {cfg.n_scales} scales, batch has {s}")
        if n != cfg.n_points:
            raise ValueError(f"model expects {cfg.n_points} points, batch has {n}")
        segments = []
        for i in range(b):
            per_scale = []
            for j in range(s):
                pts = arr[i, j]
                per_scale.append(pts[np.any(pts != 0.0, axis=1)])
            segments.append(per_scale)
        return cls.from_arrays(segments, n, cfg.np_dtype)

    @classmethod
    def from_patches(cls, patches, cfg: ModelConfig):
        """patches: list (per patch) of Patch or list of per-scale Patches."""
        segments = []
        for entry in patches:
            per_scale = entry if isinstance(entry, (list, tuple)) else [entry]
            if len(per_scale) != cfg.n_scales:
                raise ValueError("patch scale count does not match model")
            segs = []
            for p in per_scale:
                if len(p.points) != cfg.n_points:
                    raise ValueError("patch slot count does not match model")
                segs.append(np.asarray(p.points[: p.valid_count], dtype=cfg.np_dtype))
            segments.append(segs)
        return cls.from_arrays(segments, cfg.n_points, cfg.np_dtype)

    # pooling helpers ------------------------------------------------------

    def seg_sum(self, rows):
        weighted = rows * self.weights[:, None]
        return np.add.reduceat(weighted, self.seg_starts, axis=0)

    def patch_sum(self, rows):
        weighted = rows * self.weights[:, None]
        return np.add.reduceat(weighted, self.patch_starts, axis=0)

    def expand_seg(self, per_seg):
        return np.repeat(per_seg, self.seg_lengths, axis=0) * self.weights[:, None]

    def expand_patch(self, per_patch):
        return np.repeat(per_patch, self.patch_lengths, axis=0) * self.weights[:, None]

    def rows_patch_ids(self):
        return np.repeat(np.arange(self.n_patches), self.patch_lengths)


# ---------------------------------------------------------------------------
# primitive layers


def _mlp_forward(params, section, n_layers, x, relu_last):
    pre = []
    acts = [x]
    for i in range(n_layers):
        w = params[f"{section}{i}.W"]
        b = params[f"{section}{i}.b"]
        z = x @ w.T + b
        pre.append(z)
        if i < n_layers - 1 or relu_last:
            x = np.maximum(z, 0.0)
        else:
            x = z
        acts.append(x)
    return x, (pre, acts)


def _mlp_backward(params, section, n_layers, tape, d_out, grads, relu_last):
    pre, acts = tape
    dx = d_out
    for i in reversed(range(n_layers)):
        if i < n_layers - 1 or relu_last:
            dx = dx * (pre[i] > 0)
        grads[f"{section}{i}.W"] += dx.T @ acts[i]
        grads[f"{section}{i}.b"] += dx.sum(axis=0)
        if i > 0:
            dx = dx @ params[f"{section}{i}.W"]
    return dx @ params[f"{section}0.W"]


def quaternion_to_matrix(q):
    """Rotation matrix of a quaternion (w, x, y, z); normalizes internally."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ValueError("degenerate quaternion")
    return _quat_to_matrix_rows((q / norm)[None])[0]


def _quat_to_matrix_rows(qn):
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r = np.empty((len(qn), 3, 3), dtype=qn.dtype)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _quat_matrix_backward(qn, d_r):
    """d(loss)/d(qn) given d(loss)/dR, for unit quaternion rows."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = d_r
    dw = 2 * (
        -g[:, 0, 1] * z + g[:, 0, 2] * y
        + g[:, 1, 0] * z - g[:, 1, 2] * x
        - g[:, 2, 0] * y + g[:, 2, 1] * x
    )
    dx = 2 * (
        g[:, 0, 1] * y + g[:, 0, 2] * z
        + g[:, 1, 0] * y - 2 * g[:, 1, 1] * x - g[:, 1, 2] * w
        + g[:, 2, 0] * z + g[:, 2, 1] * w - 2 * g[:, 2, 2] * x
    )
    dy = 2 * (
        -2 * g[:, 0, 0] * y + g[:, 0, 1] * x + g[:, 0, 2] * w
        + g[:, 1, 0] * x + g[:, 1, 2] * z
        - g[:, 2, 0] * w + g[:, 2, 1] * z - 2 * g[:, 2, 2] * y
    )
    dz = 2 * (
        -2 * g[:, 0, 0] * z - g[:, 0, 1] * w + g[:, 0, 2] * x
        + g[:, 1, 0] * w - 2 * g[:, 1, 1] * z + g[:, 1, 2] * y
        + g[:, 2, 0] * x + g[:, 2, 1] * y
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def _normalize_rows(v, eps=1e-12):
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms = np.maximum(norms, eps)
    return v / norms, norms


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    """Everything backward() needs to replay the forward pass."""

    batch: PatchBatch
    skip_stn1: bool
    skip_stn2: bool
    stn1_enc_tape: tuple = None
    stn1_head_tape: tuple = None
    pooled1: np.ndarray = None
    q: np.ndarray = None
    qn: np.ndarray = None
    qnorm: np.ndarray = None
    rotation: np.ndarray = None
    xrot: np.ndarray = None
    g_tape: tuple = None
    g_out: np.ndarray = None
    stn2_enc_tape: tuple = None
    pooled2: np.ndarray = None
    stn2_head_tape: tuple = None
    transform: np.ndarray = None
    g_transformed: np.ndarray = None
    h_tape: tuple = None
    pooled_features: np.ndarray = None
    reg_tape: tuple = None
    outputs: np.ndarray = None


def forward(model: Model, batch, *, skip_stn1=False, skip_stn2=False):
    """Run the network; returns (raw outputs (B, out_dim), ForwardCache).

    batch may be a PatchBatch or a dense padded array (B, S, n, 3) /
    (B, n, 3). Raw outputs are in the rotated patch frame; use predict()
    or training losses to map them back to world quantities.
    """
    cfg = model.config
    p = model.params
    if not isinstance(batch, PatchBatch):
        batch = PatchBatch.from_dense(batch, cfg)
    cache = ForwardCache(batch=batch, skip_stn1=skip_stn1, skip_stn2=skip_stn2)
    x = batch.points
    B = batch.n_patches

    # --- quaternion spatial transformer
    if skip_stn1:
        rot = np.tile(np.eye(3, dtype=x.dtype), (B, 1, 1))
        cache.rotation = rot
        xrot = x.copy()
    else:
        enc, tape = _mlp_forward(p, "stn1.enc", 3, x, relu_last=True)
        cache.stn1_enc_tape = tape
        pooled = batch.patch_sum(enc)
        cache.pooled1 = pooled
        q, head_tape = _mlp_forward(p, "stn1.head", 3, pooled, relu_last=False)
        cache.stn1_head_tape = head_tape
        qnorm = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(qnorm < 1e-12):
            raise ValueError("degenerate quaternion")
        qn = q / qnorm
        rot = _quat_to_matrix_rows(qn)
        cache.q, cache.qn, cache.qnorm, cache.rotation = q, qn, qnorm, rot
        xrot = np.empty_like(x)
        for b in range(B):
            s, e = batch.patch_starts[b], batch.patch_starts[b] + batch.patch_lengths[b]
            xrot[s:e] = x[s:e] @ rot[b].T
    cache.xrot = xrot

    # --- first per-point stack
    g, g_tape = _mlp_forward(p, "g", 2, xrot, relu_last=True)
    cache.g_tape = g_tape
    cache.g_out = g

    # --- feature spatial transformer
    if skip_stn2:
        transform = np.tile(np.eye(cfg.feature_dim, dtype=x.dtype), (B, 1, 1))
        cache.transform = transform
        gt = g.copy()
    else:
        enc2, tape2 = _mlp_forward(p, "stn2.enc", 3, g, relu_last=True)
        cache.stn2_enc_tape = tape2
        pooled2 = batch.patch_sum(enc2)
        cache.pooled2 = pooled2
        a_flat, head2_tape = _mlp_forward(p, "stn2.head", 3, pooled2, relu_last=False)
        cache.stn2_head_tape = head2_tape
        d = cfg.feature_dim
        transform = a_flat.reshape(B, d, d) + np.eye(d, dtype=x.dtype)
        cache.transform = transform
        gt = np.empty_like(g)
        for b in range(B):
            s, e = batch.patch_starts[b], batch.patch_starts[b] + batch.patch_lengths[b]
            gt[s:e] = g[s:e] @ transform[b].T
    cache.g_transformed = gt

    # --- point functions and per-scale sum pooling
    h, h_tape = _mlp_forward(p, "h", 2, gt, relu_last=True)
    cache.h_tape = h_tape
    pooled_seg = batch.seg_sum(h)  # (B*S, k)
    features = pooled_seg.reshape(B, cfg.n_scales * cfg.point_functions)
    cache.pooled_features = features

    # --- regression head
    out, reg_tape = _mlp_forward(p, "reg", 3, features, relu_last=False)
    cache.reg_tape = reg_tape
    cache.outputs = out
    return out, cache


def backward(model: Model, cache: ForwardCache, d_out, d_rotation=None):
    """Analytic parameter gradients for a forward pass.

    d_out is the gradient at the raw outputs; d_rotation optionally adds
    a gradient on the rotation matrices (used when the loss consumes the
    inverse rotation, as the normal losses do).
    """
    cfg = model.config
    p = model.params
    batch = cache.batch
    B = batch.n_patches
    grads = zero_grads(model)
    d_out = np.asarray(d_out, dtype=batch.points.dtype)

    # regression head
    d_features = _mlp_backward(p, "reg", 3, cache.reg_tape, d_out, grads,
                               relu_last=False)
    d_seg = d_features.reshape(B * cfg.n_scales, cfg.point_functions)

    # pooling
    d_h = batch.expand_seg(d_seg)

    # point functions
    d_gt = _mlp_backward(p, "h", 2, cache.h_tape, d_h, grads, relu_last=True)

    # feature transformer
    if cache.skip_stn2:
        d_g = d_gt
    else:
        d_g = np.empty_like(d_gt)
        d_transform = np.empty_like(cache.transform)
        g = cache.g_out
        for b in range(B):
            s, e = batch.patch_starts[b], batch.patch_starts[b] + batch.patch_lengths[b]
            d_g[s:e] = d_gt[s:e] @ cache.transform[b]
            d_transform[b] = d_gt[s:e].T @ g[s:e]
        d_a = d_transform.reshape(B, cfg.feature_dim * cfg.feature_dim)
        d_pooled2 = _mlp_backward(p, "stn2.head", 3, cache.stn2_head_tape, d_a,
                                  grads, relu_last=False)
        d_enc2 = batch.expand_patch(d_pooled2)
        d_g = d_g + _mlp_backward(p, "stn2.enc", 3, cache.stn2_enc_tape, d_enc2,
                                  grads, relu_last=True)

    # first per-point stack
    d_xrot = _mlp_backward(p, "g", 2, cache.g_tape, d_g, grads, relu_last=True)

    # quaternion transformer
    if not cache.skip_stn1:
        d_rot = np.zeros_like(cache.rotation)
        x = batch.points
        for b in range(B):
            s, e = batch.patch_starts[b], batch.patch_starts[b] + batch.patch_lengths[b]
            d_rot[b] = d_xrot[s:e].T @ x[s:e]
        if d_rotation is not None:
            d_rot = d_rot + d_rotation
        d_qn = _quat_matrix_backward(cache.qn, d_rot)
        # through normalization q -> q/|q|
        dot = np.einsum("bi,bi->b", cache.qn, d_qn)[:, None]
        d_q = (d_qn - cache.qn * dot) / cache.qnorm
        d_pooled1 = _mlp_backward(p, "stn1.head", 3, cache.stn1_head_tape, d_q,
                                  grads, relu_last=False)
        d_enc1 = batch.expand_patch(d_pooled1)
        _mlp_backward(p, "stn1.enc", 3, cache.stn1_enc_tape, d_enc1, grads,
                      relu_last=True)
    elif d_rotation is not None:
        raise ValueError("rotation gradient given but STN1 was skipped")
    return grads


# ---------------------------------------------------------------------------
# output mapping


def transform_outputs(raw, rotation, radius_abs, cfg: ModelConfig):
    """Map raw head outputs to world-frame properties.

    Normals: unit-normalized, then rotated by the inverse (transpose) of
    the patch rotation. Curvature values: divided by the patch radius to
    undo the 1/r coordinate scaling (raw outputs live in patch units).
    """
    result = {}
    ns = cfg.normal_slice()
    if ns is not None:
        n_hat, _ = _normalize_rows(raw[:, ns])
        result["normals"] = np.einsum("bi,bij->bj", n_hat, rotation)
    cs = cfg.curvature_slice()
    if cs is not None:
        r = np.asarray(radius_abs, dtype=raw.dtype).reshape(-1)
        if r.size == 1:
            r = np.full(len(raw), float(r[0]), dtype=raw.dtype)
        result["curvatures"] = raw[:, cs] / r[:, None]
    return result


def predict(model: Model, batch, radius_abs, *, cache=None):
    """Inference entry point: world-frame properties for a patch batch.

    radius_abs is the absolute patch radius (scalar or per patch); for
    multi-scale models pass the reference radius used when the training
    targets were assembled (largest scale by convention).
    """
    if cache is None:
        raw, cache = forward(model, batch)
    else:
        raw = cache.outputs
    return transform_outputs(raw, cache.rotation, radius_abs, model.config)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, metadata=None):
    """JSON header line + little-endian float32 blob in canonical order."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "param_order": param_names(model.config),
        "metadata": metadata or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in param_names(model.config):
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Load (Model, metadata); validates header and blob size."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"bad checkpoint header in {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    raw_cfg = dict(header["config"])
    for key in ("scales", "g_widths", "reg_hidden", "stn1_enc", "stn1_head",
                "stn2_enc", "stn2_head"):
        raw_cfg[key] = tuple(raw_cfg[key])
    cfg = ModelConfig(**raw_cfg)
    names = param_names(cfg)
    if header.get("param_order") != names:
        raise ValueError(f"{path}: parameter order does not match architecture")
    sizes = []
    shapes = {}
    for layer, fan_in, fan_out in _linear_dims(cfg):
        shapes[layer + ".W"] = (fan_out, fan_in)
        shapes[layer + ".b"] = (fan_out,)
    expected = sum(int(np.prod(shapes[n])) for n in names) * 4
    if len(blob) != expected:
        raise ValueError(
            f"{path}: blob has {len(blob)} bytes, architecture needs {expected}"
        )
    params = {}
    offset = 0
    for name in names:
        shape = shapes[name]
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        params[name] = arr.reshape(shape).astype(cfg.np_dtype)
    model = Model(cfg, params)
    return model, header.get("metadata", {})
