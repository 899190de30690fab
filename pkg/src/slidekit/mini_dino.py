"""Desk-scale DINO-style self-distillation.

A student MLP is trained to match a centered, temperature-sharpened EMA
teacher across multi-crop views. The backbone is deliberately a small
analytically-differentiated MLP rather than a ViT; the distillation
mechanism (multi-crop, centering, sharpening, EMA) is what matters here.
Production-scale hyperparameters are kept as the PAPER_* named constants.

Optionally every source patch is Macenko-normalized once, with
probability 1.0, before view generation; normalization consumes no
randomness, so enabling it leaves the augmentation rng stream unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, SlidekitError
from .slide_pipeline import bilinear_resize_array
from .stain_norm import (
    DegenerateStains,
    InsufficientTissue,
    NormalizationTarget,
    RgbPatch,
    normalize_patch,
)

# production-scale reference values (not desk defaults)
PAPER_BATCH_SIZE = 5120
PAPER_BASE_LR = 0.005
PAPER_WARMUP_ITERATIONS = 1000
PAPER_EPOCHS = 10
PAPER_GLOBAL_VIEW_SIZE = 256
PAPER_LOCAL_VIEW_SIZE = 96
PAPER_N_LOCAL_CROPS = 8

VIEW_MEAN = 0.5
VIEW_STD = 0.25
MAX_BATCH_DROP_FRACTION = 0.10


@dataclass
class DinoConfig:
    """Desk-scale defaults; temperatures/momenta follow standard DINO."""

    n_local_crops: int = PAPER_N_LOCAL_CROPS
    global_view_size: int = 32
    local_view_size: int = 12
    encoder_input_size: int = 16
    hidden_sizes: tuple = (64, 32)
    n_prototypes: int = 32
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    sgd_momentum: float = 0.9
    batch_size: int = 32
    total_iterations: int = 300
    warmup_iterations: int = 30
    base_lr: float = 0.02
    global_crop_scale: tuple = (0.4, 1.0)
    local_crop_scale: tuple = (0.05, 0.4)
    macenko_enabled: bool = False
    macenko_target: NormalizationTarget | None = None

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be positive")
        for m in (self.ema_momentum, self.center_momentum):
            if not 0 <= m < 1:
                raise ValueError("momenta must lie in [0, 1)")
        if self.n_local_crops < 0:
            raise ValueError("n_local_crops must be >= 0")
        if self.macenko_enabled and self.macenko_target is None:
            raise ValueError("macenko_enabled requires a macenko_target")

    @property
    def input_dim(self) -> int:
        return self.encoder_input_size * self.encoder_input_size * 3

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_dim, *self.hidden_sizes, self.n_prototypes)


@dataclass
class EncoderParams:
    """Weights/biases of the MLP encoder; last layer projects to prototypes."""

    weights: list  # of (fan_in, fan_out) float64 arrays
    biases: list  # of (fan_out,) float64 arrays

    def copy(self) -> "EncoderParams":
        return EncoderParams(weights=[w.copy() for w in self.weights],
                             biases=[b.copy() for b in self.biases])


@dataclass
class TeacherStudentState:
    student: EncoderParams
    teacher: EncoderParams
    center: np.ndarray  # (K,)
    step: int = 0


@dataclass(frozen=True)
class ViewBatch:
    """2 global + n local augmented, standardized views of one patch."""

    global_views: list  # of (S, S, 3) float64
    local_views: list  # of (s, s, 3) float64


def init_encoder(layer_sizes: tuple, rng: np.random.Generator) -> EncoderParams:
    """Glorot-uniform init: U(+-sqrt(6 / (fan_in + fan_out)))."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases)


def encoder_forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass: tanh hidden layers, linear prototype head.

    Returns (logits, caches); caches hold the layer inputs needed for
    encoder_backward. Accepts (B, in_dim) or a single (in_dim,) vector.
    """
    single = x.ndim == 1
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != params.weights[0].shape[0]:
        raise ShapeMismatch(
            f"input dim {a.shape[1]} != encoder fan-in {params.weights[0].shape[0]}"
        )
    caches = []
    n_layers = len(params.weights)
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        caches.append((a, z))
        a = z if li == n_layers - 1 else np.tanh(z)
    logits = a[0] if single else a
    return logits, caches


def encoder_features(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations (pre-prototype features)."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = np.tanh(a @ w + b)
    return a


def encoder_backward(params: EncoderParams, caches: list,
                     dlogits: np.ndarray) -> tuple[list, list]:
    """Gradients of a scalar loss w.r.t. all weights and biases."""
    dlogits = np.atleast_2d(dlogits)
    n_layers = len(params.weights)
    dws = [None] * n_layers
    dbs = [None] * n_layers
    delta = dlogits
    for li in range(n_layers - 1, -1, -1):
        a_in, z = caches[li]
        if li != n_layers - 1:
            delta = delta * (1.0 - np.tanh(z) ** 2)
        dws[li] = a_in.T @ delta
        dbs[li] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ params.weights[li].T
    return dws, dbs


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def dino_loss(student_logits: list, teacher_logits: list, student_temp: float,
              teacher_temp: float, center: np.ndarray) -> tuple[float, list]:
    """Teacher-student cross-entropy over view pairs.

    Teacher targets softmax((t - center) / teacher_temp) are constants;
    the loss averages -sum target * log_softmax(s / student_temp) over all
    (teacher global view g, student view v) pairs with v != g, and over
    the batch. Returns (loss, per-view gradients w.r.t. student logits).
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise ValueError("temperatures must be positive")
    n_views = len(student_logits)
    n_global = len(teacher_logits)
    batch = student_logits[0].shape[0]
    n_pairs = n_global * (n_views - 1)
    targets = [_softmax((t - center[None, :]) / teacher_temp) for t in teacher_logits]
    loss = 0.0
    grads = [np.zeros_like(s) for s in student_logits]
    weight = 1.0 / (n_pairs * batch)
    for g, target in enumerate(targets):
        for v, s in enumerate(student_logits):
            if v == g:
                continue
            logp = _log_softmax(s / student_temp)
            loss += -np.sum(target * logp) * weight
            grads[v] += (_softmax(s / student_temp) - target) * (weight / student_temp)
    return float(loss), grads


def ema_update(state: TeacherStudentState, momentum: float) -> TeacherStudentState:
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for tw, sw in zip(state.teacher.weights, state.student.weights):
        tw *= momentum
        tw += (1.0 - momentum) * sw
    for tb, sb in zip(state.teacher.biases, state.student.biases):
        tb *= momentum
        tb += (1.0 - momentum) * sb
    return state


def center_update(center: np.ndarray, batch_teacher_logits: np.ndarray,
                  momentum: float) -> np.ndarray:
    """center <- m_c * center + (1 - m_c) * batch mean of teacher logits."""
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    mean = np.asarray(batch_teacher_logits, dtype=np.float64).reshape(
        -1, center.shape[0]).mean(axis=0)
    return momentum * center + (1.0 - momentum) * mean


def lr_schedule(step: int, cfg: DinoConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at total_iterations."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_iterations > 0 and step < cfg.warmup_iterations:
        return cfg.base_lr * step / cfg.warmup_iterations
    span = max(cfg.total_iterations - cfg.warmup_iterations, 1)
    t = min(step - cfg.warmup_iterations, span)
    return 0.5 * cfg.base_lr * (1.0 + np.cos(np.pi * t / span))


def _to_unit(patch: RgbPatch) -> np.ndarray:
    return patch.pixels.astype(np.float64) / 255.0


def _random_resized_crop(img: np.ndarray, out_size: int, scale: tuple,
                         rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    area_frac = rng.uniform(scale[0], scale[1])
    aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0)
    target_area = area_frac * h * w
    cw = int(np.clip(round(np.sqrt(target_area * aspect)), 1, w))
    ch = int(np.clip(round(np.sqrt(target_area / aspect)), 1, h))
    x = int(rng.integers(0, w - cw + 1))
    y = int(rng.integers(0, h - ch + 1))
    return bilinear_resize_array(img[y:y + ch, x:x + cw], out_size, out_size)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    diff = mx - mn
    hue = np.zeros_like(mx)
    safe = diff > 0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rm = safe & (mx == r)
    gm = safe & (mx == g) & ~rm
    bm = safe & ~rm & ~gm
    hue[rm] = ((g - b)[rm] / diff[rm]) % 6.0
    hue[gm] = (b - r)[gm] / diff[gm] + 2.0
    hue[bm] = (r - g)[bm] / diff[bm] + 4.0
    hue /= 6.0
    sat = np.divide(diff, mx, out=np.zeros_like(mx), where=mx > 0)
    return np.stack([hue, sat, mx], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    out = np.empty_like(hsv)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for idx, (cr, cg, cb) in enumerate(choices):
        m = i == idx
        out[..., 0][m] = cr[m]
        out[..., 1][m] = cg[m]
        out[..., 2][m] = cb[m]
    return out


def _color_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation factors +-0.4, hue shift +-0.1."""
    fb = rng.uniform(0.6, 1.4)
    fc = rng.uniform(0.6, 1.4)
    fs = rng.uniform(0.6, 1.4)
    dh = rng.uniform(-0.1, 0.1)
    img = np.clip(img * fb, 0.0, 1.0)
    gray = img @ np.array([0.299, 0.587, 0.114])
    img = np.clip(img * fc + gray.mean() * (1.0 - fc), 0.0, 1.0)
    img = np.clip(img * fs + gray[..., None] * (1.0 - fs), 0.0, 1.0)
    hsv = _rgb_to_hsv(img)
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)


def _make_view(img: np.ndarray, out_size: int, scale: tuple,
               rng: np.random.Generator) -> np.ndarray:
    view = _random_resized_crop(img, out_size, scale, rng)
    if rng.uniform() < 0.5:
        view = view[:, ::-1, :].copy()
    if rng.uniform() < 0.8:
        view = _color_jitter(view, rng)
    if rng.uniform() < 0.2:
        gray = view @ np.array([0.299, 0.587, 0.114])
        view = np.repeat(gray[..., None], 3, axis=2)
    return (view - VIEW_MEAN) / VIEW_STD


def augment(patch: RgbPatch, cfg: DinoConfig,
            rng: np.random.Generator) -> ViewBatch:
    """Multi-crop augmentation of one patch at its native size.

    Macenko normalization, when enabled, runs once on the source patch
    before any view is cut; stain-estimation failures propagate so the
    caller can skip the patch.
    """
    if patch.width <= cfg.local_view_size or patch.height <= cfg.local_view_size:
        raise ValueError("patch must be larger than the local view size")
    if cfg.macenko_enabled:
        patch = normalize_patch(patch, cfg.macenko_target)
    img = _to_unit(patch)
    global_views = [_make_view(img, cfg.global_view_size, cfg.global_crop_scale, rng)
                    for _ in range(2)]
    local_views = [_make_view(img, cfg.local_view_size, cfg.local_crop_scale, rng)
                   for _ in range(cfg.n_local_crops)]
    return ViewBatch(global_views=global_views, local_views=local_views)


def view_to_input(view: np.ndarray, encoder_input_size: int) -> np.ndarray:
    """Resize a standardized view to the encoder input size and flatten."""
    if view.shape[0] != encoder_input_size or view.shape[1] != encoder_input_size:
        view = bilinear_resize_array(view, encoder_input_size, encoder_input_size)
    return view.reshape(-1)


def patch_to_eval_input(patch: RgbPatch, cfg: DinoConfig) -> np.ndarray:
    """Deterministic inference view: full patch resized and standardized."""
    img = (_to_unit(patch) - VIEW_MEAN) / VIEW_STD
    return view_to_input(img, cfg.encoder_input_size)


def init_state(cfg: DinoConfig, seed: int) -> TeacherStudentState:
    student = init_encoder(cfg.layer_sizes, np.random.default_rng([seed, 1]))
    return TeacherStudentState(student=student, teacher=student.copy(),
                               center=np.zeros(cfg.n_prototypes), step=0)


def train_run(patches: list, cfg: DinoConfig,
              seed: int = 0) -> tuple[TeacherStudentState, list]:
    """Self-distillation over a patch dataset.

    SGD with momentum on the student, EMA teacher and center updates each
    step. Per-sample augmentation rng streams are derived from
    (seed, step, batch position), so runs are seed-deterministic. Returns
    (state, history) where history rows are (step, lr, loss).

    Patches failing stain normalization are dropped with a count; a step
    dropping more than 10% of its batch aborts the run.
    """
    if not patches:
        raise ValueError("dataset must be non-empty")
    state = init_state(cfg, seed)
    batch_rng = np.random.default_rng([seed, 2])
    vel_w = [np.zeros_like(w) for w in state.student.weights]
    vel_b = [np.zeros_like(b) for b in state.student.biases]
    history = []
    n_views = 2 + cfg.n_local_crops
    for step in range(cfg.total_iterations):
        idx = batch_rng.integers(0, len(patches), size=cfg.batch_size)
        view_inputs = [[] for _ in range(n_views)]
        dropped = 0
        for pos, pi in enumerate(idx):
            rng = np.random.default_rng([seed, step, pos])
            try:
                vb = augment(patches[int(pi)], cfg, rng)
            except (InsufficientTissue, DegenerateStains):
                dropped += 1
                continue
            for vi, view in enumerate(vb.global_views + vb.local_views):
                view_inputs[vi].append(view_to_input(view, cfg.encoder_input_size))
        if dropped > MAX_BATCH_DROP_FRACTION * cfg.batch_size:
            raise SlidekitError(
                f"step {step}: {dropped}/{cfg.batch_size} patches failed "
                "stain normalization"
            )
        if not view_inputs[0]:
            raise SlidekitError(f"step {step}: entire batch dropped")
        xs = [np.stack(v) for v in view_inputs]

        teacher_logits = [encoder_forward(state.teacher, xs[g])[0] for g in range(2)]
        student_out = [encoder_forward(state.student, x) for x in xs]
        loss, grads = dino_loss([o[0] for o in student_out], teacher_logits,
                                cfg.student_temp, cfg.teacher_temp, state.center)

        acc_w = [np.zeros_like(w) for w in state.student.weights]
        acc_b = [np.zeros_like(b) for b in state.student.biases]
        for (_, caches), dlogits in zip(student_out, grads):
            dws, dbs = encoder_backward(state.student, caches, dlogits)
            for li in range(len(acc_w)):
                acc_w[li] += dws[li]
                acc_b[li] += dbs[li]

        lr = lr_schedule(step, cfg)
        for li in range(len(acc_w)):
            vel_w[li] = cfg.sgd_momentum * vel_w[li] - lr * acc_w[li]
            vel_b[li] = cfg.sgd_momentum * vel_b[li] - lr * acc_b[li]
            state.student.weights[li] += vel_w[li]
            state.student.biases[li] += vel_b[li]

        state.center = center_update(state.center, np.vstack(teacher_logits),
                                     cfg.center_momentum)
        ema_update(state, cfg.ema_momentum)
        state.step = step + 1
        history.append((step, float(lr), float(loss)))
    return state, history


def embed_patches(state: TeacherStudentState, patches: list, wsi_ids,
                  cfg: DinoConfig, manifest: dict | None = None):
    """Teacher penultimate activations for each patch.

    Macenko pre-normalization mirrors the training configuration; patches
    whose normalization fails are skipped. Returns (FeatureSet,
    skipped index list).
    """
    from .embed_diag import FeatureSet

    inputs, kept_ids, skipped = [], [], []
    for i, patch in enumerate(patches):
        if cfg.macenko_enabled:
            try:
                patch = normalize_patch(patch, cfg.macenko_target)
            except (InsufficientTissue, DegenerateStains):
                skipped.append(i)
                continue
        inputs.append(patch_to_eval_input(patch, cfg))
        kept_ids.append(int(wsi_ids[i]))
    if not inputs:
        raise SlidekitError("no patches survived preprocessing")
    feats = encoder_features(state.teacher, np.stack(inputs))
    ids = np.asarray(kept_ids, dtype=np.int64)
    man = manifest if manifest is not None else {
        int(w): str(w) for w in np.unique(ids)
    }
    return FeatureSet(vectors=feats, wsi_ids=ids, manifest=man), skipped
