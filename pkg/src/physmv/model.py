"""Toy Phys4View and VideoSyn denoisers: schedule, forward passes, losses, training and sampling."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io
from .attention import (
    CrossViewAttention,
    GroupedTemporalAttention,
    PhysicsAttention,
    TextCrossAttention,
    VideoSynAttention,
)
from .conditioning import (
    GateProjector,
    PatchCodec,
    build_foreground_video,
    gate_fusion,
    inject,
    pad_prompts,
    physics_tokenize,
    prompt_tokenize,
    sinusoid,
    static_video,
)
from .geometry import (
    CameraView,
    ConfidenceMap,
    DepthHead,
    GeometryPrior,
    PoseFusion,
    fuse_pose,
    geometry_bias,
)
from .nn import Module, glorot, linear, load_checkpoint, save_checkpoint, zeros
from .tensor import (
    DomainError,
    NonFiniteError,
    ShapeError,
    Tensor,
    concat,
    no_grad,
    reduce_mean,
    reshape,
    stack,
    transpose,
)

DEPTH_MODES = ("maximize-corr", "paper-literal")
VAR_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    width: int = 48
    heads: int = 2
    latent: int = 24
    patch: int = 8
    patch_t: int = 4
    groups: int = 4
    time_freqs: int = 8
    lambda_depth: float = 0.1
    depth_mode: str = "maximize-corr"
    T_diff: int = 100
    alpha_bar_end: float = 0.01
    lr: float = 0.05
    lr_decay: float = 0.0
    clip: float = 1.0
    steps: int = 500
    batch: int = 2
    probes: int = 3
    zero_init: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.width % self.groups:
            raise ValueError(f"width {self.width} not divisible by {self.groups} temporal groups")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.latent > self.width:
            raise ValueError("latent width exceeds model width")
        if self.depth_mode not in DEPTH_MODES:
            raise ValueError(f"depth_mode must be one of {DEPTH_MODES}")
        if self.lr < 0 or self.steps < 0 or self.batch < 1 or self.T_diff < 1:
            raise ValueError("lr, steps must be non-negative; batch and T_diff positive")

    def as_kv(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: dict) -> "DenoiserConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in kv.items():
            default = getattr(cls(), k)
            if isinstance(default, bool):
                out[k] = str(v).strip().lower() in ("1", "true", "yes")
            else:
                out[k] = type(default)(v)
        return cls(**out)

    @classmethod
    def load(cls, path) -> "DenoiserConfig":
        return cls.from_kv(io.read_kv(path))

    def save(self, path) -> None:
        io.write_kv(path, self.as_kv())

    def digest(self) -> str:
        text = "\n".join(f"{k}={io.format_value(v)}" for k, v in self.as_kv().items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def codec(self, channels: int = 1) -> PatchCodec:
        return PatchCodec(self.patch, self.patch_t, channels, self.latent)


# -- noise schedule -------------------------------------------------------------------


class NoiseSchedule:
    """Linear alpha-bar schedule: alpha_bar_t = 1 - (1 - end) t / T, t = 0..T."""

    def __init__(self, T_diff: int = 100, end: float = 0.01, w1=None, w2=None):
        if T_diff < 1:
            raise ValueError("T_diff must be at least 1")
        if not 0.0 < end < 0.05:
            raise ValueError("final alpha_bar must lie in (0, 0.05)")
        self.T = T_diff
        self.alpha_bar = 1.0 - (1.0 - end) * np.arange(T_diff + 1) / T_diff
        self.w1 = np.ones(T_diff + 1) if w1 is None else np.asarray(w1, dtype=np.float64)
        self.w2 = np.ones(T_diff + 1) if w2 is None else np.asarray(w2, dtype=np.float64)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T) or not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return t

    def _bcast(self, values: np.ndarray, ndim: int) -> np.ndarray:
        return values.reshape(values.shape + (1,) * (ndim - values.ndim))

    def add_noise(self, x0, t, rng: np.random.Generator):
        """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise; ``t`` is a scalar or one step per batch row."""
        t = self.check(t)
        x0 = np.asarray(x0, dtype=np.float64)
        noise = rng.standard_normal(x0.shape)
        ab = self._bcast(self.alpha_bar[t], x0.ndim)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise, noise

    def recover_x0(self, x_t, noise, t) -> np.ndarray:
        t = self.check(t)
        ab = self._bcast(self.alpha_bar[t], np.ndim(x_t))
        return (np.asarray(x_t) - np.sqrt(1.0 - ab) * noise) / np.sqrt(ab)

    def posterior(self, x0_hat, x_t, t: int) -> tuple[np.ndarray, float]:
        """Mean and std of q(x_{t-1} | x_t, x0) for t >= 1."""
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        a_t = ab_t / ab_prev
        beta = 1.0 - a_t
        c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
        ct = np.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return c0 * x0_hat + ct * x_t, float(np.sqrt(var))


def add_noise(x0, t, schedule: NoiseSchedule, rng: np.random.Generator):
    return schedule.add_noise(x0, t, rng)


def time_features(t, T_diff: int, freqs: int) -> np.ndarray:
    """(B,) integer steps -> (B, 2*freqs) sinusoidal features of t / T_diff."""
    return sinusoid(np.atleast_1d(np.asarray(t, dtype=np.float64)) / T_diff, freqs)


# -- losses -----------------------------------------------------------------------------


def base_loss(prediction: Tensor, target, t, schedule: NoiseSchedule, weights: np.ndarray | None = None) -> Tensor:
    """w(t) * mean squared error; ``t`` scalar or per batch row (averaged over rows)."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    w = schedule.w1 if weights is None else weights
    t = schedule.check(t)
    diff = prediction - target
    sq = diff * diff
    if t.ndim == 0:
        return reduce_mean(sq) * float(w[t])
    per = reduce_mean(reshape(sq, (sq.shape[0], -1)), axis=1)
    return reduce_mean(per * Tensor(w[t]))


def pearson(D, D_r, map_ndim: int | None = None) -> Tensor:
    """Pearson correlation over the trailing ``map_ndim`` axes (all axes by default)."""
    D = D if isinstance(D, Tensor) else Tensor(D)
    D_r = D_r if isinstance(D_r, Tensor) else Tensor(D_r)
    if D.shape != D_r.shape:
        raise ShapeError(f"depth maps differ in shape: {D.shape} vs {D_r.shape}")
    k = D.ndim if map_ndim is None else map_ndim
    lead = D.shape[: D.ndim - k]
    n = int(np.prod(D.shape[D.ndim - k :]))
    a = reshape(D, lead + (n,))
    b = reshape(D_r, lead + (n,))
    da = a - reduce_mean(a, axis=-1, keepdims=True)
    db = b - reduce_mean(b, axis=-1, keepdims=True)
    va = reduce_mean(da * da, axis=-1)
    vb = reduce_mean(db * db, axis=-1)
    if np.any(va.data <= VAR_EPS) or np.any(vb.data <= VAR_EPS):
        raise DomainError("degenerate (constant) depth map: correlation undefined")
    cov = reduce_mean(da * db, axis=-1)
    return cov / (va * vb).sqrt()


def depth_corr_loss(D, D_r, mode: str = "maximize-corr", map_ndim: int | None = None) -> Tensor:
    """Mean over maps of 1 - r (default) or |r| (the formula as literally printed)."""
    r = pearson(D, D_r, map_ndim)
    if mode == "maximize-corr":
        return reduce_mean(1.0 - r)
    if mode == "paper-literal":
        return reduce_mean((r * r).sqrt())
    raise ValueError(f"unknown depth loss mode {mode!r}")


# -- Phys4View ----------------------------------------------------------------------------


@dataclass
class Conditions:
    """Per-batch conditioning; latents are (B, V, T', h, w, C_lat)."""

    H_f: np.ndarray
    H_m: np.ndarray
    phys: np.ndarray  # (B, 5, width)
    prompt: np.ndarray  # (B, L, width)
    prompt_mask: np.ndarray  # (B, L)
    cams: list[CameraView]  # latent-grid cameras, one per view
    depth_ref: np.ndarray | None = None  # (B, V, T', h, w)

    def select(self, idx) -> "Conditions":
        idx = np.asarray(idx)
        return Conditions(
            self.H_f[idx], self.H_m[idx], self.phys[idx], self.prompt[idx], self.prompt_mask[idx],
            self.cams, None if self.depth_ref is None else self.depth_ref[idx],
        )

    def permute_views(self, order) -> "Conditions":
        order = list(order)
        return Conditions(
            self.H_f[:, order], self.H_m[:, order], self.phys, self.prompt, self.prompt_mask,
            [self.cams[k] for k in order],
            None if self.depth_ref is None else self.depth_ref[:, order],
        )


@dataclass
class ForwardResult:
    prediction: Tensor
    depth: Tensor  # (B, V, T', h, w)
    encoding: Tensor  # (B, V, T', h, w, width) after encode, fusion and injection
    hidden: Tensor  # stack output before the output projection


class Phys4View(Module):
    """Toy four-view denoiser; the block order is fixed in ``denoiser_forward``."""

    def __init__(self, config: DenoiserConfig | None = None):
        cfg = config or DenoiserConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        C, L = cfg.width, cfg.latent
        self.in_proj = glorot(rng, L, C)
        self.in_bias = zeros(C)
        self.time_proj = glorot(rng, 2 * cfg.time_freqs, C)
        self.gate = GateProjector(L, rng)
        self.physics = PhysicsAttention(C, cfg.heads, rng, zero_init=cfg.zero_init)
        self.text = TextCrossAttention(C, cfg.heads, rng, zero_init=cfg.zero_init)
        self.pose = PoseFusion(C, rng=rng)
        # random init: a zero head gives a constant map, for which correlation is undefined
        self.depth_head = DepthHead(C, rng)
        self.confidence = ConfidenceMap()
        self.cross = CrossViewAttention(C, cfg.heads, rng, zero_init=cfg.zero_init)
        self.temporal = GroupedTemporalAttention(C, rng, cfg.groups, zero_init=cfg.zero_init)
        self.out_proj = zeros(C, L)
        self.out_bias = zeros(L)
        self.prior = GeometryPrior()

    def input_encoding(self, x_t, t, cond: Conditions) -> Tensor:
        """in_proj(x_t) + time embedding, then gated prior fusion injected into channels [0, C_lat)."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        B = x.shape[0]
        tf = Tensor(time_features(np.broadcast_to(t, (B,)), self.config.T_diff, self.config.time_freqs))
        temb = reshape(tf @ self.time_proj, (B, 1, 1, 1, 1, self.config.width))
        H = linear(x, self.in_proj, self.in_bias) + temb
        H_v, _ = gate_fusion(cond.H_f, cond.H_m, self.gate)
        return inject(H, H_v, (0, self.config.latent))

    def __call__(self, x_t, t, cond: Conditions) -> ForwardResult:
        return denoiser_forward(self, x_t, t, cond)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ShapeError, DomainError, NonFiniteError, ValueError) as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def _fuse_all_views(H: Tensor, cams: list[CameraView], fusion: PoseFusion) -> Tensor:
    if H.shape[1] != len(cams):
        raise ShapeError(f"{H.shape[1]} views but {len(cams)} cameras")
    return stack([fuse_pose(H[:, k], cam, fusion) for k, cam in enumerate(cams)], axis=1)


def denoiser_forward(model: Phys4View, x_t, t, cond: Conditions) -> ForwardResult:
    """encode -> gate_fusion -> inject -> physics -> text -> pose -> depth/bias -> cross-view -> temporal -> out."""
    H_c = _stage("input_encoding", model.input_encoding, x_t, t, cond)
    B = H_c.shape[0]
    phys = Tensor(cond.phys)
    H = _stage("physics_attention", model.physics, H_c, phys)
    H = _stage("text_cross_attention", model.text, H, Tensor(cond.prompt), cond.prompt_mask)
    H = _stage("fuse_pose", _fuse_all_views, H, cond.cams, model.pose)
    D = _stage("predict_depth", model.depth_head, H)  # (B, V, T', h, w)
    D_t = transpose(D, (0, 2, 1, 3, 4))  # views next to the grid for lifting
    bias = _stage("geometry_bias", geometry_bias, D_t, cond.cams, model.prior, model.confidence)
    H = _stage("cross_view_attention", model.cross, H, bias)
    H = _stage("temporal_attention_grouped", model.temporal, H)
    pred = linear(H, model.out_proj, model.out_bias)
    if B != pred.shape[0]:
        raise ShapeError("batch size changed inside the stack")
    return ForwardResult(pred, D, H_c, H)


@dataclass
class LossParts:
    total: Tensor
    base: float
    depth: float


def phys4view_loss(model: Phys4View, x0, x_t, t, cond: Conditions, schedule: NoiseSchedule) -> LossParts:
    cfg = model.config
    out = denoiser_forward(model, x_t, t, cond)
    base = base_loss(out.prediction, x0, t, schedule)
    if cfg.lambda_depth == 0 or cond.depth_ref is None:
        return LossParts(base, base.item(), 0.0)
    depth = depth_corr_loss(out.depth, cond.depth_ref, cfg.depth_mode, map_ndim=3)
    total = base + depth * cfg.lambda_depth
    return LossParts(total, base.item(), depth.item())


# -- data preparation --------------------------------------------------------------------


def pool_to_grid(x: np.ndarray, patch_t: int, patch: int) -> np.ndarray:
    """Average (..., T, H, W) over (patch_t, patch, patch) blocks."""
    *lead, T, H, W = x.shape
    y = x.reshape(tuple(lead) + (T // patch_t, patch_t, H // patch, patch, W // patch, patch))
    return y.mean(axis=(-5, -3, -1))


def scene_conditions(frames0: np.ndarray, masks0: np.ndarray, attrs, prompt: str, T: int, cfg: DenoiserConfig):
    """Latent priors and tokens from the first frame of each view.

    ``frames0``/``masks0`` are (4, H, W). V_f is the masked front frame,
    shared by all four views; V_m is each view's own first frame held still.
    """
    codec = cfg.codec()
    H_f = codec.encode(build_foreground_video(frames0[0], masks0[0], T))
    H_f = np.repeat(H_f[None], frames0.shape[0], axis=0)
    H_m = np.stack([codec.encode(static_video(f, T)) for f in frames0])
    return H_f, H_m, physics_tokenize(attrs, cfg.width), prompt_tokenize(prompt, cfg.width)


@dataclass
class Phys4ViewData:
    x0: np.ndarray  # (S, V, T', h, w, C_lat)
    cond: Conditions


def prepare_phys4view(records, cfg: DenoiserConfig) -> Phys4ViewData:
    if not records:
        raise ValueError("dataset is empty")
    codec = cfg.codec()
    x0, H_f, H_m, phys, prompts, dref = [], [], [], [], [], []
    for r in records:
        T = r.T
        x0.append(np.stack([codec.encode(r.frames[k]) for k in range(4)]))
        hf, hm, ph, pr = scene_conditions(r.frames[:, 0], r.masks[:, 0], r.attrs, r.prompt, T, cfg)
        H_f.append(hf)
        H_m.append(hm)
        phys.append(ph)
        prompts.append(pr)
        dref.append(pool_to_grid(r.reference_depth(), cfg.patch_t, cfg.patch))
    tokens, mask = pad_prompts(prompts)
    cams = [c.scaled(cfg.patch) for c in records[0].cams]
    cond = Conditions(np.stack(H_f), np.stack(H_m), np.stack(phys), tokens, mask, cams, np.stack(dref))
    return Phys4ViewData(np.stack(x0), cond)


# -- training --------------------------------------------------------------------------------


@dataclass
class TrainingTrace:
    steps: list[tuple[int, float, float, float]]
    seed: int
    config_hash: str
    wall_clock: float = 0.0
    probe_initial: float = float("nan")
    probe_final: float = float("nan")

    def to_csv(self) -> str:
        rows = ["step,base,depth,total"]
        rows += [f"{s},{b!r},{d!r},{t!r}" for s, b, d, t in self.steps]
        return "\n".join(rows) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @property
    def totals(self) -> np.ndarray:
        return np.array([s[3] for s in self.steps])


def _probe_set(n_scenes: int, shape, probes: int, schedule: NoiseSchedule, seed: int):
    """Fixed (scene, t, noise) triples; t spread evenly over the schedule."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0B]))
    ts = np.linspace(1, schedule.T, probes + 2)[1:-1].round().astype(int)
    out = []
    for s in range(n_scenes):
        for t in ts:
            out.append((s, int(t), rng.standard_normal(shape)))
    return out


def _global_step(params: list[Tensor], lr: float, clip: float) -> float:
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    scale = 1.0
    if clip > 0 and norm > clip:
        scale = clip / norm
    for p, g in zip(params, grads):
        p.data = p.data - (lr * scale) * g
        p.grad = None
    return norm


def phys4view_probe_loss(model: Phys4View, data: Phys4ViewData, schedule: NoiseSchedule, probes: int, seed: int) -> float:
    """Deterministic total loss averaged over a fixed probe set (ordered reduction)."""
    total = 0.0
    items = _probe_set(data.x0.shape[0], data.x0.shape[1:], probes, schedule, seed)
    with no_grad():
        for s, t, noise in items:
            ab = schedule.alpha_bar[t]
            x0 = data.x0[s : s + 1]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise[None]
            total += phys4view_loss(model, x0, x_t, np.array([t]), data.cond.select([s]), schedule).total.item()
    return total / len(items)


def _learning_rate(cfg, step: int) -> float:
    return cfg.lr / (1.0 + cfg.lr_decay * step)


def train_phys4view(records, config: DenoiserConfig | None = None, log=None) -> tuple[Phys4View, TrainingTrace]:
    """Seeded plain gradient descent on base + lambda_depth * depth loss."""
    cfg = config or DenoiserConfig()
    data = records if isinstance(records, Phys4ViewData) else prepare_phys4view(records, cfg)
    model = Phys4View(cfg)
    schedule = NoiseSchedule(cfg.T_diff, cfg.alpha_bar_end)
    params = model.parameters()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    S = data.x0.shape[0]
    batch = min(cfg.batch, S)
    trace = TrainingTrace([], cfg.seed, cfg.digest())
    start = time.perf_counter()
    try:
        trace.probe_initial = phys4view_probe_loss(model, data, schedule, cfg.probes, cfg.seed)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite loss before step 0: {exc}") from exc
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(S, size=batch, replace=False))
        t = rng.integers(1, cfg.T_diff + 1, size=batch)
        x0 = data.x0[idx]
        x_t, _ = schedule.add_noise(x0, t, rng)
        try:
            parts = phys4view_loss(model, x0, x_t, t, data.cond.select(idx), schedule)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
        if not np.isfinite(parts.total.item()):
            raise TrainingError(f"non-finite loss at step {step}")
        parts.total.backward()
        _global_step(params, _learning_rate(cfg, step), cfg.clip)
        trace.steps.append((step, parts.base, parts.depth, parts.total.item()))
        if log is not None:
            log(step, parts)
    trace.probe_final = phys4view_probe_loss(model, data, schedule, cfg.probes, cfg.seed)
    trace.wall_clock = time.perf_counter() - start
    return model, trace


# -- sampling --------------------------------------------------------------------------------


def ancestral_sample(predict, shape, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Reverse diffusion from pure noise with clean-latent predictions."""
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        x0_hat = predict(x, t)
        if t == 1:
            return x0_hat
        mean, std = schedule.posterior(x0_hat, x, t)
        x = mean + std * rng.standard_normal(shape)
    return x


def sample_phys4view(model: Phys4View, cond: Conditions, schedule: NoiseSchedule | None = None, seed: int = 0):
    """Returns (latent (B, V, T', h, w, C_lat), frames (B, V, T, H, W) clipped to [0, 1])."""
    cfg = model.config
    schedule = schedule or NoiseSchedule(cfg.T_diff, cfg.alpha_bar_end)
    B, V, Tp, h, w, _ = cond.H_f.shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    def predict(x, t):
        with no_grad():
            return denoiser_forward(model, x, np.full(B, t), cond).prediction.data

    latent = ancestral_sample(predict, (B, V, Tp, h, w, cfg.latent), schedule, rng)
    codec = cfg.codec()
    frames = np.stack([np.stack([codec.decode(latent[b, k]) for k in range(V)]) for b in range(B)])
    return latent, np.clip(frames, 0.0, 1.0)


# -- VideoSyn ------------------------------------------------------------------------------------


class VideoSyn(Module):
    """Single-view synthesizer: flow-guided joint attention, grouped temporal attention, projection.

    The noisy latent is concatenated with the first-frame latent along channels
    before the input projection, which gives the model the appearance to move.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        cfg = config or DenoiserConfig()
        self.config = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        C, L = cfg.width, cfg.latent
        self.in_proj = glorot(rng, 2 * L, C)
        self.in_bias = zeros(C)
        self.time_proj = glorot(rng, 2 * cfg.time_freqs, C)
        self.block = VideoSynAttention(C, L, cfg.heads, rng, zero_init=cfg.zero_init)
        self.temporal = GroupedTemporalAttention(C, rng, cfg.groups, zero_init=cfg.zero_init)
        self.out_proj = zeros(C, L)
        self.out_bias = zeros(L)


@dataclass
class VideoSynData:
    x0: np.ndarray  # (S, T', h, w, C_lat) full-frame latents
    ref: np.ndarray  # first frame held still, same shape
    flow: np.ndarray  # (S, T', h, w, C_lat) flow latents
    prompt: np.ndarray
    prompt_mask: np.ndarray


def flow_video(flow: np.ndarray) -> np.ndarray:
    """(T-1, H, W, 2) displacements -> (T, H, W, 2); the last frame has no successor and gets zeros."""
    return np.concatenate([flow, np.zeros((1,) + flow.shape[1:])], axis=0)


def prepare_videosyn(records, cfg: DenoiserConfig) -> VideoSynData:
    """Frames are used at the recorded rate, where the exact flow is defined."""
    if not records:
        raise ValueError("dataset is empty")
    codec = cfg.codec()
    fcodec = cfg.codec(channels=2)
    x0, ref, flow, prompts = [], [], [], []
    for r in records:
        full = r.full
        if r.flow.shape[0] + 1 != full.shape[0]:
            raise ValueError("record flow does not match its frame count")
        fl = flow_video(r.flow)
        x0.append(codec.encode(full))
        ref.append(codec.encode(static_video(full[0], full.shape[0])))
        flow.append(fcodec.encode(fl))
        prompts.append(prompt_tokenize(r.prompt, cfg.width))
    tokens, mask = pad_prompts(prompts)
    return VideoSynData(np.stack(x0), np.stack(ref), np.stack(flow), tokens, mask)


def videosyn_forward(model: VideoSyn, x_t, t, ref, flow, prompt, mask) -> Tensor:
    cfg = model.config
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    B = x.shape[0]
    joined = concat([x, Tensor(ref)], axis=-1)
    tf = Tensor(time_features(np.broadcast_to(t, (B,)), cfg.T_diff, cfg.time_freqs))
    temb = reshape(tf @ model.time_proj, (B, 1, 1, 1, cfg.width))
    H = linear(joined, model.in_proj, model.in_bias) + temb
    H = _stage("videosyn_attention", model.block, H, Tensor(flow), Tensor(prompt), mask)
    H6 = reshape(H, (B, 1) + H.shape[1:])
    H6 = _stage("temporal_attention_grouped", model.temporal, H6)
    H = reshape(H6, H.shape)
    return linear(H, model.out_proj, model.out_bias)


def videosyn_loss(model: VideoSyn, data: VideoSynData, idx, x_t, t, schedule: NoiseSchedule, zero_flow: bool = False) -> Tensor:
    flow = data.flow[idx]
    if zero_flow:
        flow = np.zeros_like(flow)
    pred = videosyn_forward(model, x_t, t, data.ref[idx], flow, data.prompt[idx], data.prompt_mask[idx])
    return base_loss(pred, data.x0[idx], t, schedule, weights=schedule.w2)


def videosyn_train(records, config: DenoiserConfig | None = None, log=None) -> tuple[VideoSyn, TrainingTrace]:
    cfg = config or DenoiserConfig()
    data = records if isinstance(records, VideoSynData) else prepare_videosyn(records, cfg)
    model = VideoSyn(cfg)
    schedule = NoiseSchedule(cfg.T_diff, cfg.alpha_bar_end)
    params = model.parameters()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    S = data.x0.shape[0]
    batch = min(cfg.batch, S)
    trace = TrainingTrace([], cfg.seed, cfg.digest())
    start = time.perf_counter()
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(S, size=batch, replace=False))
        t = rng.integers(1, cfg.T_diff + 1, size=batch)
        x_t, _ = schedule.add_noise(data.x0[idx], t, rng)
        try:
            loss = videosyn_loss(model, data, idx, x_t, t, schedule)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
        loss.backward()
        _global_step(params, _learning_rate(cfg, step), cfg.clip)
        trace.steps.append((step, loss.item(), 0.0, loss.item()))
        if log is not None:
            log(step, loss)
    trace.wall_clock = time.perf_counter() - start
    return model, trace


def videosyn_validation(model: VideoSyn, data: VideoSynData, probes: int = 3, seed: int = 0, zero_flow: bool = False) -> np.ndarray:
    """Per-scene loss over a fixed probe set; paired runs share every noise draw."""
    cfg = model.config
    schedule = NoiseSchedule(cfg.T_diff, cfg.alpha_bar_end)
    S = data.x0.shape[0]
    losses = np.zeros(S)
    with no_grad():
        for s, t, noise in _probe_set(S, data.x0.shape[1:], probes, schedule, seed):
            ab = schedule.alpha_bar[t]
            x_t = np.sqrt(ab) * data.x0[s : s + 1] + np.sqrt(1.0 - ab) * noise[None]
            losses[s] += videosyn_loss(model, data, [s], x_t, np.array([t]), schedule, zero_flow).item()
    return losses / probes


def sample_videosyn(model: VideoSyn, ref, flow, prompt, mask, seed: int = 0) -> np.ndarray:
    """Ancestral sampling of full-frame latents (B, T', h, w, C_lat)."""
    cfg = model.config
    schedule = NoiseSchedule(cfg.T_diff, cfg.alpha_bar_end)
    B = ref.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))

    def predict(x, t):
        with no_grad():
            return videosyn_forward(model, x, np.full(B, t), ref, flow, prompt, mask).data

    return ancestral_sample(predict, ref.shape, schedule, rng)


# -- checkpoints ------------------------------------------------------------------------------


def save_model(directory, model: Module, stage: str, trace: TrainingTrace | None = None, precision: str = "f64") -> None:
    d = Path(directory)
    save_checkpoint(d, model.state(), precision)
    model.config.save(d / "config.txt")
    (d / "stage.txt").write_text(stage + "\n", encoding="utf-8")
    if trace is not None:
        trace.save(d / "trace.csv")
        io.write_kv(
            d / "probe.txt",
            {"probe_initial": trace.probe_initial, "probe_final": trace.probe_final, "config_hash": trace.config_hash},
        )


def load_model(directory) -> Module:
    d = Path(directory)
    try:
        stage = (d / "stage.txt").read_text(encoding="utf-8").strip()
        cfg = DenoiserConfig.load(d / "config.txt")
    except OSError as exc:
        raise io.FormatError(f"{d}: not a checkpoint directory ({exc})") from exc
    model = Phys4View(cfg) if stage == "phys4view" else VideoSyn(cfg) if stage == "videosyn" else None
    if model is None:
        raise io.FormatError(f"{d}: unknown stage {stage!r}")
    model.load_state(load_checkpoint(d))
    return model
