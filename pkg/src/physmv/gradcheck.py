"""Finite-difference checks of every differentiable block on tiny random inputs."""

from __future__ import annotations

import numpy as np

from .attention import (
    CrossViewAttention,
    GroupedTemporalAttention,
    PhysicsAttention,
    TextCrossAttention,
    VideoSynAttention,
)
from .conditioning import GateProjector, gate_fusion, inject
from .geometry import ConfidenceMap, DepthHead, GeometryPrior, geometry_bias, orthogonal_views
from .model import Conditions, DenoiserConfig, NoiseSchedule, Phys4View, phys4view_loss
from .nn import Module
from .tensor import Tensor, gradient_check, gradient_check_params, reduce_sum

EPS = 1e-4
TOLERANCE = 1e-5

# B, V, T', h, w, C
GRID = (1, 4, 2, 2, 2, 8)


def _readout(rng, shape) -> Tensor:
    """Fixed random weights turning a block output into a scalar with a generic gradient."""
    return Tensor(rng.normal(size=shape))


def _activate(block: Module, rng) -> None:
    """Give every residual scale a non-zero value so the attention path is exercised."""
    for name, p in block.named_parameters().items():
        if name.endswith("alpha"):
            p.data = rng.uniform(0.5, 1.5, size=p.shape)


def _check(fn, x: np.ndarray, block: Module | None, rng, samples: int) -> float:
    n = x.size
    idx = rng.choice(n, size=min(samples, n), replace=False)
    err = gradient_check(fn, x, EPS, idx)
    if block is not None:
        err = max(err, gradient_check_params(lambda: fn(Tensor(x)), block.named_parameters(), EPS, 3, rng))
    return err


def check_physics(rng, samples: int = 16) -> float:
    C = GRID[-1]
    block = PhysicsAttention(C, 2, rng)
    _activate(block, rng)
    tokens = Tensor(rng.normal(size=(5, C)))
    r = _readout(rng, GRID)
    return _check(lambda H: reduce_sum(block(H, tokens) * r), rng.normal(size=GRID), block, rng, samples)


def check_text(rng, samples: int = 16) -> float:
    C = GRID[-1]
    block = TextCrossAttention(C, 2, rng)
    _activate(block, rng)
    prompt = Tensor(rng.normal(size=(1, 4, C)))
    mask = np.array([[True, True, True, False]])
    r = _readout(rng, GRID)
    return _check(lambda H: reduce_sum(block(H, prompt, mask) * r), rng.normal(size=GRID), block, rng, samples)


def check_cross_view(rng, samples: int = 16) -> float:
    B, V, T, h, w, C = GRID
    block = CrossViewAttention(C, 2, rng)
    _activate(block, rng)
    n = V * h * w
    bias = Tensor(rng.normal(size=(B, T, n, n)))
    r = _readout(rng, GRID)
    return _check(lambda H: reduce_sum(block(H, bias) * r), rng.normal(size=GRID), block, rng, samples)


def check_temporal(rng, samples: int = 16) -> float:
    block = GroupedTemporalAttention(GRID[-1], rng)
    _activate(block, rng)
    r = _readout(rng, GRID)
    return _check(lambda H: reduce_sum(block(H) * r), rng.normal(size=GRID), block, rng, samples)


def check_videosyn(rng, samples: int = 16) -> float:
    B, _, T, h, w, C = GRID
    block = VideoSynAttention(C, 4, 2, rng)
    _activate(block, rng)
    block.flow_proj.data = rng.normal(0, 0.3, size=block.flow_proj.shape)
    flow = Tensor(rng.normal(size=(B, T, h, w, 4)))
    prompt = Tensor(rng.normal(size=(B, 3, C)))
    r = _readout(rng, (B, T, h, w, C))
    return _check(lambda H: reduce_sum(block(H, flow, prompt) * r), rng.normal(size=(B, T, h, w, C)), block, rng, samples)


def check_gate_inject(rng, samples: int = 16) -> float:
    B, V, T, h, w, C = GRID
    L = C // 2
    proj = GateProjector(L, rng)
    H_m = Tensor(rng.normal(size=(B, V, T, h, w, L)))
    H_i = Tensor(rng.normal(size=GRID))
    r = _readout(rng, GRID)

    def f(H_f):
        H_v, _ = gate_fusion(H_f, H_m, proj)
        return reduce_sum(inject(H_i, H_v, (0, L)) * r)

    return _check(f, rng.normal(size=(B, V, T, h, w, L)), proj, rng, samples)


def check_depth_head(rng, samples: int = 16) -> float:
    head = DepthHead(GRID[-1], rng)
    r = _readout(rng, GRID[:-1])
    return _check(lambda H: reduce_sum(head(H) * r), rng.normal(size=GRID), head, rng, samples)


def check_geometry_bias(rng, samples: int = 16) -> float:
    B, V, T, h, w, _ = GRID
    cams = orthogonal_views(h, w)
    fmap = ConfidenceMap()
    r = _readout(rng, (B, T, V * h * w, V * h * w))
    D = rng.uniform(0.5, 2.0, size=(B, T, V, h, w))
    return _check(lambda d: reduce_sum(geometry_bias(d, cams, GeometryPrior(), fmap) * r), D, fmap, rng, samples)


def tiny_setup(rng, config: DenoiserConfig | None = None):
    """A randomly initialised micro denoiser with two scenes of conditions."""
    cfg = config or DenoiserConfig(width=8, heads=2, latent=4, time_freqs=2, seed=int(rng.integers(1 << 31)))
    model = Phys4View(cfg)
    _activate(model, rng)
    for blk in (model.pose,):
        blk.weight.data = rng.normal(0, 0.2, size=blk.weight.shape)
    model.out_proj.data = rng.normal(0, 0.3, size=model.out_proj.shape)
    B, V, T, h, w = 2, 4, 2, 4, 4
    lat = (B, V, T, h, w, cfg.latent)
    cond = Conditions(
        H_f=rng.normal(size=lat),
        H_m=rng.normal(size=lat),
        phys=rng.normal(size=(B, 5, cfg.width)),
        prompt=rng.normal(size=(B, 3, cfg.width)),
        prompt_mask=np.array([[True, True, False], [True, True, True]]),
        cams=orthogonal_views(w, h),
        depth_ref=rng.uniform(1.0, 3.0, size=(B, V, T, h, w)),
    )
    x0 = rng.normal(size=lat)
    schedule = NoiseSchedule(cfg.T_diff, cfg.alpha_bar_end)
    t = rng.integers(1, cfg.T_diff + 1, size=B)
    x_t, _ = schedule.add_noise(x0, t, rng)
    return model, cond, x0, x_t, t, schedule


def check_full_loss(rng, samples: int = 2) -> float:
    """Total Phys4View loss (base + depth) against a sample of every parameter tensor."""
    model, cond, x0, x_t, t, schedule = tiny_setup(rng)
    fn = lambda: phys4view_loss(model, x0, x_t, t, cond, schedule).total  # noqa: E731
    return gradient_check_params(fn, model.named_parameters(), EPS, samples, rng)


CHECKS = {
    "physics_attention": check_physics,
    "text_cross_attention": check_text,
    "cross_view_attention": check_cross_view,
    "temporal_attention_grouped": check_temporal,
    "videosyn_attention": check_videosyn,
    "gate_inject": check_gate_inject,
    "depth_head": check_depth_head,
    "geometry_bias": check_geometry_bias,
    "phys4view_loss": check_full_loss,
}


def run_checks(seeds: int = 20, base_seed: int = 0, names=None) -> dict[str, float]:
    """Worst relative error per check over ``seeds`` independent draws."""
    out = {}
    for name in names or CHECKS:
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([base_seed, s]))
            worst = max(worst, CHECKS[name](rng))
        out[name] = worst
    return out
