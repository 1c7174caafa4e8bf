"""The ten acceptance criteria, one test each; every test records a PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from physmv.attention import CrossViewAttention
from physmv.cli import main
from physmv.conditioning import PhysicsAttributes
from physmv.gradcheck import CHECKS, TOLERANCE, run_checks
from physmv.geometry import (
    FLOOR_LOGIT,
    ConfidenceMap,
    GeometryPrior,
    affinity_matrix,
    depth_confidence,
    geometry_bias,
    orthogonal_views,
)
from physmv.metrics import cross_view_consistency, mask_rows
from physmv.model import (
    DenoiserConfig,
    Phys4View,
    denoiser_forward,
    depth_corr_loss,
    pearson,
    prepare_phys4view,
    train_phys4view,
    videosyn_validation,
)
from physmv.nn import linear
from physmv.simulator import SceneSpec, init_scene, mpm_step, simulate
from physmv.tensor import DomainError, Tensor


def record(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert passed, line


# 1 ---------------------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    errors = run_checks(seeds=20, base_seed=0)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = set(errors) == set(CHECKS) and all(e < TOLERANCE for e in errors.values()) and elapsed < 120
    record(1, "gradient fidelity", ok,
           f"{len(errors)} blocks x 20 seeds, worst {worst} {errors[worst]:.2e} < 1e-5, {elapsed:.0f}s < 120s")


# 2 ---------------------------------------------------------------------------------------


def test_criterion_02_identity_initialization(small_records):
    start = time.perf_counter()
    cfg = DenoiserConfig(zero_init=True)
    data = prepare_phys4view(small_records, cfg)
    model = Phys4View(cfg)
    alphas = [p for name, p in model.named_parameters().items() if name.endswith("alpha")]
    assert alphas and all(np.all(a.data == 0) for a in alphas)
    rng = np.random.default_rng(0)
    # a non-zero readout makes the prediction check meaningful
    model.out_proj.data = rng.normal(size=model.out_proj.shape)
    x_t = rng.normal(size=data.x0.shape)
    out = denoiser_forward(model, x_t, np.array([40, 7, 90]), data.cond)
    gap = float(np.abs(out.hidden.data - out.encoding.data).max())
    direct = linear(out.encoding, model.out_proj, model.out_bias).data
    pred_gap = float(np.abs(out.prediction.data - direct).max())
    elapsed = time.perf_counter() - start
    record(2, "identity initialization", gap <= 1e-12 and pred_gap <= 1e-12,
           f"max |stack - encoding| = {gap:.1e}, prediction gap {pred_gap:.1e} (<= 1e-12), {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------------------


def _cross_view_block(rng, C=16):
    block = CrossViewAttention(C, 2, rng)
    block.alpha.data = np.array([1.0])
    return block


def test_criterion_03_geometry_bias_limits():
    rng = np.random.default_rng(3)
    B, V, T, h, w, C = 2, 4, 2, 4, 4, 16
    cams = orthogonal_views(w, h)
    block = _cross_view_block(rng, C)
    H = Tensor(rng.normal(size=(B, V, T, h, w, C)))
    unbiased = block(H).data

    # per-view flat depth: the confidence factor is exactly 1, so the limit isolates the distance term
    flat = np.broadcast_to(rng.uniform(1.0, 3.0, size=(B, T, V, 1, 1)), (B, T, V, h, w)).copy()
    bias = geometry_bias(Tensor(flat), cams, GeometryPrior(tau=1e9), ConfidenceMap())
    tau_gap = float(np.abs(block(H, bias).data - unbiased).max())

    # textured depth: at large tau only the (bounded) confidence log-bias remains
    D = Tensor(rng.uniform(1.0, 3.0, size=(B, T, V, h, w)))
    prior = GeometryPrior(tau=1e9)
    conf_only = np.log(affinity_matrix(D, cams, GeometryPrior(tau=1e300), ConfidenceMap()).data)
    textured_gap = float(np.abs(block(H, geometry_bias(D, cams, prior, ConfidenceMap())).data - block(H, conf_only).data).max())

    n = h * w
    same = np.kron(np.eye(V), np.ones((n, n)))
    floored = block(H, np.where(same > 0, 0.0, FLOOR_LOGIT)).data
    floor_gap = 0.0
    for v in range(V):
        x = Tensor(H.data[:, v].reshape(B, T, n, C))
        ref = x.data + block.attn(x, x).data
        floor_gap = max(floor_gap, float(np.abs(floored[:, v].reshape(B, T, n, C) - ref).max()))
    ok = tau_gap < 1e-5 and textured_gap < 1e-5 and floor_gap < 1e-4
    record(3, "geometry-bias limits", ok,
           f"tau=1e9 gap {tau_gap:.1e} (flat), {textured_gap:.1e} (textured, vs confidence-only) < 1e-5; "
           f"floor gap {floor_gap:.1e} < 1e-4")


# 4 ---------------------------------------------------------------------------------------


def test_criterion_04_affinity_algebra():
    rng = np.random.default_rng(4)
    cams = orthogonal_views(4, 4)
    worst_sym = worst_diag = 0.0
    lo, hi = np.inf, -np.inf
    for i in range(50):
        base = rng.uniform(0.5, 3.0, size=(4, 1, 1))
        D = base + rng.normal(0, 0.3 * (i % 5), size=(4, 4, 4)) * (rng.uniform(size=(4, 4, 4)) > 0.3)
        D = Tensor(np.abs(D) + 0.1)
        prior = GeometryPrior(tau=float(rng.uniform(0.05, 2.0)))
        W = affinity_matrix(D, cams, prior, ConfidenceMap()).data
        conf = affinity_matrix(D, cams, GeometryPrior(tau=1e300, alpha=prior.alpha), ConfidenceMap()).data
        worst_sym = max(worst_sym, float(np.abs(W - W.T).max()))
        worst_diag = max(worst_diag, float(np.abs(np.diag(W) - np.diag(conf)).max()))
        lo, hi = min(lo, W.min()), max(hi, W.max())
    flat = depth_confidence(np.full((6, 6), 1.7)).data
    flat_mv = affinity_matrix(Tensor(np.full((4, 3, 3), 2.0)), orthogonal_views(3, 3),
                              GeometryPrior(tau=1e300), ConfidenceMap()).data
    flat_ok = bool(np.all(flat == 1.0) and np.all(flat_mv == 1.0))
    ok = worst_sym <= 1e-6 and lo > 0 and hi <= 1.0 and worst_diag == 0.0 and flat_ok
    record(4, "affinity algebra", ok,
           f"50 maps: asymmetry {worst_sym:.1e}, range [{lo:.2e}, {hi:.3f}], diagonal gap {worst_diag:.1e}, "
           f"flat w_conf == 1: {flat_ok}")


# 5 ---------------------------------------------------------------------------------------


def _attrs(a=(0.0, -9.8, 0.0), v=(0.0, 0.0, 0.0), E=5e4):
    return PhysicsAttributes(a, v, 1000.0, E, 0.3)


def _max_compression(traj) -> float:
    ext = np.array([s.x[:, 1].max() - s.x[:, 1].min() for s in traj.states])
    return float(1.0 - ext.min() / ext[0])


def test_criterion_05_simulator_physics():
    v0 = np.array([0.4, 1.2, -0.2])
    free = SceneSpec(size=(0.1,), center=(0.5, 0.5, 0.5), attrs=_attrs(v=tuple(v0)))
    traj = simulate(free, stride=1, frames=51)
    t = traj.times
    closed = np.outer(t, v0) + 0.5 * np.outer(t**2, [0, -9.8, 0])
    moved = traj.centroids() - traj.centroids()[0]
    ballistic = float(np.linalg.norm(moved - closed, axis=1).max() / np.linalg.norm(closed[-1]))

    still = SceneSpec(size=(0.1,), center=(0.5, 0.5, 0.5), attrs=_attrs(a=(0, 0, 0), v=(0.2, 0.1, 0.0)))
    s = init_scene(still)
    mass0, p0 = s.mass.copy(), np.linalg.norm(s.momentum())
    drift = 0.0
    for _ in range(50):
        nxt = mpm_step(s, still)
        drift = max(drift, float(np.linalg.norm(nxt.momentum() - s.momentum()) / p0))
        s = nxt
    mass_ok = bool(np.array_equal(s.mass, mass0))

    drop = dict(size=(0.1,), center=(0.5, 0.45, 0.5), frames=14)
    soft = simulate(SceneSpec(attrs=_attrs(E=5e4), **drop))
    start = time.perf_counter()
    stiff = simulate(SceneSpec(attrs=_attrs(E=5e6), **drop))
    stiff_time = time.perf_counter() - start
    c_soft, c_stiff = _max_compression(soft), _max_compression(stiff)
    ok = ballistic < 0.005 and drift < 1e-10 and mass_ok and c_stiff < c_soft and stiff_time < 60
    record(5, "simulator physics", ok,
           f"ballistic error {ballistic:.1e} < 0.5%, momentum drift {drift:.1e}/step, mass constant {mass_ok}, "
           f"compression stiff {c_stiff:.3f} < soft {c_soft:.3f}, stiff scene {stiff_time:.0f}s < 60s")


# 6 ---------------------------------------------------------------------------------------


def test_criterion_06_cross_view_ground_truth(small_records, toy_records):
    records = list(small_records) + list(toy_records)
    worst_spread, worst_score = 0.0, 1.0
    for rec in records:
        rows = mask_rows(rec.masks)  # (4, T)
        assert np.all(np.isfinite(rows))
        worst_spread = max(worst_spread, float((rows.max(axis=0) - rows.min(axis=0)).max()))
        worst_score = min(worst_score, cross_view_consistency(rec.masks))
    ok = worst_spread <= 1.0 and worst_score > 0.98
    record(6, "cross-view ground truth", ok,
           f"{len(records)} records: max row spread {worst_spread:.2f}px <= 1, min consistency {worst_score:.4f} > 0.98")


# 7 ---------------------------------------------------------------------------------------


def test_criterion_07_depth_loss_contract():
    rng = np.random.default_rng(7)
    worst_r = worst_anti = 0.0
    for _ in range(20):
        D = rng.uniform(0.5, 3.0, size=(4, 8, 8))
        a, b = rng.uniform(0.01, 100.0), rng.normal(0, 10)
        worst_r = max(worst_r, abs(pearson(D, a * D + b).item() - 1.0))
        worst_anti = max(worst_anti, abs(depth_corr_loss(D, -a * D + b).item() - 2.0))
    raised = 0
    for const in (np.ones((8, 8)), np.full((8, 8), 2.5)):
        for pair in ((const, rng.uniform(size=(8, 8))), (rng.uniform(size=(8, 8)), const)):
            try:
                depth_corr_loss(*pair)
            except DomainError:
                raised += 1
    ok = worst_r <= 1e-6 and worst_anti <= 1e-6 and raised == 4
    record(7, "depth loss contract", ok,
           f"|r - 1| {worst_r:.1e}, |loss - 2| {worst_anti:.1e} (<= 1e-6), degenerate maps rejected {raised}/4")


# 8 ---------------------------------------------------------------------------------------


def test_criterion_08_toy_training(toy_records, trained_phys4view):
    model, trace = trained_phys4view
    ratio = trace.probe_final / trace.probe_initial
    start = time.perf_counter()
    _, again = train_phys4view(toy_records, DenoiserConfig(steps=500, seed=0))
    second = time.perf_counter() - start
    same = again.to_csv() == trace.to_csv() and again.probe_final == trace.probe_final
    frames = toy_records[0].frames.shape
    ok = (len(toy_records) == 8 and frames[1:] == (16, 64, 64) and ratio <= 0.5 and same
          and max(trace.wall_clock, second) < 600)
    record(8, "toy training", ok,
           f"8 scenes, 500 steps: probe loss {trace.probe_initial:.4f} -> {trace.probe_final:.4f} "
           f"(ratio {ratio:.3f} <= 0.5), repeat run bit-identical {same}, {trace.wall_clock:.0f}s < 600s")


# 9 ---------------------------------------------------------------------------------------


def test_criterion_09_flow_conditioning(trained_videosyn):
    model, data, _ = trained_videosyn
    true_flow = videosyn_validation(model, data, probes=3, seed=1)
    zeroed = videosyn_validation(model, data, probes=3, seed=1, zero_flow=True)
    wins = int(np.sum(true_flow < zeroed))
    n = len(true_flow)
    ok = n >= 8 and wins >= n - 1
    record(9, "flow-conditioning utility", ok,
           f"true flow beats zeroed flow on {wins}/{n} scenes (mean {true_flow.mean():.4f} vs {zeroed.mean():.4f})")


# 10 --------------------------------------------------------------------------------------


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    (tmp_path / "data.txt").write_text("shape=sphere box\nvy=0 1\nframes=8\nimage_size=32\n")
    (tmp_path / "train.txt").write_text("steps=10\nprobes=1\nT_diff=20\n")
    (tmp_path / "attrs.txt").write_text("ax=0\nay=-9.8\naz=0\nvx=0\nvy=0\nvz=0\nrho=1000\nE=5e4\nnu=0.3\n")
    same = {}
    for precision in ("f32", "f64"):
        outs = []
        for run in ("a", "b"):
            r = tmp_path / precision / run
            g = ["--seed", "5", "--precision", precision]
            assert main(g + ["gen-data", "--config", str(tmp_path / "data.txt"), "--out", str(r / "data")]) == 0
            assert main(g + ["train", "--data", str(r / "data"), "--config", str(tmp_path / "train.txt"),
                             "--out", str(r / "ck")]) == 0
            assert main(g + ["sample", "--ckpt", str(r / "ck"), "--attrs", str(tmp_path / "attrs.txt"),
                             "--prompt", "rubber ball falls", "--frames", "8", "--out", str(r / "sample")]) == 0
            assert main(g + ["eval", "--data", str(r / "data"), "--out", str(r / "report.jsonl")]) == 0
            outs.append(r)
        a, b = outs
        same[f"gen-data/{precision}"] = _tree(a / "data") == _tree(b / "data")
        same[f"train/{precision}"] = _tree(a / "ck") == _tree(b / "ck")
        same[f"sample/{precision}"] = _tree(a / "sample") == _tree(b / "sample")
        same[f"eval/{precision}"] = (a / "report.jsonl").read_bytes() == (b / "report.jsonl").read_bytes()
    ok = all(same.values())
    record(10, "determinism", ok,
           "byte-identical across two runs: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items()))
