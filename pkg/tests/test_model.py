import numpy as np
import pytest
from scipy.stats import spearmanr

from physmv.gradcheck import EPS, tiny_setup
from physmv.io import FormatError
from physmv.model import (
    DenoiserConfig,
    NoiseSchedule,
    Phys4View,
    TrainingError,
    base_loss,
    denoiser_forward,
    depth_corr_loss,
    load_model,
    pearson,
    phys4view_loss,
    prepare_phys4view,
    prepare_videosyn,
    sample_phys4view,
    save_model,
    train_phys4view,
    videosyn_loss,
    videosyn_train,
)
from physmv.tensor import DomainError, ShapeError, Tensor, gradient_check_params


def test_config_round_trip(tmp_path):
    cfg = DenoiserConfig(width=16, latent=8, lr=0.01, zero_init=True)
    cfg.save(tmp_path / "c.txt")
    back = DenoiserConfig.load(tmp_path / "c.txt")
    assert back == cfg and back.digest() == cfg.digest()
    assert DenoiserConfig(seed=1).digest() != cfg.digest()
    with pytest.raises(ValueError):
        DenoiserConfig(width=10)
    with pytest.raises(ValueError):
        DenoiserConfig.from_kv({"widht": "8"})
    with pytest.raises(ValueError):
        DenoiserConfig(depth_mode="abs")


def test_schedule_examples(rng):
    s = NoiseSchedule(100, 0.01)
    x0 = rng.normal(size=(3, 4))
    assert np.array_equal(s.add_noise(x0, 0, rng)[0], x0)
    xt, _ = s.add_noise(np.zeros(10_000), 100, rng)
    assert abs(xt.var() / (1 - s.alpha_bar[100]) - 1) < 0.05
    a, na = s.add_noise(x0, 30, np.random.default_rng(5))
    b, nb = s.add_noise(x0, 30, np.random.default_rng(5))
    assert np.array_equal(a, b) and np.array_equal(na, nb)
    with pytest.raises(ValueError):
        s.add_noise(x0, 101, rng)
    with pytest.raises(ValueError):
        s.add_noise(x0, -1, rng)


def test_schedule_sanity():
    s = NoiseSchedule(100, 0.01)
    assert s.alpha_bar[0] == 1.0 and s.alpha_bar[-1] == pytest.approx(0.01)
    assert np.all(np.diff(s.alpha_bar) < 0)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 5))
    t = np.array([1, 20, 60, 100])
    xt, noise = s.add_noise(x0, t, rng)
    assert np.abs(s.recover_x0(xt, noise, t) - x0).max() < 1e-6
    with pytest.raises(ValueError):
        NoiseSchedule(0)


def test_base_loss_examples(rng):
    s = NoiseSchedule(10)
    y = rng.normal(size=(2, 3))
    assert base_loss(Tensor(y), y, 3, s).item() == 0.0
    assert base_loss(Tensor(y + 0.7), y, 3, s).item() == pytest.approx(0.49)
    w = np.ones(11)
    w[3] = 2.0
    assert base_loss(Tensor(y + 0.7), y, 3, s, w).item() == 2 * base_loss(Tensor(y + 0.7), y, 3, s).item()
    with pytest.raises(ShapeError):
        base_loss(Tensor(y), y[:1], 3, s)


def test_depth_loss_examples(rng):
    D = rng.uniform(1, 2, size=(8, 8))
    assert pearson(D, 3.0 * D + 1.0).item() == pytest.approx(1.0, abs=1e-12)
    assert depth_corr_loss(D, 2.0 * D - 5.0).item() == pytest.approx(0.0, abs=1e-12)
    assert depth_corr_loss(D, -D).item() == pytest.approx(2.0, abs=1e-12)
    assert depth_corr_loss(D, -D, mode="paper-literal").item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DomainError):
        depth_corr_loss(np.ones((8, 8)), D)
    with pytest.raises(ShapeError):
        pearson(D, D[:4])


def test_depth_correlation_null_distribution():
    rng = np.random.default_rng(99)
    r = [pearson(rng.normal(size=(64, 64)), rng.normal(size=(64, 64))).item() for _ in range(300)]
    assert np.mean(np.abs(r) < 0.1) > 0.99


def test_depth_loss_per_map():
    rng = np.random.default_rng(4)
    D = rng.uniform(1, 2, size=(3, 2, 4, 4))
    loss = depth_corr_loss(D, D * np.array([1.0, 2.0, 3.0])[:, None, None, None], map_ndim=3)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_identity_stack_at_init(rng):
    model, cond, _, x_t, t, _ = tiny_setup(rng, DenoiserConfig(width=8, latent=4, time_freqs=2, zero_init=True))
    for name, p in model.named_parameters().items():
        if name.endswith("alpha"):
            p.data = np.zeros_like(p.data)
    model.pose.weight.data[:] = 0.0
    out = denoiser_forward(model, x_t, t, cond)
    assert np.abs(out.hidden.data - out.encoding.data).max() <= 1e-12


def test_view_permutation_equivariance(rng):
    model, cond, _, x_t, t, _ = tiny_setup(rng)
    order = [2, 0, 3, 1]
    a = denoiser_forward(model, x_t, t, cond).prediction.data
    b = denoiser_forward(model, x_t[:, order], t, cond.permute_views(order)).prediction.data
    assert np.allclose(a[:, order], b, atol=1e-10)


def test_loss_gradient_on_sampled_parameters(rng):
    model, cond, x0, x_t, t, schedule = tiny_setup(rng)
    params = model.named_parameters()
    per = max(1, -(-50 // len(params)))
    err = gradient_check_params(lambda: phys4view_loss(model, x0, x_t, t, cond, schedule).total, params, EPS, per, rng)
    assert err < 1e-5


def test_loss_decomposition(rng):
    model, cond, x0, x_t, t, schedule = tiny_setup(rng)
    parts = phys4view_loss(model, x0, x_t, t, cond, schedule)
    assert abs(parts.total.item() - (parts.base + model.config.lambda_depth * parts.depth)) < 1e-9
    assert parts.depth > 0


def test_forward_errors_name_the_block(rng):
    model, cond, _, x_t, t, _ = tiny_setup(rng)
    cond.cams = cond.cams[:3]
    with pytest.raises(ShapeError, match="fuse_pose"):
        denoiser_forward(model, x_t, t, cond)


def small_config(**kw):
    return DenoiserConfig(**{"steps": 4, "probes": 1, **kw})


def test_flat_trace_without_updates(small_records):
    cfg = small_config(lr=0.0, lambda_depth=0.0)
    before = Phys4View(cfg).state()
    model, trace = train_phys4view(small_records, cfg)
    assert trace.probe_final == trace.probe_initial
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())
    assert all(d == 0.0 for _, _, d, _ in trace.steps)


def test_training_is_deterministic(small_records):
    a = train_phys4view(small_records, small_config())[1]
    b = train_phys4view(small_records, small_config())[1]
    assert a.to_csv() == b.to_csv() and a.probe_final == b.probe_final
    c = train_phys4view(small_records, small_config(seed=1))[1]
    assert c.to_csv() != a.to_csv()


def test_training_aborts_on_non_finite(small_records):
    cfg = small_config()
    data = prepare_phys4view(small_records, cfg)
    data.x0 = data.x0 * 1e300
    with pytest.raises(TrainingError, match="non-finite"):
        train_phys4view(data, cfg)


def test_sampling_single_step_is_direct_prediction(small_records):
    cfg = small_config(T_diff=1)
    data = prepare_phys4view(small_records, cfg)
    model = Phys4View(cfg)
    for name, p in model.named_parameters().items():
        p.data = p.data + 0.05 * np.random.default_rng(len(name)).normal(size=p.shape)
    cond = data.cond.select([0])
    schedule = NoiseSchedule(1, cfg.alpha_bar_end)
    latent, frames = sample_phys4view(model, cond, schedule, seed=3)
    noise = np.random.default_rng(np.random.SeedSequence([3, 2])).standard_normal(latent.shape)
    direct = denoiser_forward(model, noise, np.array([1]), cond).prediction.data
    assert np.array_equal(latent, direct)
    assert frames.min() >= 0 and frames.max() <= 1 and frames.shape == (1, 4, 8, 32, 32)
    again = sample_phys4view(model, cond, schedule, seed=3)[1]
    assert np.array_equal(frames, again)


def test_checkpoint_round_trip(tmp_path, small_records, rng):
    cfg = small_config()
    model, trace = train_phys4view(small_records, cfg)
    save_model(tmp_path / "ck", model, "phys4view", trace)
    back = load_model(tmp_path / "ck")
    assert back.config == cfg
    assert all(np.array_equal(back.state()[k], v) for k, v in model.state().items())
    with pytest.raises(FormatError):
        load_model(tmp_path / "missing")


def test_videosyn_loss_and_determinism(small_records):
    cfg = small_config()
    data = prepare_videosyn(small_records, cfg)
    assert data.flow.shape == data.x0.shape
    a = videosyn_train(data, cfg)[1]
    b = videosyn_train(data, cfg)[1]
    assert a.to_csv() == b.to_csv()
    schedule = NoiseSchedule(cfg.T_diff)
    model, _ = videosyn_train(data, small_config(steps=0))
    # out_proj starts at zero, so a zero target gives zero loss
    data.x0 = np.zeros_like(data.x0)
    assert videosyn_loss(model, data, [0], data.x0[:1], np.array([5]), schedule).item() == 0.0


def test_trained_depth_head_tracks_simulator_depth(toy_records, trained_phys4view):
    model, _ = trained_phys4view
    data = prepare_phys4view(toy_records, model.config)
    t = np.array([5])
    rng = np.random.default_rng(0)
    rhos = []
    for s in range(len(toy_records)):
        cond = data.cond.select([s])
        x_t, _ = NoiseSchedule().add_noise(data.x0[s : s + 1], t, rng)
        D = denoiser_forward(model, x_t, t, cond).depth.data
        rhos.append(spearmanr(D.ravel(), cond.depth_ref.ravel()).statistic)
    assert np.mean(rhos) > 0


@pytest.mark.xfail(strict=False, reason="toy model samples jump between 4-frame latent blocks; see the decisions ledger")
def test_sampled_fall_descends_monotonically(trained_phys4view):
    from physmv.cli import MASK_THRESHOLD, first_frame_conditions
    from physmv.conditioning import PhysicsAttributes
    from physmv.metrics import mask_rows

    model, _ = trained_phys4view
    attrs = PhysicsAttributes((0, -9.8, 0), (0, 0, 0), 1000.0, 2e4, 0.3)
    cond, _, _ = first_frame_conditions(attrs, "jelly ball falls", model.config, "sphere", 16)
    monotone = 0
    for seed in range(10):
        frames = sample_phys4view(model, cond, seed=seed)[1]
        rows = mask_rows(frames[0, 0] > MASK_THRESHOLD)
        monotone += bool(np.all(np.isfinite(rows)) and np.all(np.diff(rows) >= 0))
    assert monotone >= 7, f"monotone descent in {monotone}/10 seeds"
