import numpy as np
import pytest

from physrefine.denoiser import MLPDenoiser
from physrefine.diffusion import build_schedule
from physrefine.dynamics import el_residual
from physrefine.kinematics import ShapeError, Trajectory, joint_positions
from physrefine.training import (AdamW, CorruptionConfig, Normalizer, SequenceSample, TrainConfig,
                                 TrainingDivergedError, _geometric_grad, corrupt, fit_input_stats, load_dataset,
                                 loss_data, loss_el, loss_geometric, read_loss_csv, save_dataset, sigma_for_step,
                                 synth_dataset, total_loss, train, write_loss_csv)


@pytest.fixture(scope="module")
def small_set():
    from physrefine.training import mini_hand
    tree, bodies = mini_hand()
    return synth_dataset(tree, bodies, 6, 8, CorruptionConfig(), np.random.default_rng(3))


def test_loss_data_examples(rng):
    x = rng.normal(size=(5, 4))
    assert loss_data(x, x) == 0
    assert loss_data(x, x + 0.3) == pytest.approx(0.09)
    x_hat = rng.normal(size=x.shape)
    assert loss_data(x, x_hat) == pytest.approx(np.sum((x - x_hat) ** 2) / x.size)
    with pytest.raises(ShapeError):
        loss_data(x, x[:, :3])


def test_loss_geometric_examples(hand, small_set, rng):
    tree, _ = hand
    x = small_set[0].x_gt
    assert loss_geometric(tree, x, x) == 0
    shifted = x.copy()
    shifted[:, 3] += 0.01
    assert loss_geometric(tree, x, shifted) == pytest.approx(1e-4, rel=1e-9)
    other = small_set[1].x_gt
    p, q = joint_positions(tree, x), joint_positions(tree, other)
    d = q - p
    expected = np.mean(np.sum(d**2, -1)) + np.mean(np.sum(np.diff(d, axis=0) ** 2, -1))
    assert loss_geometric(tree, x, other) == pytest.approx(expected, rel=1e-12)


def test_geometric_gradient_matches_fd(hand, small_set, rng):
    tree, _ = hand
    x, x_hat = small_set[0].x_gt, small_set[0].y
    _, g = _geometric_grad(tree, x, x_hat)
    for _ in range(10):
        t, i = rng.integers(x.shape[0]), rng.integers(x.shape[1])
        h = 1e-6
        xp, xm = x_hat.copy(), x_hat.copy()
        xp[t, i] += h
        xm[t, i] -= h
        fd = (loss_geometric(tree, x, xp) - loss_geometric(tree, x, xm)) / (2 * h)
        assert g[t, i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_loss_el_examples(hand, small_set):
    tree, bodies = hand
    s = small_set[0]
    assert loss_el(tree, bodies, s.x_gt, s.pseudoforce_gt, 0.1, s.dt) == 0
    a = loss_el(tree, bodies, s.y, s.pseudoforce_gt, 0.2, s.dt)
    b = loss_el(tree, bodies, s.y, s.pseudoforce_gt, 0.1, s.dt)
    assert b == pytest.approx(2 * a, rel=1e-12)
    Z = el_residual(tree, bodies, Trajectory(s.y, s.dt), s.pseudoforce_gt)
    assert a == pytest.approx(np.sum(Z**2) / 0.4, rel=1e-12)
    with pytest.raises(ValueError):
        loss_el(tree, bodies, s.y, s.pseudoforce_gt, np.nan, s.dt)


def test_sigma_floor():
    sched = build_schedule(4)
    assert sigma_for_step(sched, 1, 10.0) == 1e-8
    assert sigma_for_step(sched, 3, 10.0) == pytest.approx(sched.Sigma(3) / 10)


def test_total_loss_weights():
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2) == (2e3, 500.0)
    ones = {"data": 1.0, "geo": 1.0, "el": 1.0}
    assert total_loss(ones, cfg) == 2 * cfg.lambda1 + cfg.lambda2
    pure = TrainConfig(lambda2=0.0)
    assert total_loss({"data": 0.3, "geo": 0.1, "el": 7.0}, pure) == pytest.approx(pure.lambda1 * 0.4)


def test_loss_decomposition_exact(hand, small_set):
    tree, bodies = hand
    s = small_set[2]
    cfg = TrainConfig(lambda1=3.0, lambda2=0.7)
    parts = {"data": loss_data(s.x_gt, s.y), "geo": loss_geometric(tree, s.x_gt, s.y),
             "el": loss_el(tree, bodies, s.y, s.pseudoforce_gt, 0.05, s.dt)}
    direct = 3.0 * (np.mean((s.x_gt - s.y) ** 2) + parts["geo"]) + 0.7 * parts["el"]
    assert abs(total_loss(parts, cfg) - direct) <= 1e-12 * max(1.0, abs(direct))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda1=-1)
    with pytest.raises(ValueError):
        TrainConfig(c=0)
    with pytest.raises(ValueError):
        TrainConfig(T=2)
    with pytest.raises(ValueError):
        CorruptionConfig(bias_prob=1.5)
    with pytest.raises(ValueError):
        CorruptionConfig(jitter_std=-0.1)


def test_adamw_first_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    opt = AdamW(0.1, weight_decay=0.01)
    opt.step(p, g)
    # Bias-corrected first step: m_hat = g, v_hat = g^2.
    gw = g["w"]
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * gw / (np.abs(gw) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-12)
    state = opt.to_json()
    other = AdamW(0.1)
    other.load_json(state)
    assert other.t == 1 and np.array_equal(other.m["w"], opt.m["w"])


def make_model(tree, seed=0):
    return MLPDenoiser(tree.dim, 2, (16, 16), rng=np.random.default_rng(seed), n_steps=4)


def test_zero_learning_rate_keeps_parameters(hand, small_set):
    tree, _ = hand
    sched = build_schedule(4)
    m = make_model(tree)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, small_set, sched, TrainConfig(lr=0.0, epochs=1, batch_size=4), np.random.default_rng(0))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_noiseless_pairs_data_loss_decreases(hand):
    tree, bodies = hand
    data = synth_dataset(tree, bodies, 256, 8, CorruptionConfig.none(), np.random.default_rng(8))
    sched = build_schedule(4)
    norm = Normalizer.fit(data)
    m = make_model(tree, seed=2)
    fit_input_stats(m, data, sched, norm, np.random.default_rng(1))
    res = train(m, data, sched, TrainConfig(epochs=5, lambda2=0.0), np.random.default_rng(4), norm)
    losses = [r["data"] for r in res.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_logs_el_and_resumes_epochs(hand, small_set):
    tree, _ = hand
    sched = build_schedule(4)
    norm = Normalizer.fit(small_set)
    m = make_model(tree)
    cfg = TrainConfig(epochs=2, batch_size=3)
    res = train(m, small_set, sched, cfg, np.random.default_rng(0), norm)
    assert [r["epoch"] for r in res.history] == [0, 1]
    assert all(r["el"] > 0 for r in res.history)
    more = train(m, small_set, sched, cfg, np.random.default_rng(1), norm, res.optimizer, start_epoch=2)
    assert [r["epoch"] for r in more.history] == [2, 3]


def test_divergence_guard(hand, small_set):
    tree, _ = hand
    m = make_model(tree)
    m.params["b_head"][:] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(m, small_set, build_schedule(4), TrainConfig(epochs=1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        train(m, [], build_schedule(4), TrainConfig(epochs=1), np.random.default_rng(0))


def test_loss_csv_round_trip(tmp_path):
    hist = [{"epoch": 0, "data": 0.5, "geo": 0.25, "el": 3.0, "total": 1.0 / 3}]
    write_loss_csv(hist, tmp_path / "loss.csv")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,L_data,L_geo,L_EL,total"
    assert read_loss_csv(tmp_path / "loss.csv") == hist


def test_corruption_none_is_identity(hand, small_set):
    y, mask = corrupt(small_set[0].x_gt, CorruptionConfig.none(), np.random.default_rng(0))
    assert np.array_equal(y, small_set[0].x_gt) and not mask.any()


def test_jitter_folded_mean(rng):
    cfg = CorruptionConfig(jitter_std=0.05, bias_std=0.0, bias_prob=0.0, jump_prob=0.0)
    x = np.zeros((4000, 18))
    y, _ = corrupt(x, cfg, rng)
    err = np.abs(y - x) / cfg.coordinate_scale(18)
    assert err.mean() == pytest.approx(0.05 * np.sqrt(2 / np.pi), rel=0.01)


def test_bias_window_marked(rng):
    cfg = CorruptionConfig(jitter_std=0.0, bias_prob=1.0, jump_prob=0.0, window=4, window_start=5)
    x = np.zeros((16, 18))
    y, mask = corrupt(x, cfg, rng)
    assert np.flatnonzero(mask).tolist() == [5, 6, 7, 8]
    assert np.all(y[~mask] == 0) and np.all(y[mask] != 0)


def test_synth_is_deterministic_and_consistent(hand):
    tree, bodies = hand
    a = synth_dataset(tree, bodies, 3, 6, CorruptionConfig(), np.random.default_rng(42))
    b = synth_dataset(tree, bodies, 3, 6, CorruptionConfig(), np.random.default_rng(42))
    for s, t in zip(a, b):
        assert np.array_equal(s.x_gt, t.x_gt) and np.array_equal(s.y, t.y)
        assert s.x_gt.shape == (6, tree.dim)
        Z = el_residual(tree, bodies, Trajectory(s.x_gt, s.dt), s.pseudoforce_gt)
        assert np.all(Z == 0)
    assert synth_dataset(tree, bodies, 0, 6, CorruptionConfig(), np.random.default_rng(0)) == []
    with pytest.raises(ValueError):
        synth_dataset(tree, bodies, 1, 2, CorruptionConfig(), np.random.default_rng(0))


def test_dataset_round_trip(tmp_path, hand, small_set):
    tree, bodies = hand
    save_dataset(small_set, tmp_path, tree, bodies, small_set[0].dt, CorruptionConfig(), 3)
    loaded, manifest = load_dataset(tmp_path)
    assert manifest["seed"] == 3 and len(loaded) == len(small_set)
    for s, t in zip(small_set, loaded):
        np.testing.assert_array_equal(s.x_gt, t.x_gt)
        np.testing.assert_array_equal(s.y, t.y)
        np.testing.assert_array_equal(s.corrupted, t.corrupted)
        np.testing.assert_allclose(s.pseudoforce_gt, t.pseudoforce_gt, rtol=1e-12, atol=1e-12)


def test_normalizer(small_set):
    norm = Normalizer.fit(small_set)
    x = small_set[0].y
    np.testing.assert_allclose(norm.denormalize(norm.normalize(x)), x, atol=1e-14)
    again = Normalizer.from_json(norm.to_json())
    assert np.array_equal(again.scale, norm.scale) and np.array_equal(again.force_scale, norm.force_scale)
    with pytest.raises(ValueError):
        Normalizer(np.zeros(2), np.array([1.0, 0.0]))


def test_sequence_sample_shapes():
    with pytest.raises(ShapeError):
        SequenceSample(np.zeros((4, 6)), np.zeros((4, 6)), np.zeros((3, 6)), np.zeros(4, bool))
    with pytest.raises(ShapeError):
        SequenceSample(np.zeros((4, 6)), np.zeros((4, 6)), np.zeros((4, 6)), np.zeros(3, bool))
