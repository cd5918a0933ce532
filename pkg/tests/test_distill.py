import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mkdt import datagen as dg
from mkdt import distill as di
from mkdt import models
from mkdt import trajectories as tr
from mkdt.errors import BadMagicError, ConfigError
from mkdt.losses import mtt_loss
from mkdt.tensor import Graph, backward

LINEAR = models.ArchSpec("linear", (4, 3))


def fake_expert(arch=LINEAR, epochs=3, seed=0, scale=0.3):
    """A random walk through parameter space standing in for a trained expert."""
    rng = np.random.default_rng(seed)
    size = sum(int(np.prod(s)) for _, s in models.manifest(arch))
    c = [rng.standard_normal(size)]
    for _ in range(epochs):
        c.append(c[-1] + scale * rng.standard_normal(size))
    return tr.ExpertTrajectory(c, arch, tr.TrainConfig(epochs=epochs), seed)


def micro_syn(seed=0, s=4, d=4, k=3, alpha=0.1):
    rng = np.random.default_rng(seed)
    return di.SyntheticDataset(rng.standard_normal((s, d)), rng.standard_normal((s, k)), alpha, np.arange(s))


def unroll_loss(expert, D, Z, alpha, N, t=0, E=1, mode="mkdt", noise=None, batch=None):
    """Matching loss as a plain function of (D, alpha) for finite differences."""
    man = models.manifest(expert.arch)
    g = Graph()
    Dt, at = g.leaf(D), g.leaf(np.asarray(alpha))
    sched = [np.arange(D.shape[0]) if batch is None else b for b in (batch or [None] * N)]
    theta = di.unroll(expert.arch, models.split_flat(expert.checkpoints[t], man), Dt, Z, at, sched, mode, 2, noise)
    loss = mtt_loss(theta, expert.checkpoints[t], expert.checkpoints[t + E])
    return loss, Dt, at


def test_config_validation():
    with pytest.raises(ConfigError) as exc:
        di.DistillConfig(S=-1, N=0, mode="other")
    assert set(exc.value.keys) == {"S", "N", "mode"}
    with pytest.raises(ConfigError):
        di.DistillConfig(ssl_loss="barlow", m=4)
    di.DistillConfig(pixel_lr=0.0, alpha_lr=0.0)


def test_check_experts_rejects_short_trajectories():
    cfg = di.DistillConfig(T_plus=2, expert_epochs=2)
    with pytest.raises(ConfigError):
        cfg.check_experts([fake_expert(epochs=3)])
    cfg.check_experts([fake_expert(epochs=4)])


def test_zero_steps_leaves_syn_unchanged():
    syn = micro_syn()
    out, rows = di.run_distillation([fake_expert()], syn.copy(), di.DistillConfig(S=0))
    assert rows == []
    assert out.D.tobytes() == syn.D.tobytes() and out.alpha == syn.alpha


def test_zero_learning_rates_keep_syn_but_report_loss():
    syn = micro_syn()
    cfg = di.DistillConfig(S=5, N=2, expert_epochs=1, T_plus=1, pixel_lr=0.0, alpha_lr=0.0)
    out, rows = di.run_distillation([fake_expert()], syn.copy(), cfg)
    assert out.D.tobytes() == syn.D.tobytes() and out.alpha == syn.alpha
    assert len(rows) == 5 and all(np.isfinite(r["mtt_loss"]) and r["mtt_loss"] > 0 for r in rows)
    assert all(r["pixel_change"] == 0.0 for r in rows)


def test_exact_replay_has_zero_loss():
    data = dg.generate_sparse_coding(dg.SparseCodingConfig(d=8, num_classes=2, n=32, sigma_noise=0.2))
    arch = models.student_arch(8, 6, 4)
    Z = models.forward(models.init(models.teacher_arch(8, 6, 4), "fan_in", 1), data.inputs)
    lr = 0.05
    expert = tr.train_expert_kd(data, Z, arch, tr.TrainConfig(epochs=2, batch_size=32, lr=lr, momentum=0.0, weight_decay=0.0))
    syn = di.init_synthetic(data, Z, np.arange(32), alpha0=lr)
    cfg = di.DistillConfig(N=2, expert_epochs=2, T_plus=0, batch_size=None)
    res = di.distill_step(syn, expert, cfg, 0)
    assert res.loss < 1e-20


def test_unroll_pixel_gradient_matches_finite_differences():
    expert = fake_expert()
    syn = micro_syn(1)
    loss, Dt, at = unroll_loss(expert, syn.D, syn.Z, syn.alpha, N=3)
    gD, ga = backward(loss, [Dt, at])
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(20):
        i, j = rng.integers(4), rng.integers(4)
        Dp, Dm = syn.D.copy(), syn.D.copy()
        Dp[i, j] += h
        Dm[i, j] -= h
        fd = (unroll_loss(expert, Dp, syn.Z, syn.alpha, 3)[0].item() - unroll_loss(expert, Dm, syn.Z, syn.alpha, 3)[0].item()) / (2 * h)
        assert abs(fd - gD.data[i, j]) <= 1e-4 * max(1.0, abs(fd))
    fd_a = (unroll_loss(expert, syn.D, syn.Z, syn.alpha + h, 3)[0].item() - unroll_loss(expert, syn.D, syn.Z, syn.alpha - h, 3)[0].item()) / (2 * h)
    assert abs(fd_a - float(ga.data)) <= 1e-4 * max(1.0, abs(fd_a))


def test_naive_unroll_gradient_matches_finite_differences():
    arch = models.ArchSpec("mlp", (4, 5, 3))
    expert = fake_expert(arch, seed=2, scale=0.1)
    syn = micro_syn(3, alpha=0.05)
    noise = [np.random.default_rng(n).standard_normal((8, 4)) for n in range(2)]
    args = dict(N=2, mode="naive-ssl", noise=noise)
    loss, Dt, _ = unroll_loss(expert, syn.D, syn.Z, syn.alpha, **args)
    (gD,) = backward(loss, [Dt])
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (3, 2)]:
        Dp, Dm = syn.D.copy(), syn.D.copy()
        Dp[i, j] += h
        Dm[i, j] -= h
        fd = (unroll_loss(expert, Dp, syn.Z, syn.alpha, **args)[0].item() - unroll_loss(expert, Dm, syn.Z, syn.alpha, **args)[0].item()) / (2 * h)
        assert abs(fd - gD.data[i, j]) <= 1e-4 * max(1.0, abs(fd))


def test_single_step_linear_closed_form():
    expert = fake_expert(seed=4)
    syn = micro_syn(5, s=6)
    D, Z, a = syn.D, syn.Z, syn.alpha
    s = D.shape[0]
    W0 = expert.checkpoints[0].reshape(3, 4)
    Wt = expert.checkpoints[1].reshape(3, 4)
    G = (2 / s) * (W0 @ D.T @ D - Z.T @ D)
    R = W0 - a * G - Wt
    c = 1 / np.sum((W0 - Wt) ** 2)
    want_loss = c * np.sum(R**2)
    want_a = -2 * c * np.sum(R * G)
    want_D = -(4 * c * a / s) * (D @ R.T @ W0 + D @ W0.T @ R - Z @ R)

    loss, Dt, at = unroll_loss(expert, D, Z, a, N=1)
    gD, ga = backward(loss, [Dt, at])
    assert loss.item() == pytest.approx(want_loss, rel=1e-12)
    assert float(ga.data) == pytest.approx(want_a, abs=1e-8)
    np.testing.assert_allclose(gD.data, want_D, atol=1e-8)
    res = di.distill_step(syn, expert, di.DistillConfig(N=1, expert_epochs=1, T_plus=0, batch_size=None), 0)
    assert res.loss == pytest.approx(want_loss, rel=1e-12)


def test_step_update_with_momentum():
    expert = fake_expert()
    syn = micro_syn(1)
    cfg = di.DistillConfig(N=3, expert_epochs=1, T_plus=0, pixel_lr=0.5, alpha_lr=1e-3, momentum=0.5)
    loss, Dt, at = unroll_loss(expert, syn.D, syn.Z, syn.alpha, N=3)
    gD, ga = backward(loss, [Dt, at])
    v0 = di.Velocity(np.ones_like(syn.D), 2.0)
    res = di.distill_step(syn, expert, cfg, 0, velocity=v0)
    np.testing.assert_allclose(res.velocity.D, 0.5 + gD.data, atol=1e-12)
    np.testing.assert_allclose(res.syn.D, syn.D - 0.5 * (0.5 + gD.data), atol=1e-12)
    assert res.syn.alpha == pytest.approx(syn.alpha - 1e-3 * (1.0 + float(ga.data)), abs=1e-15)
    np.testing.assert_array_equal(res.syn.Z, syn.Z)


def test_alpha_is_floored():
    expert = fake_expert()
    syn = micro_syn(1)
    cfg = di.DistillConfig(N=3, expert_epochs=1, T_plus=0, alpha_lr=0.0, pixel_lr=0.0)
    res = di.distill_step(syn, expert, cfg, 0, velocity=di.Velocity(np.zeros_like(syn.D), 1e6))
    assert res.syn.alpha == pytest.approx(syn.alpha)
    cfg = di.DistillConfig(N=3, expert_epochs=1, T_plus=0, alpha_lr=1.0, pixel_lr=0.0, momentum=1.0)
    res = di.distill_step(syn, expert, cfg, 0, velocity=di.Velocity(np.zeros_like(syn.D), 1e6))
    assert res.syn.alpha == di.ALPHA_FLOOR


def test_segment_past_trajectory_end():
    with pytest.raises(ValueError, match="exceeds"):
        di.distill_step(micro_syn(), fake_expert(epochs=2), di.DistillConfig(expert_epochs=2), 0, start_epoch=1)


def test_degenerate_segment_is_skipped(caplog):
    flat = np.ones(12)
    stuck = tr.ExpertTrajectory([flat, flat.copy(), flat.copy()], LINEAR, tr.TrainConfig(epochs=2), 0)
    syn = micro_syn()
    res = di.distill_step(syn, stuck, di.DistillConfig(expert_epochs=1, T_plus=1), 0)
    assert res.skipped and res.syn is syn
    assert "degenerate" in caplog.text
    out, rows = di.run_distillation([stuck, fake_expert(epochs=2)], syn.copy(), di.DistillConfig(S=20, N=2, expert_epochs=1, T_plus=1))
    assert 0 < len(rows) < 20
    assert all(r["expert_id"] == 1 for r in rows)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_unroll_is_skipped():
    syn = micro_syn(alpha=1e30)
    syn.D *= 1e30
    res = di.distill_step(syn, fake_expert(), di.DistillConfig(N=3, expert_epochs=1, T_plus=0), 0)
    assert res.skipped and res.syn is syn


def test_batch_schedule_covers_each_pass():
    rng = np.random.default_rng(0)
    sched = di._batch_schedule(10, 4, 5, rng)
    assert all(len(b) == 4 for b in sched)
    assert len(set(np.concatenate(sched[:2]).tolist())) == 8
    assert [len(b) for b in di._batch_schedule(3, None, 2, rng)] == [3, 3]
    assert [len(b) for b in di._batch_schedule(3, 10, 2, rng)] == [3, 3]


def test_pixel_change_examples():
    D = np.arange(6.0).reshape(2, 3)
    assert di.pixel_change_metric(D, D) == 0.0
    assert di.pixel_change_metric(D + 0.25, D) == pytest.approx(0.25)
    with pytest.raises(Exception):
        di.pixel_change_metric(D, D[:1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.integers(1, 6), d=st.integers(1, 5))
def test_pixel_change_matches_plain_loop(seed, s, d):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((s, d)), rng.standard_normal((s, d))
    total = 0.0
    for i in range(s):
        for j in range(d):
            total += abs(A[i, j] - B[i, j])
    assert di.pixel_change_metric(A, B) == pytest.approx(total / (s * d), rel=1e-12)
    assert di.pixel_change_metric(A, B) >= 0


def test_init_synthetic_copies_rows():
    data = dg.generate_sparse_coding(dg.SparseCodingConfig(d=4, num_classes=2, n=10))
    Z = np.random.default_rng(0).standard_normal((10, 3))
    syn = di.init_synthetic(data, Z, [3, 7], 0.2)
    np.testing.assert_array_equal(syn.D, data.inputs[[3, 7]])
    np.testing.assert_array_equal(syn.Z, Z[[3, 7]])
    syn.D[0, 0] = 99.0
    assert data.inputs[3, 0] != 99.0
    with pytest.raises(IndexError):
        di.init_synthetic(data, Z, [10])


def test_random_init():
    idx = di.select_random_init(50, 10, 3)
    assert len(set(idx.tolist())) == 10 and idx.max() < 50
    np.testing.assert_array_equal(idx, di.select_random_init(50, 10, 3))
    with pytest.raises(ValueError):
        di.select_random_init(5, 6, 0)


def test_high_loss_selection(desk):
    n = desk.data.n
    everything = di.select_high_loss_init(desk.data, desk.experts, desk.Z, n)
    assert sorted(everything.tolist()) == list(range(n))
    Z = desk.Z.copy()
    Z[17] += 50.0
    top = di.select_high_loss_init(desk.data, desk.experts, Z, 100)
    assert top[0] == 17
    scores = di.example_scores(desk.data.inputs, desk.experts, desk.Z)
    chosen = di.select_high_loss_init(desk.data, desk.experts, desk.Z, 100)
    assert scores[chosen].mean() >= scores.mean()
    assert scores[chosen].min() >= np.delete(scores, chosen).max()
    with pytest.raises(ValueError):
        di.select_high_loss_init(desk.data, desk.experts, desk.Z, n + 1)


def test_high_loss_ties_prefer_small_index():
    X = np.ones((6, 4))
    expert = fake_expert()
    idx = di.select_high_loss_init(X, [expert], np.zeros((6, 3)), 3)
    np.testing.assert_array_equal(idx, [0, 1, 2])


@pytest.fixture(scope="module")
def desk_run(desk):
    cfg = di.DistillConfig(S=40, N=5)
    init = di.select_high_loss_init(desk.data, desk.experts, desk.Z, 100)
    return cfg, init, di.distill(desk.experts, init, desk.data, desk.Z, cfg)


def test_distill_targets_untouched_and_alpha_positive(desk, desk_run):
    _, init, (syn, rows) = desk_run
    assert syn.Z.tobytes() == desk.Z[init].tobytes()
    assert syn.alpha > 0 and np.all(np.isfinite(syn.D))
    assert all(np.isfinite(r["mtt_loss"]) and r["alpha_syn"] > 0 for r in rows)
    assert [r["step"] for r in rows] == list(range(40))


def test_distill_is_deterministic(desk, desk_run):
    cfg, init, (syn, rows) = desk_run
    again, rows2 = di.distill(desk.experts, init, desk.data, desk.Z, cfg)
    assert again.D.tobytes() == syn.D.tobytes() and again.alpha == syn.alpha
    assert rows == rows2


def test_log_and_container_round_trip(tmp_path, desk_run):
    _, _, (syn, rows) = desk_run
    di.write_log_csv(tmp_path / "log.csv", rows)
    with open(tmp_path / "log.csv") as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == list(di.LOG_COLUMNS)
    assert float(got[-1]["mtt_loss"]) == rows[-1]["mtt_loss"]
    di.save_synthetic(tmp_path / "s.syn", syn)
    back = di.load_synthetic(tmp_path / "s.syn")
    assert back.D.tobytes() == syn.D.tobytes() and back.Z.tobytes() == syn.Z.tobytes()
    assert back.alpha == syn.alpha
    np.testing.assert_array_equal(back.init_indices, syn.init_indices)
    (tmp_path / "bad").write_bytes(b"MKDTDATA" + (tmp_path / "s.syn").read_bytes()[8:])
    with pytest.raises(BadMagicError):
        di.load_synthetic(tmp_path / "bad")


def test_naive_mode_moves_pixels_less(desk, desk_run):
    cfg, init, (syn, rows) = desk_run
    naive, nrows = di.naive_mtt_ssl(desk.ssl_experts, init, desk.data, cfg, desk.Z)
    assert nrows[-1]["pixel_change"] < rows[-1]["pixel_change"]
    mk = np.array([r["mtt_loss"] for r in rows])
    nv = np.array([r["mtt_loss"] for r in nrows])
    assert 1 - nv[-10:].mean() / nv[:10].mean() < 1 - mk[-10:].mean() / mk[:10].mean()
