import struct

import numpy as np
import pytest

import gradcheck
import oracles
from ffagents import learner
from ffagents.env import EnvParams
from ffagents.errors import CheckpointError, ConfigError, ContractViolation, NumericalFailure
from ffagents.ffm import FfmParams
from ffagents.learner import Architecture, Experience, PolicyNet, Trainer, TrainerConfig

SMALL = Architecture(window=5, conv1=3, conv2=4, hidden=6)


def single_params(net, a=0):
    return {n: p[a] for n, p in net.params.items()}


def test_architecture_validation():
    with pytest.raises(ConfigError):
        Architecture(window=3)
    with pytest.raises(ConfigError):
        Architecture(dtype="float16")
    assert Architecture().flat == 3 * 3 * 32


def test_initialization_is_fan_in_bounded_and_seeded():
    arch = Architecture()
    a = PolicyNet.initialize(arch, [np.random.default_rng(s) for s in range(3)])
    b = PolicyNet.initialize(arch, [np.random.default_rng(s) for s in range(3)])
    fan = arch.fan_in()
    for n in learner.PARAM_NAMES:
        assert np.array_equal(a.params[n], b.params[n])
        assert np.abs(a.params[n]).max() <= 1 / np.sqrt(fan[n])
    assert not np.array_equal(a.params["fc_w"][0], a.params["fc_w"][1])


@pytest.mark.parametrize("arch", [SMALL, Architecture()])
def test_forward_matches_loop_oracle(arch):
    rng = np.random.default_rng(1)
    net = PolicyNet.initialize(arch, [np.random.default_rng(s) for s in range(3)])
    obs = (rng.random((3, arch.channels, arch.window, arch.window)) < 0.4).astype(np.uint8)
    probs, value = learner.forward(net, obs)
    for a in range(3):
        want_p, want_v = oracles.network_forward(single_params(net, a), obs[a])
        np.testing.assert_allclose(probs[a], want_p, rtol=1e-12, atol=1e-14)
        assert value[a] == pytest.approx(want_v, rel=1e-12, abs=1e-14)


def test_population_slices_are_independent():
    net = PolicyNet.initialize(SMALL, [np.random.default_rng(s) for s in range(4)])
    obs = (np.random.default_rng(2).random((4, 4, 5, 5)) < 0.5).astype(np.uint8)
    probs, value = learner.forward(net, obs)
    for a in range(4):
        p1, v1 = learner.forward(net.agent(a), obs[a])
        np.testing.assert_allclose(probs[a], p1, rtol=1e-13)
        assert value[a] == pytest.approx(v1, rel=1e-13)


def test_float32_forward_close_to_float64():
    net64 = PolicyNet.initialize(Architecture(), [np.random.default_rng(0)])
    net32 = PolicyNet(Architecture(dtype="float32"), {n: p.astype(np.float32) for n, p in net64.params.items()})
    obs = (np.random.default_rng(3).random((1, 4, 7, 7)) < 0.5).astype(np.uint8)
    np.testing.assert_allclose(learner.forward(net32, obs)[0], learner.forward(net64, obs)[0], atol=1e-5)


def test_forward_rejects_bad_shapes():
    net = PolicyNet.initialize(SMALL, [np.random.default_rng(0)] * 2)
    with pytest.raises(ContractViolation):
        learner.forward_batch(net, np.zeros((3, 4, 5, 5)))
    with pytest.raises(ContractViolation):
        learner.forward(net, np.zeros((4, 5, 5)))


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("factored", [False, True])
def test_gradients_match_finite_differences(seed, factored):
    net, exp, cfg = gradcheck.random_instance(seed, SMALL if seed % 2 else None)
    coords = gradcheck.sample_coordinates(net.arch, np.random.default_rng(seed), per_tensor=24)
    a = gradcheck.analytic(net, exp, cfg, coords, factored)
    n, smooth = gradcheck.finite_difference(net, exp, cfg, coords)
    assert smooth.mean() > 0.9
    per, whole = gradcheck.relative_errors(a[smooth], n[smooth])
    assert per.max() <= 1e-3 and whole <= 1e-3


def test_policy_logit_gradient_closed_form():
    # d/dz of -log pi(a) td + beta KL(pi || uniform), checked on logits directly
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1, 4))
    td, beta, act = np.array([1.7]), 0.3, np.array([2])

    def loss(zz):
        lp = zz - np.log(np.exp(zz).sum())
        p = np.exp(lp)
        return -lp[0, 2] * td[0] + beta * (p * (lp + np.log(4))).sum()

    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    _, kl, ent, d = learner.policy_terms(lp, np.exp(lp), act, td, beta)
    assert kl[0] == pytest.approx(np.log(4) - ent[0])
    fd = np.zeros(4)
    for k in range(4):
        e = np.zeros((1, 4))
        e[0, k] = 1e-6
        fd[k] = (loss(z + e) - loss(z - e)) / 2e-6
    np.testing.assert_allclose(d[0], fd, rtol=1e-6, atol=1e-9)


def test_td_target_uses_next_value_and_terminal():
    net, exp, cfg = gradcheck.random_instance(3)
    _, d1 = learner.gradients(net, exp, cfg, next_value=np.array([2.0]))
    p, v = learner.forward(net, np.asarray(exp.obs))
    want = exp.reward + (0.0 if exp.terminal else cfg.gamma * 2.0)
    assert d1["target"][0] == pytest.approx(want)
    assert d1["td_error"][0] == pytest.approx(want - v)


def test_rank1_norm_and_dense_agree():
    rng = np.random.default_rng(0)
    r = learner.Rank1(rng.normal(size=(3, 5)), rng.normal(size=(3, 4)), (3, 5, 4))
    dense = r.dense()
    np.testing.assert_allclose(r.sqnorm(), (dense.reshape(3, -1) ** 2).sum(axis=1))


def _exp_for(net, seed):
    rng = np.random.default_rng(seed)
    n, arch = net.population, net.arch
    shape = (n, arch.channels, arch.window, arch.window)
    return Experience((rng.random(shape) < 0.4).astype(np.uint8), rng.integers(0, 4, n), rng.normal(size=n) * 5,
                      (rng.random(shape) < 0.4).astype(np.uint8), np.zeros(n, dtype=bool))


def test_update_is_clipped_sgd():
    net = PolicyNet.initialize(SMALL, [np.random.default_rng(s) for s in range(3)])
    exp = _exp_for(net, 1)
    cfg = TrainerConfig(lr=0.05, grad_clip=0.5)
    grads, _ = learner.gradients(net, exp, cfg)
    norms = np.sqrt(sum((g.reshape(3, -1) ** 2).sum(axis=1) for g in grads.values()))
    before = net.copy()
    _, diag = learner.update(net, exp, cfg)
    np.testing.assert_allclose(diag["grad_norm"], norms)
    scale = np.minimum(1.0, 0.5 / norms)
    for n in learner.PARAM_NAMES:
        step = scale.reshape((-1,) + (1,) * (grads[n].ndim - 1)) * grads[n]
        np.testing.assert_allclose(net.params[n], before.params[n] - 0.05 * step, rtol=1e-12, atol=1e-15)


def test_update_with_zero_lr_is_identity_and_nan_raises():
    net = PolicyNet.initialize(SMALL, [np.random.default_rng(0)])
    exp = _exp_for(net, 2)
    before = net.copy()
    learner.update(net, exp, TrainerConfig(lr=0.0))
    for n in learner.PARAM_NAMES:
        assert np.array_equal(net.params[n], before.params[n])
    net.params["v_b"][0] = np.nan
    with pytest.raises(NumericalFailure):
        learner.update(net, exp, TrainerConfig())


def test_sample_action_frequencies():
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    rng = np.random.default_rng(0)
    counts = np.bincount([learner.sample_action(probs, rng) for _ in range(20000)], minlength=4)
    expected = 20000 * probs
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 16.3  # 99.9% quantile, 3 degrees of freedom


def test_sample_actions_equals_rowwise_sampling():
    probs = np.random.default_rng(1).dirichlet(np.ones(4), size=8)
    a = learner.sample_actions(probs, [np.random.default_rng(s) for s in range(8)])
    b = [learner.sample_action(probs[i], np.random.default_rng(i)) for i in range(8)]
    assert a.tolist() == b
    assert learner.greedy_action(np.array([0.1, 0.6, 0.3, 0.0])) == 1


def test_discounted_return():
    assert learner.discounted_return([1, 1, 1], 0.5) == pytest.approx(1.75)
    assert learner.discounted_return([2.0, -4.0, 8.0], 0.5) == pytest.approx(oracles.discounted([2, -4, 8], 0.5))


TINY = EnvParams(grid_size=5, agents=3, episode_steps=12, obs_window=5, ffm=FfmParams(0.1, 0.02, 0.05))


def test_trainer_is_deterministic():
    a = Trainer(TINY, TrainerConfig(seed=4), SMALL)
    b = Trainer(TINY, TrainerConfig(seed=4), SMALL)
    for _ in range(2):
        ra, rb = a.run_episode(), b.run_episode()
        assert ra.agent_rows == rb.agent_rows
        assert np.array_equal(ra.log.rewards, rb.log.rewards)
    for n in learner.PARAM_NAMES:
        assert np.array_equal(a.net.params[n], b.net.params[n])


def test_frozen_trainer_leaves_weights():
    t = Trainer(TINY, TrainerConfig(seed=1), SMALL, learn=False)
    before = t.net.copy()
    t.run_episode()
    for n in learner.PARAM_NAMES:
        assert np.array_equal(t.net.params[n], before.params[n])


def test_learning_changes_weights_and_logs():
    t = Trainer(TINY, TrainerConfig(seed=1), SMALL)
    before = t.net.copy()
    r = t.run_episode(record_replay=True)
    assert not np.array_equal(t.net.params["pi_w"], before.params["pi_w"])
    assert len(r.agent_rows) == 3 and len(r.replay.frames) == 13
    assert np.isclose(r.stats.action_freq.sum(), 1.0)


def test_train_returns_per_episode_logs():
    net, run = learner.train(TINY, TrainerConfig(seed=2), 3, SMALL)
    assert [s.episode for s in run.stats] == [0, 1, 2] and len(run.mean_obs) == 3
    with pytest.raises(ContractViolation):
        learner.train(TINY, TrainerConfig(), 0, SMALL)


def test_trainer_rejects_mismatched_network():
    with pytest.raises(CheckpointError):
        Trainer(TINY, TrainerConfig(), SMALL, net=PolicyNet.zeros(SMALL, 2))
    with pytest.raises(ConfigError):
        Trainer(TINY, TrainerConfig(), Architecture(window=7))


def test_checkpoint_round_trip_and_resave_is_byte_identical(tmp_path):
    net = PolicyNet.initialize(SMALL, [np.random.default_rng(s) for s in range(2)])
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    learner.save_checkpoint(p1, net, TrainerConfig(seed=3), {"ca": {"s": 1}}, {"episode": 7})
    ck = learner.load_checkpoint(p1, expected=SMALL)
    for n in learner.PARAM_NAMES:
        assert np.array_equal(ck.net.params[n], net.params[n])
    assert ck.meta == {"episode": 7} and ck.trainer["seed"] == 3
    learner.save_checkpoint(p2, ck.net, ck.trainer, ck.rng_states, ck.meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_float32_checkpoint_loads_in_its_precision(tmp_path):
    arch = Architecture(window=5, conv1=3, conv2=4, hidden=6, dtype="float32")
    net = PolicyNet.initialize(arch, [np.random.default_rng(0)])
    learner.save_checkpoint(tmp_path / "c.ckpt", net, TrainerConfig())
    ck = learner.load_checkpoint(tmp_path / "c.ckpt")
    assert ck.net.params["fc_w"].dtype == np.float32
    assert np.array_equal(ck.net.params["fc_w"], net.params["fc_w"])


def test_checkpoint_corruption_is_rejected(tmp_path):
    net = PolicyNet.initialize(SMALL, [np.random.default_rng(0)])
    path = tmp_path / "c.ckpt"
    learner.save_checkpoint(path, net, TrainerConfig())
    good = path.read_bytes()

    def rejects(data, match):
        path.write_bytes(data)
        with pytest.raises(CheckpointError, match=match):
            learner.load_checkpoint(path)

    rejects(good[:-3], "digest")
    flipped = bytearray(good)
    flipped[-5] ^= 0xFF
    rejects(bytes(flipped), "version 1")
    rejects(b"NOTACKPT" + good[8:], "magic")
    rejects(good[:8] + struct.pack("<I", 99) + good[12:], "version 99")
    rejects(good[:4], "too short")
    hlen = struct.unpack_from("<8sIQ", good)[2]
    rejects(good[:20] + b"{" * hlen + good[20 + hlen:], "header")
    path.write_bytes(good)
    with pytest.raises(CheckpointError, match="incompatible"):
        learner.load_checkpoint(path, expected=Architecture())
