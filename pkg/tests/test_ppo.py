import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from ehnode import mlp, ppo
from ehnode.env import DutyBandit
from ehnode.mlp import MlpSpec
from ehnode.ppo import (
    NumericalError,
    PolicyParams,
    PpoHyper,
    RolloutBuffer,
    compute_gae,
    load_policy,
    log_prob,
    policy_forward,
    policy_loss_and_grad,
    ppo_update,
    sample_action,
    save_policy,
    softplus,
)

from oracles import gae_brute, gradient_errors, random_instance, rel_error


# --- networks -----------------------------------------------------------------

def test_mlp_spec_counts_and_validation():
    spec = MlpSpec(4, (64, 64), 2)
    assert spec.n_params == 4 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2
    assert spec.sizes == [4, 64, 64, 2]
    with pytest.raises(ValueError):
        MlpSpec(4, (0,), 2)
    with pytest.raises(ValueError):
        MlpSpec(4, (8,), 2, activation="relu")


def test_mlp_layout_is_row_major_weights_then_bias():
    spec = MlpSpec(2, (), 3)
    flat = np.arange(9, dtype=float)
    (W, b), = mlp.unpack(spec, flat)
    assert W.tolist() == [[0, 1, 2], [3, 4, 5]]
    assert b.tolist() == [6, 7, 8]
    out, _ = mlp.forward(spec, flat, np.array([[1.0, 1.0]]))
    assert out.tolist() == [[9.0, 12.0, 15.0]]


def test_init_is_glorot_uniform_with_zero_bias():
    spec = MlpSpec(4, (64, 64), 2)
    flat = mlp.init_params(spec, np.random.default_rng(0))
    for (W, b), (fi, fo) in zip(mlp.unpack(spec, flat), spec.layer_shapes()):
        assert np.all(np.abs(W) <= math.sqrt(6 / (fi + fo)))
        assert np.all(b == 0)


def test_zero_network_gives_softplus_zero_std():
    p = PolicyParams.init(np.random.default_rng(0), hidden=(8,))
    p.policy[:] = 0.0
    mean, std = policy_forward(np.random.default_rng(1).normal(size=(5, 4)), p)
    assert np.all(mean == 0.0)
    assert np.allclose(std, math.log(2.0) + p.std_floor, rtol=0, atol=1e-15)


def test_policy_forward_is_deterministic_and_positive():
    rng = np.random.default_rng(2)
    p = PolicyParams.init(rng)
    x = rng.normal(0, 3, (10_000, 4))
    m1, s1 = policy_forward(x, p)
    m2, s2 = policy_forward(x, p)
    assert np.array_equal(m1, m2) and np.array_equal(s1, s2)
    assert np.all(np.isfinite(m1)) and np.all(s1 > 0)


def test_policy_forward_rejects_non_finite_params():
    p = PolicyParams.init(np.random.default_rng(0), hidden=(4,))
    p.policy[3] = np.nan
    with pytest.raises(NumericalError):
        policy_forward(np.zeros((1, 4)), p)


def test_init_std_and_mean_set_the_starting_policy():
    p = PolicyParams.init(np.random.default_rng(0), init_std=0.1, init_mean=0.4)
    m, s = policy_forward(np.random.default_rng(1).uniform(0, 1, (50, 4)), p)
    assert np.allclose(m, 0.4, atol=0.02)
    assert np.allclose(s, 0.1, atol=0.005)


# --- Gaussian ---------------------------------------------------------------------

def test_log_prob_examples():
    assert log_prob(0.0, 0.0, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert log_prob(0.3, 0.3, 0.2) == pytest.approx(-math.log(0.2) - 0.5 * math.log(2 * math.pi),
                                                    abs=1e-14)


@pytest.mark.parametrize("mean,std", [(0.0, 1.0), (0.5, 0.05), (-2.0, 3.0)])
def test_density_integrates_to_one(mean, std):
    total, _ = quad(lambda a: math.exp(log_prob(a, mean, std)), -np.inf, np.inf,
                    epsabs=1e-12, epsrel=1e-12, points=None)
    assert abs(total - 1.0) < 1e-6


def test_sample_action_clips_and_keeps_raw():
    rng = np.random.default_rng(0)
    raw, applied = sample_action(np.full(1000, 2.0), np.full(1000, 0.1), rng)
    assert np.all(applied == 1.0) and np.all(raw > 1.0)
    raw, applied = sample_action(np.full(10, 0.5), np.full(10, 1e-3), rng)
    assert np.allclose(applied, 0.5, atol=0.01)


def test_sample_mean_monte_carlo():
    rng = np.random.default_rng(11)
    n, mean, std = 100_000, 0.37, 0.4
    raw, _ = sample_action(np.full(n, mean), np.full(n, std), rng)
    assert abs(raw.mean() - mean) < 3 * std / math.sqrt(n)


# --- gradients ---------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["policy", "value", "logprob"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng({"policy": 1, "value": 2, "logprob": 3}[kind])
    worst = 0.0
    for _ in range(40):
        g, num = gradient_errors(random_instance(rng, kind), kind)
        worst = max(worst, rel_error(g, num))
    assert worst <= 1e-4


def test_gradient_on_4_8_2_net():
    rng = np.random.default_rng(4)
    inst = random_instance(rng, "policy")
    p = PolicyParams.init(rng, hidden=(8,))
    inst["params"] = p
    mean, std = policy_forward(inst["obs"], p)
    inst["logp_old"] = log_prob(inst["actions"], mean, std) - np.log(1.05)
    g, num = gradient_errors(inst, "policy")
    assert rel_error(g, num) <= 1e-4


# --- surrogate ----------------------------------------------------------------------

def test_identity_params_give_unit_ratios():
    rng = np.random.default_rng(0)
    p = PolicyParams.init(rng, hidden=(8, 8))
    obs = rng.normal(size=(64, 4))
    mean, std = policy_forward(obs, p)
    a, _ = sample_action(mean, std, rng)
    _, _, info = policy_loss_and_grad(p.copy(), obs, a, log_prob(a, mean, std),
                                      rng.normal(size=64), 0.2)
    assert abs(info["mean_ratio"] - 1.0) <= 1e-9
    assert info["clip_fraction"] == 0.0


def test_clipped_factor_for_large_ratio():
    p = PolicyParams.init(np.random.default_rng(0), hidden=(4,))
    obs = np.zeros((1, 4))
    mean, std = policy_forward(obs, p)
    a = mean.copy()
    logp_old = log_prob(a, mean, std) - math.log(1.5)  # ratio 1.5
    loss, _, info = policy_loss_and_grad(p, obs, a, logp_old, np.array([2.0]), 0.2)
    assert info["mean_ratio"] == pytest.approx(1.5)
    assert loss == pytest.approx(-1.2 * 2.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_surrogate_never_exceeds_clip_bound(seed):
    rng = np.random.default_rng(seed)
    p = PolicyParams.init(rng, hidden=(4,))
    obs = rng.normal(size=(16, 4))
    mean, std = policy_forward(obs, p)
    a = mean + std * rng.normal(size=16)
    logp_old = log_prob(a, mean, std) + rng.normal(0, 0.5, 16)
    adv = rng.normal(size=16)
    ratio = np.exp(log_prob(a, mean, std) - logp_old)
    surr = np.minimum(ratio * adv, np.clip(ratio, 0.8, 1.2) * adv)
    assert np.all(surr <= np.maximum(ratio, 1.2) * np.abs(adv) + 1e-12)
    loss, _, _ = policy_loss_and_grad(p, obs, a, logp_old, adv, 0.2)
    assert loss == pytest.approx(-surr.mean(), abs=1e-12)


# --- GAE ------------------------------------------------------------------------------

def test_gae_examples():
    adv, ret = compute_gae([1.0], [0.0], [1.0], 0.0, 1.0, 1.0)
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]
    adv, _ = compute_gae(np.zeros(7), np.zeros(7), np.zeros(7), 0.0, 0.9, 0.8)
    assert np.all(adv == 0)
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0], [0.0, 1.0], 0.0, 0.9, 0.9)


def test_gae_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(300):
        T = int(rng.integers(1, 51))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.15).astype(float)
        last = float(rng.normal())
        g, lam = float(rng.uniform(0, 1)), float(rng.uniform(0, 1))
        adv, ret = compute_gae(r, v, d, last, g, lam)
        badv, bret = gae_brute(r, v, d, last, g, lam)
        assert np.max(np.abs(adv - badv)) <= 1e-12
        assert np.max(np.abs(ret - bret)) <= 1e-12


def test_gae_special_cases():
    rng = np.random.default_rng(5)
    r, v = rng.normal(size=10), rng.normal(size=10)
    d = np.zeros(10)
    adv, _ = compute_gae(r, v, d, 0.7, 0.9, 0.0)
    td = r + 0.9 * np.append(v[1:], 0.7) - v
    assert np.array_equal(adv, td)
    adv, _ = compute_gae(r, np.zeros(10), d, 0.0, 1.0, 1.0)
    assert np.allclose(adv, np.cumsum(r[::-1])[::-1], rtol=0, atol=1e-12)


def test_gae_handles_env_columns():
    rng = np.random.default_rng(6)
    r, v = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    d = (rng.random((12, 3)) < 0.2).astype(float)
    last = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, last, 0.95, 0.9)
    for k in range(3):
        col, _ = compute_gae(r[:, k], v[:, k], d[:, k], last[k], 0.95, 0.9)
        assert np.array_equal(adv[:, k], col)


# --- update and training -------------------------------------------------------------

def filled_buffer(rng, p, n_steps=16, n_envs=2):
    buf = RolloutBuffer(n_steps, n_envs)
    for _ in range(n_steps):
        obs = rng.uniform(0, 1, (n_envs, 4))
        mean, std = policy_forward(p.normalize(obs), p)
        raw, _ = sample_action(mean, std, rng)
        buf.add(obs, raw, log_prob(raw, mean, std), rng.normal(size=n_envs),
                p.value_of(p.normalize(obs)), (rng.random(n_envs) < 0.1).astype(float))
    buf.finish(np.zeros(n_envs), 0.99, 0.95)
    return buf


def test_ppo_update_leaves_input_untouched_and_reports():
    rng = np.random.default_rng(0)
    p = PolicyParams.init(rng, hidden=(8,))
    before = p.policy.copy()
    hyper = PpoHyper(batch_size=32, num_envs=2, minibatch_size=8, update_epochs=2)
    new, diag = ppo_update(filled_buffer(rng, p), p, hyper)
    assert np.array_equal(p.policy, before)
    assert not np.array_equal(new.policy, before)
    for k in ("mean_ratio", "clip_fraction", "policy_loss", "value_loss"):
        assert k in diag and math.isfinite(diag[k])


def test_ppo_update_requires_finished_buffer():
    p = PolicyParams.init(np.random.default_rng(0), hidden=(4,))
    with pytest.raises(ValueError):
        ppo_update(RolloutBuffer(4, 1), p, PpoHyper(batch_size=4, num_envs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ppo_update_aborts_on_non_finite_loss():
    rng = np.random.default_rng(0)
    p = PolicyParams.init(rng, hidden=(4,))
    buf = filled_buffer(rng, p)
    buf.returns[0, 0] = np.inf
    with pytest.raises(NumericalError) as ei:
        ppo_update(buf, p, PpoHyper(batch_size=32, num_envs=2))
    assert ei.value.diagnostics is not None


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"clip_epsilon": 0}, {"gamma": 1.0},
                                {"gae_lambda": 1.5}, {"batch_size": 100, "num_envs": 8},
                                {"init_std": 1e-4}])
def test_hyper_validation(kw):
    with pytest.raises(ValueError):
        PpoHyper(**kw)


def bandit_factory(spec, rng):
    return DutyBandit()


def test_one_update_when_total_equals_batch():
    hyper = PpoHyper(batch_size=64, total_steps=64, num_envs=4, minibatch_size=32, hidden=(8,))
    res = ppo.train(bandit_factory, None, hyper, seed=0)
    assert res.n_updates == 1 and len(res.curve) == 1


def test_training_is_deterministic():
    hyper = PpoHyper(batch_size=64, total_steps=256, num_envs=4, minibatch_size=32, hidden=(8,))
    a = ppo.train(bandit_factory, None, hyper, seed=3)
    b = ppo.train(bandit_factory, None, hyper, seed=3)
    c = ppo.train(bandit_factory, None, hyper, seed=4)
    assert np.array_equal(a.params.policy, b.params.policy)
    assert np.array_equal(a.params.value, b.params.value)
    assert not np.array_equal(a.params.policy, c.params.policy)


def test_bandit_learns_full_duty():
    hyper = PpoHyper(batch_size=512, total_steps=20_480, num_envs=8, minibatch_size=128,
                     learning_rate=3e-3)
    res = ppo.train(bandit_factory, None, hyper, seed=0)
    assert res.params.act((0.0, 0.0, 0.0, 0.0)) > 0.9


# --- snapshot ------------------------------------------------------------------------

def test_snapshot_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    p = PolicyParams.init(rng, hidden=(16, 8), std_floor=2e-3, obs_scale=np.array([40, 5, 120, 1.0]),
                          duty_bounds=(0.2, 1.0))
    p.policy += rng.normal(size=p.policy.shape)
    save_policy(p, tmp_path / "p.bin")
    q = load_policy(tmp_path / "p.bin")
    assert np.array_equal(p.policy, q.policy) and np.array_equal(p.value, q.value)
    assert q.std_floor == p.std_floor and q.duty_bounds == p.duty_bounds
    x = rng.uniform(0, 40, (100, 4))
    for a, b in zip(policy_forward(p.normalize(x), p), policy_forward(q.normalize(x), q)):
        assert np.array_equal(a, b)
    assert [p.act(o) for o in x] == [q.act(o) for o in x]


def test_snapshot_rejects_other_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope\n")
    with pytest.raises(ValueError):
        load_policy(tmp_path / "x.bin")


def test_softplus_is_stable():
    x = np.array([-800.0, 0.0, 800.0])
    y = softplus(x)
    assert np.all(np.isfinite(y)) and y[1] == math.log(2) and y[2] == 800.0
