import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from sparsecb.ccsb import (
    CcsbConfig,
    SubsetAction,
    estimator_variance_ccsb_exact,
    expected_estimate_ccsb_exact,
    inclusion_probabilities,
    phase1_ccsb,
    phase2_ccsb,
    run_ccsb,
    uniform_msubset,
    uniform_msubsets,
    variance_by_policy_ccsb,
)
from sparsecb.core import (
    L1,
    L2,
    Environment,
    PolicyClass,
    RngStream,
    RoundTape,
    SparseEnvSpec,
    Sparsity,
    draw_rounds,
    make_sparse_env,
    policy_value_exact,
)
from sparsecb.lve import ExplorationDistribution, LveConfig, phase1, phase2

GOLDEN = Path(__file__).parent / "golden"


def list_instance(seed=0, X=3, K=6, m=2, s=2, Pi_size=5, style="random-s-sparse-binary"):
    return make_sparse_env(SparseEnvSpec(X, K, s, L1, style, Pi_size, m=m), RngStream(seed))


def cfg_for(K, m, s, T=100, n=100, gamma=0.5):
    return CcsbConfig(T, n, gamma * m / (K * min(s, m)), gamma, K, m, s)


# -- subsets ------------------------------------------------------------------


def test_subset_action_validation():
    SubsetAction((0, 2, 5))
    with pytest.raises(ValueError):
        SubsetAction((2, 0))
    with pytest.raises(ValueError):
        SubsetAction((1, 1))


def test_full_subset():
    assert all(uniform_msubset(3, 3, RngStream(i)).members == (0, 1, 2) for i in range(5))


@pytest.mark.parametrize("K,m", [(3, 0), (3, 4)])
def test_subset_size_out_of_range(K, m):
    with pytest.raises(ValueError):
        uniform_msubsets(K, m, 1, RngStream(0))


def test_subset_frequencies_k4_m2():
    draws = uniform_msubsets(4, 2, 10**5, RngStream(1))
    codes = draws[:, 0] * 4 + draws[:, 1]
    subsets = [a * 4 + b for a, b in itertools.combinations(range(4), 2)]
    freq = np.array([np.mean(codes == c) for c in subsets])
    assert np.all(np.abs(freq - 1 / 6) <= 0.01)
    assert np.isin(codes, subsets).all()


def test_inclusion_k4_m1():
    draws = uniform_msubsets(4, 1, 10**5, RngStream(2))
    freq = np.bincount(draws[:, 0], minlength=4) / draws.shape[0]
    assert np.all(np.abs(freq - 0.25) <= 0.01)


@pytest.mark.parametrize("K,m", [(5, 2), (7, 3), (9, 8)])
def test_inclusion_within_four_standard_errors(K, m):
    n = 10**5
    draws = uniform_msubsets(K, m, n, RngStream(K * 10 + m))
    freq = np.bincount(draws.ravel(), minlength=K) / n
    p = m / K
    assert np.all(np.abs(freq - p) <= 4 * math.sqrt(p * (1 - p) / n))
    assert np.allclose(inclusion_probabilities(K, m), p, atol=1e-15)


# -- configuration ------------------------------------------------------------


def test_theory_config():
    cfg = CcsbConfig.from_theory(8, 2, 1, 20, 0.2, 0.1)
    L = math.log(20 / 0.1) * math.log(1 / 0.2)
    assert cfg.eta == pytest.approx(0.5 * 2 / (8 * 1))
    assert cfg.T == math.ceil(8 * (8 * 1 / (2 * 0.2)) * L)
    assert cfg.n == math.ceil(16 * (8 / (2 * 0.2) + 1 / 0.04) * L)
    assert cfg.reward_bound == pytest.approx(8 / (0.5 * 2))


def test_requires_semibandit_l1_env():
    env, Pi = make_sparse_env(SparseEnvSpec(2, 4, 1, L1, "one-hot", 4), RngStream(0))
    with pytest.raises(ValueError):
        phase1_ccsb(env, Pi, cfg_for(4, 1, 1), RngStream(0))
    env, Pi = make_sparse_env(SparseEnvSpec(2, 4, 2, L2, "dense-scaled", 4, m=2), RngStream(0))
    with pytest.raises(ValueError, match="L1"):
        phase1_ccsb(env, Pi, cfg_for(4, 2, 2), RngStream(0))


# -- Phase I ------------------------------------------------------------------


def test_zero_rewards_uniform_exploration():
    env = Environment([1.0], [([1.0], [np.zeros(5)])], Sparsity(L1, 1.0), subset_size=2)
    Pi = PolicyClass([[[0, 1]], [[1, 3]], [[2, 4]], [[0, 4]]], 5)
    T = 4000
    ed, trace = phase1_ccsb(env, Pi, cfg_for(5, 2, 1, T=T), RngStream(3))
    assert np.all(trace.gains == 0)
    sd = math.sqrt(T * 0.25 * 0.75)
    assert np.all(np.abs(ed.counts() - T / 4) <= 5 * sd)


def test_gains_respect_bound():
    env, Pi = list_instance(4)
    cfg = cfg_for(6, 2, 2, T=300)
    _, trace = phase1_ccsb(env, Pi, cfg, RngStream(4))
    # each coordinate's gain is at most 1 / (gamma m / K) and at most m of them add up
    assert trace.gains.max() <= 6 / (0.5 * 2) + 1e-12
    assert trace.gains.sum(axis=1).max() <= cfg.reward_bound * 2 + 1e-12


def _replay(env, Pi, cfg, rng, trace):
    K, m, T, gamma, eta = env.n_actions, env.subset_size, cfg.T, cfg.gamma, cfg.eta
    unif = rng.spawn("phase1/policy").generator().random(T)
    cum = [0.0] * Pi.size
    history = []
    for t in range(T):
        x = int(trace.contexts[t])
        sub = [int(j) for j in trace.actions[t]]
        r = dict(zip(sub, trace.observed[t]))
        mx = max(cum)
        weights = [math.exp(eta * (c - mx)) for c in cum]
        z = sum(weights)
        acc, pick = 0.0, Pi.size - 1
        for i, wi in enumerate(weights):
            acc += wi / z
            if unif[t] < acc:
                pick = i
                break
        for i in range(Pi.size):
            u = 0.0
            for j in set(sub) & set(int(v) for v in Pi.table[i][x]):
                covered = sum(1 for h in history if j in Pi.table[h][x])
                u += r[j] / (gamma * m / K + (1 - gamma) * covered / T)
            cum[i] += u
        history.append(pick)
    return history


def test_golden_phase1_trace():
    env, Pi = list_instance(2025)
    cfg = CcsbConfig(T=150, n=1, eta=0.5 * 2 / (6 * 2), gamma=0.5, K=6, m=2, s=2)
    rng = RngStream(2025, 1)
    _, trace = phase1_ccsb(env, Pi, cfg, rng)
    golden = json.loads((GOLDEN / "ccsb_phase1.json").read_text())
    assert trace.selected.tolist() == golden["selected"]
    assert trace.actions.tolist() == golden["actions"]
    assert trace.contexts.tolist() == golden["contexts"]
    assert _replay(env, Pi, cfg, rng, trace) == golden["selected"]
    # first three rounds by hand: gains use r to the first power
    for t in range(3):
        x = int(trace.contexts[t])
        for k, j in enumerate(trace.actions[t]):
            covered = sum(1 for s in range(t) if j in Pi.table[trace.selected[s], x])
            want = trace.observed[t, k] / (0.5 * 2 / 6 + 0.5 * covered / 150)
            assert trace.gains[t, k] == pytest.approx(want, rel=1e-14)


def test_m1_binary_rewards_match_plain_bandit():
    K, X = 6, 4
    env_s, Pi_s = make_sparse_env(SparseEnvSpec(X, K, 2, L1, "random-s-sparse-binary", 9, m=1), RngStream(8))
    env_b = Environment(env_s.context_probs, list(zip(env_s.support_probs, env_s.support_rewards)),
                        env_s.sparsity)
    Pi_b = PolicyClass(Pi_s.table[:, :, 0], K)
    T, n, gamma = 400, 3000, 0.5
    s = env_s.sparsity.s
    for seed in range(5):
        rng = RngStream(seed, 77)
        cfg_s = CcsbConfig(T, n, gamma / K, gamma, K, 1, s)
        cfg_b = LveConfig(T, n, gamma / K, gamma)
        ed_s, tr_s = phase1_ccsb(env_s, Pi_s, cfg_s, rng)
        ed_b, tr_b = phase1(env_b, Pi_b, cfg_b, rng)
        assert np.array_equal(tr_s.actions[:, 0], tr_b.actions)
        assert np.array_equal(ed_s.selected, ed_b.selected)
        c_s, est_s = phase2_ccsb(env_s, Pi_s, ed_s, cfg_s, rng)
        c_b, est_b = phase2(env_b, Pi_b, ed_b, cfg_b, rng)
        assert c_s == c_b
        assert np.array_equal(est_s, est_b)


def test_semibandit_firewall():
    env, Pi = list_instance(6)
    cfg = cfg_for(6, 2, 2, T=200, n=200)
    rng = RngStream(6, 6)
    tape = draw_rounds(env, cfg.T, RngStream(60))
    ed, trace = phase1_ccsb(env, Pi, cfg, rng, tape=tape)
    noise = np.random.default_rng(0).random(tape._rewards.shape)
    keep = np.zeros(noise.shape, dtype=bool)
    keep[np.arange(cfg.T)[:, None], trace.actions] = True
    bad = RoundTape(tape.contexts, np.where(keep, tape._rewards, noise))
    ed_bad, _ = phase1_ccsb(env, Pi, cfg, rng, tape=bad)
    assert np.array_equal(ed.selected, ed_bad.selected)


# -- estimates and variance ---------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_expected_estimate_is_unbiased(seed):
    env, Pi = list_instance(seed, K=5, m=3, s=3, Pi_size=6)
    gen = np.random.default_rng(seed)
    p_hat = gen.dirichlet(np.full(Pi.size, 0.5))
    gamma = float(gen.uniform(0.05, 0.5))
    for i in range(Pi.size):
        got = expected_estimate_ccsb_exact(env, Pi, p_hat, gamma, i)
        assert abs(got - policy_value_exact(env, Pi.table[i])) <= 1e-10


def test_zero_rewards_variance_and_estimates():
    env = Environment([1.0], [([1.0], [np.zeros(4)])], Sparsity(L1, 1.0), subset_size=2)
    Pi = PolicyClass([[[0, 1]], [[2, 3]]], 4)
    ed = ExplorationDistribution(np.array([0, 1]), 2)
    assert estimator_variance_ccsb_exact(env, Pi, ed, 0.5, 0) == 0.0
    chosen, est = phase2_ccsb(env, Pi, ed, cfg_for(4, 2, 1, n=200), RngStream(0))
    assert chosen == 0 and np.all(est == 0)


def test_variance_point_mass_deterministic_reward():
    K, m, gamma = 5, 2, 0.5
    r = np.array([0.3, 0.0, 0.4, 0.1, 0.0])
    env = Environment([1.0], [([1.0], [r])], Sparsity(L1, 1.0), subset_size=m)
    Pi = PolicyClass([[[0, 2]], [[1, 3]]], K)
    ed = ExplorationDistribution(np.array([0, 0]), 2)
    want = (0.3 + 0.4) / (gamma * m / K + 1 - gamma)
    assert estimator_variance_ccsb_exact(env, Pi, ed, gamma, 0) == pytest.approx(want, rel=1e-14)
    assert variance_by_policy_ccsb(env, Pi, ed, gamma)[0] == pytest.approx(want, rel=1e-14)


def test_full_subset_estimate_is_mean_total_reward():
    K = 4
    env, Pi = list_instance(3, X=2, K=K, m=K, s=3, Pi_size=1)
    ed = ExplorationDistribution(np.array([0]), 1)
    n = 40_000
    _, est = phase2_ccsb(env, Pi, ed, cfg_for(K, K, 3, n=n), RngStream(3))
    tape = draw_rounds(env, n, RngStream(3).spawn("phase2/env"))
    totals = tape._rewards.sum(axis=1)
    mean_l1 = float(env.context_probs @ env.mean_rewards.sum(axis=1))
    assert est[0] == pytest.approx(totals.mean(), abs=1e-12)
    assert abs(est[0] - mean_l1) <= 4 * totals.std() / math.sqrt(n)


# -- end to end ---------------------------------------------------------------


def test_singleton_class():
    env, Pi = list_instance(0, Pi_size=1)
    rep = run_ccsb(env, Pi, 0.2, 0.1, RngStream(0), overrides=cfg_for(6, 2, 2, T=5, n=5))
    assert rep.suboptimality == 0.0
    assert rep.to_dict()["K"] == 6 and rep.to_dict()["m"] == 2


def test_determinism():
    env, Pi = list_instance(2, style="one-hot", s=1)
    a = run_ccsb(env, Pi, 0.3, 0.1, RngStream(4, 4), scale=0.2).to_json()
    b = run_ccsb(env, Pi, 0.3, 0.1, RngStream(4, 4), scale=0.2).to_json()
    assert a == b
