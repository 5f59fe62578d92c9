import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecb.core import (
    L1,
    L2,
    Environment,
    Policy,
    PolicyClass,
    RngStream,
    SparseEnvSpec,
    Sparsity,
    action_marginals,
    audit_draws,
    best_policy_value,
    certificate_holds,
    draw_rounds,
    expected_sq_norm,
    make_lower_bound_env,
    make_planted_env,
    make_sparse_env,
    marginal_action_prob,
    policy_value_exact,
    policy_values_exact,
    sample_round,
    systematic_binary_law,
)


def deterministic_env(r=(1.0, 0.0)):
    return Environment([1.0], [([1.0], [list(r)])], Sparsity(L1, 1.0))


# -- streams ------------------------------------------------------------------


def test_same_key_same_draws():
    a = RngStream(7, 3).generator().random(5)
    b = RngStream(7, 3).generator().random(5)
    assert np.array_equal(a, b)


def test_spawned_streams_differ_and_leave_parent_untouched():
    root = RngStream(7)
    before = root.generator().random(3)
    x, y = root.spawn("a"), root.spawn("b")
    assert x.stream_id != y.stream_id
    assert not np.array_equal(x.generator().random(3), y.generator().random(3))
    assert np.array_equal(root.generator().random(3), before)


def test_stream_rejects_oversized_seed():
    with pytest.raises(ValueError):
        RngStream(2**64)


# -- environment validation ---------------------------------------------------


def test_context_probs_must_sum_to_one():
    with pytest.raises(ValueError):
        Environment([0.5, 0.4], [([1.0], [[1, 0]]), ([1.0], [[0, 1]])], Sparsity(L1, 1.0))


def test_l1_certificate_is_enforced():
    with pytest.raises(ValueError, match="certificate"):
        Environment([1.0], [([1.0], [[1.0, 1.0]])], Sparsity(L1, 1.0))


def test_l2_certificate_uses_expectation_not_support():
    # one support point has ||r||^2 = 2 but the mean is 1
    env = Environment([1.0], [([0.5, 0.5], [[1.0, 1.0], [0.0, 0.0]])], Sparsity(L2, 1.0))
    assert expected_sq_norm(env) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Environment([1.0], [([0.6, 0.4], [[1.0, 1.0], [0.0, 0.0]])], Sparsity(L2, 1.0))


def test_sparsity_level_below_one_rejected():
    with pytest.raises(ValueError):
        Sparsity(L1, 0.5)


def test_json_round_trip_is_exact():
    env, _ = make_sparse_env(SparseEnvSpec(3, 5, 2.0, L1, "dense-scaled", 10), RngStream(1))
    back = Environment.from_json(env.to_json())
    assert back.to_json() == env.to_json()
    for a, b in zip(env.support_rewards, back.support_rewards):
        assert np.array_equal(a, b)
    assert np.array_equal(env.context_probs, back.context_probs)


def test_json_document_fields():
    d = json.loads(deterministic_env().to_json())
    assert set(d) == {"contexts", "rewards", "sparsity", "actions"}
    assert d["rewards"][0][0] == {"p": 1.0, "r": [1.0, 0.0]}


# -- sampling -----------------------------------------------------------------


def test_deterministic_law_sample():
    env = deterministic_env()
    for seed in range(5):
        x, r = sample_round(env, RngStream(seed))
        assert x == 0 and list(r) == [1.0, 0.0]


def test_lower_bound_context_frequency():
    env, _, _ = make_lower_bound_env(4, 0.25, RngStream(0))
    tape = draw_rounds(env, 10**5, RngStream(1))
    assert abs(np.mean(tape.contexts == 0) - 0.25) <= 0.01


def test_equal_mass_context_frequency():
    env = Environment([0.5, 0.5], [([1.0], [[1, 0]]), ([1.0], [[0, 1]])], Sparsity(L1, 1.0))
    tape = draw_rounds(env, 10**5, RngStream(2))
    assert abs(np.mean(tape.contexts == 1) - 0.5) <= 0.01


def test_draw_audit_counts_rounds():
    env = deterministic_env()
    with audit_draws() as n:
        draw_rounds(env, 17, RngStream(0))
        draw_rounds(env, 3, RngStream(1))
    assert n[0] == 20


@pytest.mark.parametrize("seed", range(3))
def test_exact_value_matches_monte_carlo(seed):
    env, Pi = make_sparse_env(SparseEnvSpec(4, 5, 2.0, L1, "random-s-sparse-binary", 6), RngStream(seed))
    tape = draw_rounds(env, 10**6, RngStream(seed, 99))
    row = Pi.table[0]
    draws = tape.pull(np.arange(len(tape)), row[tape.contexts])
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - policy_value_exact(env, row)) <= 4 * se + 1e-12


# -- exact values -------------------------------------------------------------


def test_policy_value_examples():
    env = deterministic_env()
    assert policy_value_exact(env, Policy((0,))) == 1.0
    assert policy_value_exact(env, Policy((1,))) == 0.0


def test_lower_bound_values():
    env, Pi, a_star = make_lower_bound_env(6, 0.1, RngStream(3))
    for row in Pi.table:
        v = policy_value_exact(env, row)
        assert v == pytest.approx(0.1 if row[0] == a_star else 0.0, abs=1e-15)


def test_lower_bound_small_enumeration():
    env, Pi, a_star = make_lower_bound_env(2, 0.5, RngStream(0))
    values = policy_values_exact(env, Pi)
    assert Pi.size == 4
    assert np.sum(np.isclose(values, 0.5)) == 2
    assert np.sum(values == 0) == 2


@pytest.mark.parametrize("A", [2, 5, 9])
def test_lower_bound_optimum(A):
    env, Pi, a_star = make_lower_bound_env(A, 0.3, RngStream(A))
    best, idx = best_policy_value(env, Pi)
    assert best == pytest.approx(0.3)
    assert Pi.table[idx, 0] == a_star
    assert np.sum(np.isclose(policy_values_exact(env, Pi), 0.3)) == A


@pytest.mark.parametrize("eps", [0.0, 1.0, 1.5])
def test_lower_bound_rejects_eps(eps):
    with pytest.raises(ValueError):
        make_lower_bound_env(4, eps, RngStream(0))


def test_best_policy_singleton_and_ties():
    env = deterministic_env((0.3, 0.7))
    assert best_policy_value(env, PolicyClass([[1]], 2)) == (pytest.approx(0.7), 0)
    Pi = PolicyClass([[0], [1], [1]], 2)
    assert best_policy_value(env, Pi)[1] == 1
    assert Pi.diagnostics["duplicates"] == 1


# -- marginals ----------------------------------------------------------------


def test_marginal_examples():
    Pi = PolicyClass([[0], [1]], 3)
    assert marginal_action_prob([0.5, 0.5], Pi, 0, 0) == 0.5
    Pi = PolicyClass([[2]], 3)
    assert marginal_action_prob([1.0], Pi, 0, 2) == 1.0
    assert marginal_action_prob([1.0], Pi, 0, 0) == 0.0
    Pi = PolicyClass([[0]] * 4, 3)
    assert marginal_action_prob(np.full(4, 0.25), Pi, 0, 0) == 1.0


def test_marginal_rejects_unnormalised_p():
    with pytest.raises(ValueError):
        marginal_action_prob([0.5, 0.4], PolicyClass([[0], [1]], 2), 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_marginals_sum_to_one(P, X, A, seed):
    gen = np.random.default_rng(seed)
    Pi = PolicyClass(gen.integers(A, size=(P, X)), A)
    p = gen.dirichlet(np.full(P, 0.3))
    p /= p.sum()
    Q = action_marginals(p, Pi)
    assert np.allclose(Q.sum(axis=1), 1.0, atol=1e-10)
    for x in range(X):
        total = sum(marginal_action_prob(p, Pi, x, a) for a in range(A))
        assert abs(total - 1) <= 1e-10


# -- generators ---------------------------------------------------------------


def test_one_hot_rewards_have_unit_norm():
    env, _ = make_sparse_env(SparseEnvSpec(5, 6, 1, L1, "one-hot", 12), RngStream(0))
    for r in env.support_rewards:
        assert np.all(r.sum(axis=1) == 1)


def test_dense_scaled_at_full_sparsity():
    env, _ = make_sparse_env(SparseEnvSpec(2, 4, 4, L1, "dense-scaled", 5), RngStream(0))
    assert certificate_holds(env)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 5),
    st.integers(2, 7),
    st.floats(1, 7),
    st.sampled_from([L1, L2]),
    st.sampled_from(["one-hot", "random-s-sparse-binary", "dense-scaled"]),
    st.integers(0, 2**32 - 1),
)
def test_generated_envs_pass_their_certificate(X, A, s, mode, style, seed):
    s = min(s, A)
    if style == "one-hot":
        s = 1.0
    Pi_size = min(6, A**X)
    env, Pi = make_sparse_env(SparseEnvSpec(X, A, s, mode, style, Pi_size), RngStream(seed))
    assert certificate_holds(env)
    if mode == L1:
        assert all(r.sum(axis=1).max() <= s + 1e-12 for r in env.support_rewards)
    else:
        assert expected_sq_norm(env) <= s + 1e-12
    # the class holds a policy optimal over every map X -> A
    best_any = float(env.context_probs @ env.mean_rewards.max(axis=1))
    assert best_policy_value(env, Pi)[0] == pytest.approx(best_any, abs=1e-12)


def test_generator_errors():
    with pytest.raises(ValueError):
        make_sparse_env(SparseEnvSpec(2, 3, 4, L1, "dense-scaled", 2), RngStream(0))
    with pytest.raises(ValueError):
        make_sparse_env(SparseEnvSpec(2, 3, 1, L1, "one-hot", 10), RngStream(0))


def test_semibandit_generator_shapes():
    env, Pi = make_sparse_env(SparseEnvSpec(3, 6, 1, L1, "one-hot", 8, m=2), RngStream(0))
    assert env.subset_size == 2 and Pi.subset_size == 2
    assert Pi.table.shape == (8, 3, 2)
    assert np.all(np.diff(Pi.table, axis=2) > 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_systematic_law_has_exact_marginals(mu):
    mu = np.array(mu)
    probs, rows = systematic_binary_law(mu)
    assert abs(probs.sum() - 1) < 1e-12
    assert np.allclose(probs @ rows, mu, atol=1e-9)
    ones = rows.sum(axis=1)
    assert ones.max() <= math.ceil(mu.sum() + 1e-9)
    assert ones.min() >= math.floor(mu.sum() - 1e-9)


@pytest.mark.parametrize("s", [1, 3, 8])
@pytest.mark.parametrize("overlap", [0.0, 0.5])
def test_planted_env_structure(s, overlap):
    env, Pi = make_planted_env(16, s, 0.2, 4, 30, RngStream(s), overlap=overlap)
    assert certificate_holds(env)
    values = policy_values_exact(env, Pi)
    star = Pi.diagnostics["optimal_indices"]
    assert np.isclose(values[star], values.max()).all()
    others = np.delete(values, star)
    if overlap == 0:
        assert np.all(values.max() - others >= 0.2 - 1e-12)
