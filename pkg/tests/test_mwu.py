import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecb.core import RngStream
from sparsecb.mwu import Hedge, WeightVector, hedge_regret_gap, hedge_step, sample_policy
from sparsecb.oracles import fuzz_hedge


def test_log_two_step():
    eta = 0.25
    w = hedge_step(WeightVector.uniform(2, eta, 4.0), [math.log(2) / eta, 0.0])
    assert np.allclose(w.probabilities(), [2 / 3, 1 / 3], atol=1e-14)


def test_constant_gain_leaves_probabilities():
    w = WeightVector(np.log([0.2, 0.3, 0.5]), 0.1, 10.0)
    w2 = hedge_step(w, [3.0, 3.0, 3.0])
    assert np.allclose(w2.probabilities(), w.probabilities(), atol=1e-12)


def test_zero_gains_stay_uniform():
    w = WeightVector.uniform(7, 0.5, 2.0)
    for _ in range(1000):
        w = hedge_step(w, np.zeros(7))
    assert np.allclose(w.probabilities(), 1 / 7, atol=1e-12)


@pytest.mark.parametrize("u", [[-0.1, 0.0], [0.0, 2.5]])
def test_out_of_range_gains_rejected(u):
    with pytest.raises(ValueError):
        hedge_step(WeightVector.uniform(2, 0.5, 2.0), u)


def test_eta_above_inverse_bound_rejected():
    with pytest.raises(ValueError):
        WeightVector.uniform(3, 0.6, 2.0)
    with pytest.raises(ValueError):
        hedge_regret_gap(np.zeros((1, 3)), 0.6, np.ones(3) / 3, 2.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 10), st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_shift_invariance(n, c, seed):
    gen = np.random.default_rng(seed)
    w = WeightVector(gen.normal(size=n), 0.3, 3.0)
    u = gen.uniform(0, 3, size=n)
    a = hedge_step(w, u, check_bounds=False).probabilities()
    b = hedge_step(w, u + c, check_bounds=False).probabilities()
    assert np.allclose(a, b, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_normalisation_after_steps(n, T, seed):
    gen = np.random.default_rng(seed)
    R = 50.0
    w = WeightVector.uniform(n, 1 / R, R)
    for _ in range(T):
        w = hedge_step(w, gen.uniform(0, R, size=n))
    assert abs(w.probabilities().sum() - 1) <= 1e-10


def test_point_mass_sampling():
    w = WeightVector(np.array([0.0, -1e6, -1e6]), 0.1, 1.0)
    gen = RngStream(0).generator()
    assert {sample_policy(w, gen) for _ in range(200)} == {0}


@pytest.mark.parametrize("probs", [[0.25] * 4, [0.9, 0.1]])
def test_sampling_frequencies(probs):
    w = WeightVector(np.log(probs), 0.1, 1.0)
    gen = RngStream(5).generator()
    draws = np.array([sample_policy(w, gen) for _ in range(10**5)])
    freq = np.bincount(draws, minlength=len(probs)) / draws.size
    assert np.all(np.abs(freq - probs) <= 0.01)


def test_sampling_is_deterministic():
    w = WeightVector(np.log([0.1, 0.2, 0.7]), 0.1, 1.0)
    a = [sample_policy(w, RngStream(3).generator()) for _ in range(5)]
    b = [sample_policy(w, RngStream(3).generator()) for _ in range(5)]
    assert a == b


def test_mutable_learner_matches_pure_steps():
    gen = np.random.default_rng(0)
    h = Hedge(5, 0.2, 5.0)
    w = WeightVector.uniform(5, 0.2, 5.0)
    for _ in range(30):
        members = np.flatnonzero(gen.random(5) < 0.5)
        v = float(gen.uniform(0, 5))
        u = np.zeros(5)
        u[members] = v
        h.update_on(members, v)
        w = hedge_step(w, u)
    assert np.allclose(h.probabilities(), w.probabilities(), atol=1e-12)


def test_regret_gap_zero_gains():
    n, eta = 6, 0.5
    gap = hedge_regret_gap(np.zeros((10, n)), eta, np.ones(n) / n, 2.0)
    assert gap == pytest.approx(-math.log(n) / eta)


def test_regret_gap_single_step():
    R = 3.0
    gap = hedge_regret_gap([[R, 0.0]], 1 / R, [1.0, 0.0], R)
    assert gap == pytest.approx(-R * math.log(2), abs=1e-12)


def test_regret_gap_fuzz():
    assert fuzz_hedge(500, RngStream(11)) <= 1e-9
