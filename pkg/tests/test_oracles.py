import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecb.core import RngStream
from sparsecb.oracles import (
    SHIPPED_GENERATORS,
    AdaptedSequence,
    BernoulliSequence,
    ConstantSequence,
    CoverageReport,
    MartingaleGenerator,
    check_all_lemmas,
    freedman_mult_coverage,
    fuzz_harmonic,
    harmonic_bound_gap,
)


def test_harmonic_examples():
    assert harmonic_bound_gap([0, 0, 0]) == 0.0
    assert harmonic_bound_gap([1, 1, 1]) == pytest.approx(2 * math.log(4) - 11 / 6, abs=1e-15)
    assert harmonic_bound_gap([]) == 0.0


def test_harmonic_rejects_out_of_range():
    with pytest.raises(ValueError):
        harmonic_bound_gap([0.5, 1.2])
    with pytest.raises(ValueError):
        harmonic_bound_gap([-0.1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=200))
def test_harmonic_gap_nonnegative(a):
    assert harmonic_bound_gap(a) >= -1e-9


def test_batched_fuzz_agrees_with_scalar():
    # the batched path zero-pads; padding must not move either side
    gen = np.random.default_rng(0)
    a = gen.random(37)
    padded = np.concatenate([a, np.zeros(20)])
    assert harmonic_bound_gap(a) == pytest.approx(harmonic_bound_gap(padded), abs=1e-14)
    assert fuzz_harmonic(5000, RngStream(1)) >= -1e-9


def test_coverage_report_slack():
    assert CoverageReport(10_000, 500, 0.05).passed
    assert CoverageReport(10_000, 567, 0.05).passed
    assert not CoverageReport(10_000, 568, 0.05).passed


@pytest.mark.parametrize("tail", ["upper", "lower"])
def test_deterministic_sequence_never_violates(tail):
    rep = freedman_mult_coverage(ConstantSequence(0.3), 2.0, 2.0, 0.05, 1000, RngStream(0), tail=tail)
    assert rep.violations == 0 and rep.passed


@pytest.mark.parametrize("gen_", [BernoulliSequence(), AdaptedSequence()], ids=lambda g: g.name)
@pytest.mark.parametrize("delta", [0.01, 0.05, 0.1])
def test_random_generators_are_covered(gen_, delta):
    for tail in ("upper", "lower"):
        rep = freedman_mult_coverage(gen_, 1.0, 2.0, delta, 10_000, RngStream(3), tail=tail)
        assert rep.passed, (tail, rep.rate)


def test_adapted_means_track_history():
    X, means = AdaptedSequence().sample(np.random.default_rng(0), 4, 50, 1.0)
    hits = np.cumsum(X, axis=1) - X
    t = np.arange(50)
    assert np.allclose(means, 0.05 + 0.9 * (1 + hits) / (2 + t), atol=1e-15)


class _Overflowing(MartingaleGenerator):
    name = "overflow"

    def sample(self, gen, trials, T, B):
        X = np.full((trials, T), 2 * B)
        return X, X


def test_out_of_range_generator_rejected():
    with pytest.raises(ValueError, match="outside"):
        freedman_mult_coverage(_Overflowing(), 1.0, 2.0, 0.05, 10, RngStream(0))


def test_bad_arguments():
    with pytest.raises(ValueError):
        freedman_mult_coverage(ConstantSequence(), 1.0, 0.5, 0.05, 10, RngStream(0))
    with pytest.raises(ValueError):
        freedman_mult_coverage(ConstantSequence(), 1.0, 2.0, 0.05, 10, RngStream(0), tail="both")


def test_quick_lemma_suite():
    checks = check_all_lemmas(RngStream(0), n_harmonic=2000, n_hedge=50, n_hellinger=500,
                              coverage_trials=1000)
    assert len(checks) == 3 + 2 * 3 * len(SHIPPED_GENERATORS)
    assert all(c.passed for c in checks)
    assert checks[0].line().endswith("PASS")
