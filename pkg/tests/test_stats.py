import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from worldprobe.dataset import TransitionSet
from worldprobe.probes import TrainConfig, refit_recipe
from worldprobe.stats import (
    StatReport,
    aggregate_overall_p,
    block_bootstrap,
    block_bootstrap_indices,
    block_length,
    compare_one_way,
    compare_two_sided,
    permutation_p_value,
    permutation_test,
    r2_score,
)


def test_r2_perfect_and_mean_predictor():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(20, 3))
    assert r2_score(y, y) == 1.0
    assert r2_score(y, np.broadcast_to(y.mean(axis=0), y.shape)) == pytest.approx(0.0, abs=1e-12)


def test_r2_hand_computed():
    assert r2_score([0, 1, 2], [0, 0, 0]) == pytest.approx(-1.5)


def test_r2_zero_variance_is_nan_with_warning():
    with pytest.warns(RuntimeWarning, match="zero total variance"):
        assert math.isnan(r2_score(np.ones((5, 2)), np.zeros((5, 2))))
    with pytest.raises(ValueError):
        r2_score(np.ones((5, 2)), np.zeros((5, 2)), allow_nan=False)


def test_r2_uniform_average_differs_from_weighted():
    y = np.array([[0.0, 0.0], [1.0, 10.0], [2.0, 20.0]])
    yh = y + np.array([[0.5, 0.5]])
    # weighted: 1 - 1.5 / (2 + 200); uniform: mean(1 - 0.75/2, 1 - 0.75/200)
    assert r2_score(y, yh) == pytest.approx(1 - 1.5 / 202)
    assert r2_score(y, yh, "uniform_average") == pytest.approx(0.5 * (1 - 0.375 + 1 - 0.00375))


@settings(max_examples=50)
@given(arrays(np.float64, (12, 3), elements=st.floats(-100, 100)),
       arrays(np.float64, (12, 3), elements=st.floats(-100, 100)))
def test_r2_matches_loop_oracle(y, yh):
    if ((y - y.mean(axis=0)) ** 2).sum() < 1e-6:
        return
    assert r2_score(y, yh) == pytest.approx(oracles.r2_loop(y, yh), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("n, b", [(8, 2), (27, 3), (1000, 10), (1, 2), (63, 3), (64, 4), (999, 9)])
def test_block_length(n, b):
    assert block_length(n) == b


@given(st.integers(min_value=1, max_value=10**9))
def test_block_length_property(n):
    assert block_length(n) == max(2, oracles.cube_root_floor(n))


def test_bootstrap_indices_are_contiguous_blocks():
    idx = block_bootstrap_indices(20, 3, 5, seed=0)
    assert idx.shape == (5, 20)
    for row in idx:
        for start in range(0, 18, 3):
            blk = row[start : start + 3]
            assert np.all(np.diff(blk) == 1)
        assert row.min() >= 0 and row.max() < 20


def test_bootstrap_report_contents():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(300, 2))
    yh = y + 0.5 * rng.normal(size=(300, 2))
    rep = block_bootstrap(y, yh, n_reps=200, seed=3)
    assert rep.block_length == 6 and rep.n == 300 and rep.n_reps == 200
    assert rep.r2 == pytest.approx(r2_score(y, yh))
    assert rep.se == pytest.approx(np.std(rep.replicates, ddof=1))
    lo, hi = rep.ci[95]
    assert lo == pytest.approx(rep.r2 - 1.959963984540054 * rep.se)
    assert rep.ci[99][1] - rep.ci[99][0] > hi - lo > rep.ci[90][1] - rep.ci[90][0]


def test_bootstrap_determinism():
    rng = np.random.default_rng(2)
    y, yh = rng.normal(size=100), rng.normal(size=100)
    a = block_bootstrap(y, yh, n_reps=50, seed=9)
    b = block_bootstrap(y, yh, n_reps=50, seed=9)
    c = block_bootstrap(y, yh, n_reps=50, seed=10)
    np.testing.assert_array_equal(a.replicates, b.replicates)
    assert a.to_dict() == b.to_dict() and a.se != c.se


def test_bootstrap_replicates_prefix_stable():
    # Replicate i depends only on (seed, i): asking for more replicates extends the set.
    rng = np.random.default_rng(3)
    y, yh = rng.normal(size=64), rng.normal(size=64)
    few = block_bootstrap(y, yh, n_reps=10, seed=1)
    many = block_bootstrap(y, yh, n_reps=30, seed=1)
    np.testing.assert_array_equal(few.replicates, many.replicates[:10])


def test_bootstrap_too_short():
    with pytest.raises(ValueError):
        block_bootstrap(np.arange(3.0), np.arange(3.0))


def test_stat_report_round_trip():
    rep = block_bootstrap(np.arange(50.0), np.arange(50.0) + 1, n_reps=20)
    back = StatReport.from_dict(rep.to_dict())
    assert back.r2 == rep.r2 and back.ci[95] == pytest.approx(rep.ci[95])


def test_permutation_p_value_formula():
    assert permutation_p_value(1.0, np.zeros(100)) == pytest.approx(1 / 101)
    null = np.concatenate([np.full(4, 2.0), np.zeros(96)])
    assert permutation_p_value(1.0, null) == pytest.approx(5 / 101)
    assert permutation_p_value(-1.0, np.zeros(100)) == 1.0


def _transition_set(X, Y):
    n = len(X)
    return TransitionSet(X, Y, np.zeros(n, dtype=np.int64), np.arange(n), 1, "activations", 0)


def _least_squares_fit(train):
    W = np.linalg.lstsq(train.X, train.Y, rcond=None)[0]
    return lambda X: X @ W


def test_permutation_null_is_roughly_uniform():
    ps = []
    for r in range(50):
        rng = np.random.default_rng(100 + r)
        X = rng.normal(size=(90, 3))
        Y = rng.normal(size=(90, 2))
        train, test = _transition_set(X[:60], Y[:60]), _transition_set(X[60:], Y[60:])
        ps.append(permutation_test(train, test, _least_squares_fit, n_perm=50, seed=r).p_value)
    assert 0.4 <= np.mean(ps) <= 0.6


def test_permutation_only_shuffles_training_targets():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(80, 3))
    Y = X @ rng.normal(size=(3, 2))
    train, test = _transition_set(X[:60], Y[:60]), _transition_set(X[60:], Y[60:])
    test_before = test.Y.copy()
    seen = []

    def fit(ts):
        seen.append(ts.Y.copy())
        return _least_squares_fit(ts)

    res = permutation_test(train, test, fit, n_perm=20, seed=0)
    np.testing.assert_array_equal(test.Y, test_before)
    assert res.p_value == pytest.approx(1 / 21)
    assert all(sorted(map(tuple, s)) == sorted(map(tuple, train.Y)) for s in seen)


def test_permutation_thread_independent():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 4))
    Y = X[:, :2] + rng.normal(size=(120, 2))
    train, test = _transition_set(X[:90], Y[:90]), _transition_set(X[90:], Y[90:])
    fit = refit_recipe("linear", TrainConfig(), lr=1e-2, lam=1e-6, epochs=10)
    a = permutation_test(train, test, fit, n_perm=12, seed=1)
    b = permutation_test(train, test, fit, n_perm=12, seed=1, threads=4)
    np.testing.assert_array_equal(a.null_r2, b.null_r2)


def _report(r2, se):
    return StatReport(r2, se, {}, 100, 400, 4, 0)


def test_one_way_symmetry():
    res = compare_one_way(_report(0.3, 0.05), _report(0.3, 0.05))
    assert res.z == 0.0 and res.p_one_sided == pytest.approx(0.5)


def test_one_way_disjoint_intervals():
    adv = StatReport(0.45, 0.02, {95: (0.4, 0.5)}, 100, 400, 4, 0)
    base = StatReport(0.15, 0.02, {95: (0.1, 0.2)}, 100, 400, 4, 0)
    res = compare_one_way(adv, base, levels=(95,))
    assert res.ci_overlap[95] is False and res.significant[95]
    assert res.z == pytest.approx(0.3 / math.sqrt(0.0008))


def test_one_way_zero_se_rejected():
    with pytest.raises(ValueError):
        compare_one_way(_report(0.3, 0.0), _report(0.2, 0.0))


def test_two_sided_outcomes():
    res = compare_two_sided(_report(0.5, 0.01), _report(0.3, 0.01))
    assert all(v == "linear_wins" for v in res.per_level.values()) and res.absolute == "linear_wins"
    tie = compare_two_sided(_report(0.30, 0.05), _report(0.35, 0.05))
    assert all(v == "tie" for v in tie.per_level.values()) and tie.absolute == "mlp_wins"
    mixed = compare_two_sided(_report(0.5, 0.01), _report(0.46, 0.01))
    assert mixed.per_level[90] == "linear_wins" and mixed.per_level[99] == "tie"


def test_fisher_identities():
    assert aggregate_overall_p([0.01]).p_value == pytest.approx(0.01)
    assert aggregate_overall_p([1.0, 1.0, 1.0]).p_value == pytest.approx(1.0)
    assert aggregate_overall_p([0.2, 0.03]).p_value == pytest.approx(oracles.fisher_two(0.2, 0.03))


def test_fisher_for_123_minimal_p_values():
    res = aggregate_overall_p([1 / 101] * 123)
    assert res.p_value < 1e-4 and res.k == 123


def test_fisher_rejects_bad_input():
    for bad in ([], [0.0], [1.2], [float("nan")]):
        with pytest.raises(ValueError):
            aggregate_overall_p(bad)
