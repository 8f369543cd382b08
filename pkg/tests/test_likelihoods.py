import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ELEVEN_TRUTH, eleven_data, eleven_model, two_length_model
from csvgd.diffsim import State, TrajectorySet, make_trajectory
from csvgd.likelihoods import (DIVERGED_LOGLIK, AugmentedParams, LikelihoodConfig, ParamLimits,
                               ShootingProblem, defect_log_likelihood, denormalize, g_def, g_lim,
                               logsumexp, multiple_shooting_ll, normalize, set_log_likelihood,
                               single_shooting_ll, step_log_likelihood, uniform_log_prior,
                               window_bounds)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def count_local_minima(v):
    v = np.asarray(v)
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


# -- elementary densities -------------------------------------------------------------

def test_step_ll_zero_residual():
    assert step_log_likelihood([0.3], [0.3], 1.0) == pytest.approx(-0.9189385, abs=1e-7)


def test_step_ll_unit_residual():
    assert step_log_likelihood([1.0], [0.0], 1.0) == pytest.approx(-1.4189385, abs=1e-7)


def test_step_ll_doubling_sigma():
    a = step_log_likelihood([0.0, 0.0], [0.0, 0.0], 1.0)
    b = step_log_likelihood([0.0, 0.0], [0.0, 0.0], 2.0)
    assert b - a == pytest.approx(-2 * math.log(2))


def test_defect_ll_examples():
    assert defect_log_likelihood([1, 2, 3, 4], [1, 2, 3, 4], 0.1) == pytest.approx(
        4 * -0.5 * math.log(2 * math.pi * 0.01))
    unit = defect_log_likelihood([1.0], [0.0], 0.1)
    assert unit == pytest.approx(-50 - 0.5 * math.log(2 * math.pi * 0.01))


@settings(max_examples=50)
@given(st.floats(0.01, 3.0), st.floats(0.05, 1.0), st.floats(0.1, 0.9))
def test_defect_ll_decreases_with_smaller_sigma(d, s, shrink):
    # a smaller sigma concentrates the density; beyond one sigma the value drops
    d = max(d, s)
    assert defect_log_likelihood([d], [0.0], s * shrink) < defect_log_likelihood([d], [0.0], s)


def test_g_lim():
    lim = ParamLimits(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(g_lim([0.2, 1.0], lim), [0.0, 0.0])
    assert g_lim([0.2, 1.5], lim)[1] == pytest.approx(-0.5)
    # ||g_lim||^2 is flat inside the box
    eps = 1e-6
    sq = lambda x: sum(v * v for v in g_lim([x, 0.5], lim))
    assert (sq(0.5 + eps) - sq(0.5 - eps)) / (2 * eps) == 0.0


def test_g_def():
    np.testing.assert_array_equal(g_def([[1.0, 2.0]], [[1.0, 2.0]], 0.1), [0.0])
    assert g_def([[1.0, 0.0]], [[0.0, 0.0]], 1.0)[0] == 1.0
    assert g_def([[0.3, 0.4]], [[0.0, 0.0]], 0.05)[0] == pytest.approx(
        4 * g_def([[0.3, 0.4]], [[0.0, 0.0]], 0.1)[0])


def test_uniform_prior():
    assert uniform_log_prior([0.5, 0.5], ParamLimits(np.zeros(2), np.ones(2))) == 0.0
    assert uniform_log_prior([1.5, 0.5], ParamLimits(np.zeros(2), np.ones(2))) == -math.inf
    assert uniform_log_prior([1.0, 1.0], ParamLimits(np.zeros(2), np.full(2, 2.0))) == \
        pytest.approx(-2 * math.log(2))


def test_normalize():
    np.testing.assert_array_equal(normalize(np.array([1.0, -2.0]), [1.0, 1.0]), [1.0, -2.0])
    np.testing.assert_array_equal(normalize(np.array([2.0]), [4.0]), [0.5])
    w = np.random.default_rng(0).normal(size=5)
    v = np.random.default_rng(1).uniform(0.1, 5, size=5)
    np.testing.assert_allclose(denormalize(normalize(w, v), v), w, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        normalize(np.ones(2), [1.0, 0.0])


def test_logsumexp_no_overflow():
    assert math.isfinite(logsumexp([-1e6, -1e6 - 5]))
    assert logsumexp([-1e6, -math.inf]) == pytest.approx(-1e6)
    assert logsumexp([-math.inf, -math.inf]) == -math.inf


def test_config_invariants():
    for bad in (dict(sigma_obs=0.0), dict(sigma_def=-1.0), dict(num_windows=0),
                dict(combination="mean")):
        with pytest.raises(ValueError):
            LikelihoodConfig(**bad)
    with pytest.raises(ValueError):
        window_bounds(10, LikelihoodConfig(num_windows=4, window_length=3))
    assert window_bounds(10, LikelihoodConfig(num_windows=3)) == [(0, 3), (3, 6), (6, 10)]


def test_augmented_round_trip():
    rng = np.random.default_rng(0)
    aug = AugmentedParams(rng.normal(size=3), rng.normal(size=(2, 4, 4)), rng.uniform(size=(2, 4)),
                          rng.uniform(size=3))
    flat = aug.flatten()
    assert flat.size == AugmentedParams.flat_size(3, 2, 5)
    # one trajectory: M + (n_s - 1) * 4 + (n_s - 1) + M
    assert AugmentedParams.flat_size(3, 1, 5) == 3 + 16 + 4 + 3
    back = AugmentedParams.unflatten(flat, 3, 2, 5)
    np.testing.assert_array_equal(back.flatten(), flat)
    np.testing.assert_array_equal(flat[:3], aug.theta)
    with pytest.raises(ValueError):
        AugmentedParams.unflatten(flat[:-1], 3, 2, 5)


# -- trajectory likelihoods ------------------------------------------------------------

@pytest.fixture
def self_generated(pendulum2):
    theta = np.array([1.5, 2.0])
    tr = make_trajectory(pendulum2, theta, State((math.pi / 2, 0.3), (0.0, 0.0)), 60)
    return pendulum2, tr, theta


def test_single_shooting_self_consistency(self_generated):
    model, tr, theta = self_generated
    cfg = LikelihoodConfig()
    bound = 60 * 4 * (-0.5 * math.log(2 * math.pi * 0.01))
    assert float(single_shooting_ll(tr, list(theta), model, cfg)) == pytest.approx(bound, abs=1e-9)
    rng = np.random.default_rng(0)
    for th in rng.uniform(0.5, 5.0, size=(10, 2)):
        assert float(single_shooting_ll(tr, list(th), model, cfg)) <= bound + 1e-9


def test_one_window_equals_single_shooting(self_generated):
    model, tr, _ = self_generated
    th = [1.7, 1.9]
    ms, defects = multiple_shooting_ll(tr, th, model, LikelihoodConfig(num_windows=1))
    assert defects == []
    assert ms == single_shooting_ll(tr, th, model, LikelihoodConfig())
    ts = TrajectorySet([tr])
    a = ShootingProblem(model, ts, LikelihoodConfig(num_windows=1)).evaluate(np.array([th]))
    b = ShootingProblem(model, ts, LikelihoodConfig()).evaluate(np.array([th]))
    assert a.log_obs[0] == b.log_obs[0]


def test_true_shooting_states_give_zero_defects(self_generated):
    model, tr, theta = self_generated
    cfg = LikelihoodConfig(num_windows=4)
    problem = ShootingProblem(model, TrajectorySet([tr]), cfg)
    shoot = problem.initial_shooting_states()   # observed states at the boundaries
    ll, defects = multiple_shooting_ll(tr, list(theta), model, cfg, shoot[0])
    np.testing.assert_allclose(defects, 0.0, atol=1e-20)
    assert float(ll) == pytest.approx(float(single_shooting_ll(tr, list(theta), model, cfg)),
                                      abs=1e-9)
    ev = problem.evaluate(theta[None], shoot[None], with_grad=False)
    np.testing.assert_allclose(ev.defect_sq, 0.0, atol=1e-20)


def test_batched_matches_scalar(small_set, pendulum2):
    cfg = LikelihoodConfig(num_windows=3, combination="sum")
    problem = ShootingProblem(pendulum2, small_set, cfg)
    rng = np.random.default_rng(1)
    theta = rng.uniform(1.0, 3.0, size=(4, 2))
    shoot = problem.initial_shooting_states()[None] + rng.normal(0, 0.01, size=(4, 3, 2, 4))
    ev = problem.evaluate(theta, shoot, with_grad=False)
    for n in range(4):
        ref = set_log_likelihood(small_set, list(theta[n]), pendulum2, cfg, shoot[n])
        assert ev.log_obs[n] == pytest.approx(float(ref), rel=1e-10)
        _, defects = multiple_shooting_ll(small_set[0], list(theta[n]), pendulum2, cfg, shoot[n, 0],
                                          variance=problem.variance)
        np.testing.assert_allclose(ev.defect_sq[n, 0], defects, rtol=1e-9)


def test_set_combinations(self_generated):
    model, tr, _ = self_generated
    th = [1.4, 2.2]
    one = TrajectorySet([tr])
    s = set_log_likelihood(one, th, model, LikelihoodConfig(combination="sum"))
    p = set_log_likelihood(one, th, model, LikelihoodConfig(combination="product"))
    assert float(s) == pytest.approx(float(p))
    two = TrajectorySet([tr, tr])
    assert float(set_log_likelihood(two, th, model, LikelihoodConfig())) == pytest.approx(float(s))


def test_sum_is_permutation_invariant(small_set, pendulum2):
    problem = ShootingProblem(pendulum2, small_set, LikelihoodConfig())
    swapped = ShootingProblem(pendulum2, TrajectorySet(list(small_set)[::-1]), LikelihoodConfig())
    theta = np.array([[1.6, 2.1], [0.9, 3.3]])
    np.testing.assert_allclose(problem.evaluate(theta, with_grad=False).log_obs,
                               swapped.evaluate(theta, with_grad=False).log_obs, rtol=1e-13)


def test_sum_versus_product_for_two_parameter_sets():
    model = two_length_model()
    a, b = np.array([1.2, 2.0]), np.array([1.8, 2.0])
    x0 = State((math.pi / 2, 0.0), (0.0, 0.0))
    data = TrajectorySet([make_trajectory(model, a, x0, 100), make_trajectory(model, b, x0, 100)])
    g1 = np.linspace(1.0, 2.0, 41)
    g2 = np.linspace(1.7, 2.3, 25)
    grid = np.array([(x, y) for x in g1 for y in g2])
    # a shared, fixed normalization keeps both surfaces on the same scale
    norm = tuple(np.ones(4))
    prod = ShootingProblem(model, data, LikelihoodConfig(combination="product", normalization=norm))
    mix = ShootingProblem(model, data, LikelihoodConfig(combination="sum", normalization=norm))
    lp = prod.evaluate(grid, with_grad=False).log_obs.reshape(41, 25)
    ls = mix.evaluate(grid, with_grad=False).log_obs.reshape(41, 25)
    i, j = np.unravel_index(np.argmax(lp), lp.shape)
    assert 1.2 < g1[i] < 1.8
    # the mixture peaks at each true parameter vector
    ia, ib, j2 = np.argmin(abs(g1 - 1.2)), np.argmin(abs(g1 - 1.8)), np.argmin(abs(g2 - 2.0))
    mid = np.argmin(abs(g1 - 1.5))
    for idx in (ia, ib):
        assert ls[idx, j2] == ls[max(idx - 2, 0):idx + 3, max(j2 - 2, 0):j2 + 3].max()
    assert ls[mid, j2] < min(ls[ia, j2], ls[ib, j2]) - 10


def test_divergence_sentinel():
    model = two_length_model(dt=5.0)
    tr = make_trajectory(two_length_model(), np.array([1.5, 2.0]),
                         State((2.5, 1.0), (0.0, 0.0)), 30)
    ev = ShootingProblem(model, TrajectorySet([tr]), LikelihoodConfig()).evaluate(
        np.array([[1.5, 2.0]]))
    assert ev.diverged[0]
    assert ev.log_obs[0] <= DIVERGED_LOGLIK
    assert np.all(np.isfinite(ev.d_theta))


# -- gradients ----------------------------------------------------------------------------

def _fd_unit(problem, theta, shoot, fn, h=1e-5):
    u = problem.to_unit(theta)
    out = np.zeros(u.size)
    for i in range(u.size):
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fn(problem.evaluate(problem.from_unit(up)[None], shoot, False))
                  - fn(problem.evaluate(problem.from_unit(dn)[None], shoot, False))) / (2 * h)
    return out


def _rel(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n_s", [1, 4])
def test_parameter_gradients(seed, n_s):
    rng = np.random.default_rng(seed)
    model = eleven_model()
    lo, hi = model.lower, model.upper
    data = TrajectorySet([make_trajectory(model, lo + rng.uniform(0.2, 0.8, 11) * (hi - lo),
                                          State(rng.uniform(-2, 2, 2), rng.uniform(-1, 1, 2)), 60)])
    problem = ShootingProblem(model, data, LikelihoodConfig(num_windows=n_s))
    theta = lo + rng.uniform(0.2, 0.8, 11) * (hi - lo)
    shoot = None
    if n_s > 1:
        shoot = problem.initial_shooting_states()[None] + rng.normal(0, 0.05, (1, 1, n_s - 1, 4))
    ev = problem.evaluate(theta[None], shoot)
    w = problem.limits.width
    assert _rel(ev.d_theta[0] * w, _fd_unit(problem, theta, shoot, lambda e: e.log_obs[0])) < 1e-4
    if n_s > 1:
        for b in range(n_s - 1):
            fd = _fd_unit(problem, theta, shoot, lambda e: e.defect_sq[0, 0, b])
            assert _rel(ev.dsq_theta[0, 0, b] * w, fd) < 1e-4


def test_shooting_state_gradients():
    rng = np.random.default_rng(7)
    model = two_length_model()
    data = TrajectorySet([make_trajectory(model, np.array([1.5, 2.0]),
                                          State((1.0, 0.5), (0.0, 0.0)), 60)])
    problem = ShootingProblem(model, data, LikelihoodConfig(num_windows=4))
    theta = np.array([[1.7, 1.8]])
    shoot = problem.initial_shooting_states()[None] + rng.normal(0, 0.05, (1, 1, 3, 4))
    ev = problem.evaluate(theta, shoot)
    h = 1e-6
    for b in range(3):
        for d in range(4):
            up, dn = shoot.copy(), shoot.copy()
            up[0, 0, b, d] += h
            dn[0, 0, b, d] -= h
            e_up = problem.evaluate(theta, up, False)
            e_dn = problem.evaluate(theta, dn, False)
            fd_ll = (e_up.log_obs[0] - e_dn.log_obs[0]) / (2 * h)
            assert _rel(np.array([ev.d_shoot[0, 0, b, d]]), np.array([fd_ll])) < 1e-4
            # squared defect at boundary b depends on its own state and on the previous window's start
            fd_self = (e_up.defect_sq[0, 0, b] - e_dn.defect_sq[0, 0, b]) / (2 * h)
            assert _rel(np.array([ev.dsq_self[0, 0, b, d]]), np.array([fd_self])) < 1e-4
            if b + 1 < 3:
                fd_next = (e_up.defect_sq[0, 0, b + 1] - e_dn.defect_sq[0, 0, b + 1]) / (2 * h)
                assert _rel(np.array([ev.dsq_prev[0, 0, b + 1, d]]), np.array([fd_next])) < 1e-4


# -- landscapes -----------------------------------------------------------------------------

def _slice_counts(n):
    model = two_length_model()
    tr = make_trajectory(model, np.array([1.5, 2.0]), State((math.pi / 2, math.pi / 2), (0, 0)), 400)
    grid = np.linspace(0.5, 5.0, n)
    theta = np.stack([grid, np.full(n, 2.0)], axis=1)
    counts = []
    for n_s in (1, 10):
        problem = ShootingProblem(model, TrajectorySet([tr]), LikelihoodConfig(num_windows=n_s))
        counts.append(count_local_minima(-problem.evaluate(theta, with_grad=False).log_obs))
    return counts


def test_multiple_shooting_smooths_slice():
    ss, ms = _slice_counts(200)
    assert ms < ss


@pytest.mark.xfail(strict=True, reason="five minima on the 50-point slice for the chosen start state")
def test_single_shooting_slice_is_rugged_on_coarse_grid():
    ss, _ = _slice_counts(50)
    assert ss > 5


def test_eleven_parameter_truth_is_best():
    data = eleven_data(2, 80)
    problem = ShootingProblem(eleven_model(), data, LikelihoodConfig(combination="product"))
    rng = np.random.default_rng(0)
    others = problem.from_unit(rng.uniform(size=(20, 11)))
    ll = problem.evaluate(np.vstack([ELEVEN_TRUTH, others]), with_grad=False).log_obs
    assert np.argmax(ll) == 0
