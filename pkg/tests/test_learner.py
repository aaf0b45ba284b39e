import itertools

import numpy as np
import pytest

from horizon_irl.features import (CONDITIONS, FEATURE_IDS, DriverConstants, DrivingCondition,
                                  NormalizationTable, classify_condition, raw_features)
from horizon_irl.harness import (GroundTruthDriver, LeaderScenario, default_feature_scales,
                                 drive_scenario)
from horizon_irl.learner import (HorizonProblem, LearnerConfig, LearningError,
                                 QuinticPlanBatch, WeightFit, expected_features, learn_all,
                                 learn_segment_weights, learn_weights, observed_features,
                                 optimize_subsegment, pick_best_horizon, select_horizon)
from horizon_irl.trajectory import partition_segment, segment_log

from conftest import make_log

STEADY, FREE, UNSTEADY = (DrivingCondition.STEADY, DrivingCondition.FREE,
                          DrivingCondition.UNSTEADY)
CONSTS = DriverConstants(tau=1.2, d_s=5.0, v_d=25.0)


def unit_table():
    lo = {c: np.zeros(len(FEATURE_IDS[c])) for c in CONDITIONS}
    hi = {c: np.ones(len(FEATURE_IDS[c])) for c in CONDITIONS}
    return NormalizationTable(lo, hi)


def leader(n=30, pos=50.0, vel=20.0, dt=0.1):
    t = np.arange(n) * dt
    return pos + vel * t, np.full(n, vel)


# --- inner optimization -----------------------------------------------------------

def test_desired_speed_only_keeps_zero_guess():
    lp, lv = leader()
    res = optimize_subsegment((0.0, 25.0, 0.0), lp, lv, [0.0, 1.0, 0.0], FREE, CONSTS,
                              unit_table(), 3.0)
    np.testing.assert_allclose(res.coeffs.free, 0.0, atol=1e-12)
    assert res.objective == pytest.approx(0.0, abs=1e-18)


def test_acceleration_only_beats_grid_search():
    lp, lv = leader(20)
    N = 2.0
    init = np.array([0.0, 15.0, 1.5])
    W = np.array([1.0, 0.0, 0.0, 0.0])
    res = optimize_subsegment(init, lp, lv, W, STEADY, CONSTS, unit_table(), N)
    batch = QuinticPlanBatch(init[None], lp[None], lv[None], 0.1, STEADY, CONSTS,
                             unit_table(), horizon=N)
    grid = np.arange(-1.0, 1.0 + 1e-9, 0.05)
    y = np.array(list(itertools.product(grid, grid, grid)))
    z = y * N ** np.array([3.0, 4.0, 5.0])
    obj = batch.objective(W, np.zeros((1, 3)))[0]
    grid_obj = (batch.scaled_features(z) @ W)
    assert res.objective <= grid_obj.min() + 1e-12
    assert res.objective <= obj


def test_all_ones_descends_from_zero_guess():
    lp, lv = leader(40, pos=30.0, vel=15.0)
    init = (0.0, 18.0, 0.5)
    res = optimize_subsegment(init, lp, lv, np.ones(4), STEADY, CONSTS, unit_table(), 4.0)
    batch = QuinticPlanBatch(np.array([init]), lp[None], lv[None], 0.1, STEADY, CONSTS,
                             unit_table(), horizon=4.0)
    assert res.objective <= batch.objective(np.ones(4), np.zeros((1, 3)))[0]
    assert res.converged


def test_newton_and_bfgs_agree_with_exponential_feature():
    lp, lv = leader(30, pos=6.0, vel=14.0)
    table = unit_table()
    W = np.array([0.1, 0.01, 50.0])
    init = (0.0, 16.0, 0.0)
    a = optimize_subsegment(init, lp, lv, W, FREE, CONSTS, table, 3.0)
    b = optimize_subsegment(init, lp, lv, W, FREE, CONSTS, table, 3.0, method="bfgs")
    assert a.objective <= b.objective + 1e-9 * max(1.0, abs(b.objective))
    assert a.objective == pytest.approx(b.objective, rel=1e-6)


def test_unknown_inner_method():
    lp, lv = leader()
    with pytest.raises(ValueError):
        optimize_subsegment((0, 20, 0), lp, lv, np.ones(4), STEADY, CONSTS, unit_table(), 3.0,
                            method="simplex")


def test_wrong_weight_length():
    lp, lv = leader()
    with pytest.raises(LearningError):
        optimize_subsegment((0, 20, 0), lp, lv, np.ones(3), STEADY, CONSTS, unit_table(), 3.0)


def test_analytic_gradient_matches_central_differences(rng):
    lp, lv = leader(30, pos=8.0, vel=12.0)
    table = default_feature_scales()
    for cond in CONDITIONS:
        d = len(FEATURE_IDS[cond])
        batch = QuinticPlanBatch(np.array([[0.0, 14.0, 0.3]]), lp[None], lv[None], 0.1, cond,
                                 CONSTS, table, horizon=3.0)
        for _ in range(5):
            W = rng.uniform(0.1, 2.0, d)
            z = rng.normal(size=(1, 3))
            g = batch.gradient(W, z)[0]
            h = 1e-5
            fd = np.array([(batch.objective(W, z + h * e)[0] - batch.objective(W, z - h * e)[0])
                           / (2 * h) for e in np.eye(3)[:, None, :]])
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8 * np.abs(fd).max())


def test_argmin_is_invariant_to_weight_scale():
    lp, lv = leader(30, pos=25.0, vel=14.0)
    W = np.array([0.3, 0.2, 1.4, 0.9])
    a = optimize_subsegment((0.0, 16.0, -0.5), lp, lv, W, STEADY, CONSTS, unit_table(), 3.0)
    b = optimize_subsegment((0.0, 16.0, -0.5), lp, lv, 7.5 * W, STEADY, CONSTS, unit_table(),
                            3.0)
    np.testing.assert_allclose(a.coeffs.free, b.coeffs.free, rtol=1e-9, atol=1e-12)
    assert b.objective == pytest.approx(7.5 * a.objective)


# --- observed and expected features -------------------------------------------------

def equilibrium_segment(v=25.0):
    gap = CONSTS.tau * v + CONSTS.d_s
    return segment_log(make_log(np.full(121, v), v, gap0=gap, v_d=25.0))[0]


def test_single_subsegment_equals_its_features():
    seg = segment_log(make_log(np.linspace(10, 14, 121), 12.0, gap0=30.0))[0]
    table = default_feature_scales()
    sub = partition_segment(seg, 12.0)[0]
    raw = raw_features(sub.ego_pos, sub.ego_vel, sub.ego_acc, sub.leader_pos, sub.leader_vel,
                       sub.dt, STEADY, CONSTS)
    fv = observed_features(seg, 12.0, STEADY, CONSTS, table)
    np.testing.assert_allclose(fv.values, table.scale(raw, STEADY))


def test_identical_subsegments_average_to_the_same_vector():
    seg = segment_log(make_log(np.full(121, 15.0), 15.0, gap0=30.0))[0]
    problem = HorizonProblem(seg, 3.0, STEADY, CONSTS, unit_table())
    np.testing.assert_allclose(problem.observed_raw, problem.observed_raw[:1].repeat(4, 0))
    np.testing.assert_allclose(problem.observed, problem.observed_raw[0])


def test_equilibrium_segment_has_zero_tracking_features():
    fv = observed_features(equilibrium_segment(), 3.0, STEADY, CONSTS, unit_table())
    assert fv["ds"] == 0.0 and fv["rs"] == 0.0
    assert abs(fv["cd"]) < 1e-20


def test_zero_weights_give_zero_guess_features():
    seg = segment_log(make_log(np.linspace(12, 16, 121), 15.0, gap0=30.0))[0]
    fv = expected_features(seg, np.zeros(4), 3.0, STEADY, CONSTS, unit_table())
    zero = []
    for s in partition_segment(seg, 3.0):
        p0, v0, a0 = s.init_state
        t = s.local_t
        zero.append(raw_features(p0 + v0 * t + 0.5 * a0 * t * t, v0 + a0 * t,
                                 np.full(t.size, a0), s.leader_pos, s.leader_vel, s.dt,
                                 STEADY, CONSTS))
    np.testing.assert_allclose(fv.values, np.mean(zero, axis=0), rtol=1e-12)


def test_constant_speed_segment_needs_no_acceleration():
    seg = segment_log(make_log(np.full(121, 18.0), 18.0, gap0=40.0))[0]
    fv = expected_features(seg, [1.0, 0.0, 0.0, 0.0], 3.0, STEADY, CONSTS, unit_table())
    assert fv["a"] == pytest.approx(0.0, abs=1e-20)


def self_generated_segment(W, N=3.0):
    """One 12 s window driven by chained optimal plans under ``W`` in the unit table."""
    driver = GroundTruthDriver(W_star={STEADY: np.asarray(W, float)}, N_star=N,
                               constants=CONSTS, scales=unit_table())
    sc = LeaderScenario("flat", "cruising", 12.0, (0.0, 12.0), (16.0, 16.0), init_gap=25.0,
                        init_ego_vel=18.0)
    log, labels = drive_scenario(driver, sc)
    return segment_log(log)[0], labels[0]


def test_self_generated_segment_matches_expected_features():
    seg, label = self_generated_segment(np.ones(4))
    obs = observed_features(seg, 3.0, label, CONSTS, unit_table())
    exp = expected_features(seg, np.ones(4), 3.0, label, CONSTS, unit_table())
    np.testing.assert_allclose(exp.values, obs.values, rtol=1e-9, atol=1e-12)


def test_optimal_segment_converges_in_one_iteration():
    seg, label = self_generated_segment(np.ones(4))
    fit = learn_segment_weights(seg, 3.0, LearnerConfig(), label, CONSTS, unit_table())
    assert fit.iterations == 1
    np.testing.assert_array_equal(fit.W, np.ones(4))


# --- weight learning -------------------------------------------------------------------

def test_learning_reduces_gradient_and_keeps_weights_non_negative():
    seg, label = self_generated_segment([0.2, 0.05, 3.0, 0.4])
    fit = learn_segment_weights(seg, 3.0, LearnerConfig(max_iters=300), label, CONSTS,
                                unit_table())
    assert fit.trace[-1] < fit.trace[0]
    assert len(fit.trace) == fit.iterations
    assert fit.grad_norm == fit.trace[-1]
    assert np.all(fit.W >= 0)


def test_learning_is_deterministic():
    seg, label = self_generated_segment([0.2, 0.05, 3.0, 0.4])
    cfg = LearnerConfig(max_iters=50)
    a = learn_segment_weights(seg, 3.0, cfg, label, CONSTS, unit_table())
    b = learn_segment_weights(seg, 3.0, cfg, label, CONSTS, unit_table())
    np.testing.assert_array_equal(a.W, b.W)
    assert a.trace == b.trace


class _StubProblem:
    condition = STEADY
    N = 3.0

    class segment:
        segment_id = "stub@0"

    def __init__(self, grads):
        self.grads = iter(grads)

    def gradient(self, W):
        return next(self.grads)


def test_non_finite_gradient_raises():
    with pytest.raises(LearningError):
        learn_weights(_StubProblem([np.array([np.nan, 0, 0, 0])]), LearnerConfig())


def test_update_clamps_at_zero():
    grads = [np.array([20.0, -1.0, 0.0, 0.0]), np.zeros(4)]
    fit = learn_weights(_StubProblem(grads), LearnerConfig())
    np.testing.assert_allclose(fit.W, [0.0, 1.1, 1.0, 1.0])
    assert fit.iterations == 2


def test_iteration_cap():
    grads = [np.full(4, 0.01)] * 10
    fit = learn_weights(_StubProblem(grads), LearnerConfig(max_iters=5))
    assert fit.iterations == 5
    assert fit.grad_norm == pytest.approx(0.02)


# --- horizon selection -------------------------------------------------------------------

def test_tie_goes_to_shorter_horizon():
    assert pick_best_horizon({4.0: 0.1, 2.0: 0.1, 3.0: 0.2}) == 2.0


def test_best_horizon_is_argmin_even_without_convergence():
    assert pick_best_horizon({2.0: 5.0, 3.0: 1.0, 4.0: 2.0}) == 3.0


def test_select_horizon_records_every_candidate():
    seg, label = self_generated_segment([0.2, 0.05, 3.0, 0.4])
    res = select_horizon(seg, LearnerConfig(max_iters=20), label, CONSTS, unit_table())
    assert set(res.per_horizon) == {2.0, 3.0, 4.0}
    assert all(isinstance(f, WeightFit) for f in res.per_horizon.values())
    assert res.final_grad_norm == min(f.grad_norm for f in res.per_horizon.values())
    np.testing.assert_array_equal(res.W, res.per_horizon[res.best_N].W)


def test_config_validation():
    with pytest.raises(ValueError):
        LearnerConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LearnerConfig(horizons=(2.0, 13.0))
    with pytest.raises(ValueError):
        LearnerConfig(horizons=())


# --- learn_all -----------------------------------------------------------------------------

def test_single_steady_segment_pool_sizes():
    log = make_log(np.full(121, 15.0), 15.0, gap0=25.0)
    out = learn_all([log], LearnerConfig(max_iters=5), constants=CONSTS)
    assert out.pool_sizes() == (1, 0, 0)
    assert sum(out.horizon_counts.values()) == 1


def test_pools_partition_segments():
    t = np.arange(601) * 0.1
    logs = [make_log(np.full(601, 15.0), 15.0, gap0=25.0, scenario_id="a"),
            make_log(np.full(601, 20.0), 25.0, gap0=150.0, scenario_id="b"),
            make_log(15.0 + 2 * np.sin(t / 2), 15.0, gap0=22.0, scenario_id="c")]
    out = learn_all(logs, LearnerConfig(max_iters=3), constants=CONSTS)
    labels = [classify_condition(s) for lg in logs for s in segment_log(lg)]
    assert out.pool_sizes() == tuple(labels.count(c) for c in CONDITIONS)
    assert sum(out.pool_sizes()) == 15
    assert sum(out.horizon_counts.values()) == 15
    assert set(out.horizon_counts) == {2.0, 3.0, 4.0}


def test_learn_all_estimates_tau_when_not_given():
    log = make_log(np.full(121, 10.0), 10.0, gap0=18.0)
    out = learn_all([log], LearnerConfig(max_iters=2))
    assert out.constants.tau == pytest.approx(1.8)
    assert out.constants.d_s == 5.0


def test_learn_all_rejects_empty_input():
    with pytest.raises(LearningError):
        learn_all([])
