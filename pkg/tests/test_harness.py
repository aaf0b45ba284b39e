import io

import numpy as np
import pytest

from horizon_irl.features import CONDITIONS, DrivingCondition
from horizon_irl.harness import (FixtureSpec, GroundTruthDriver, HarnessError, LeaderScenario,
                                 build_fixture, builtin_scenarios, cosine, drive_scenario,
                                 generate_synthetic_demos, recovery_weights, rmse, trace_at)
from horizon_irl.planner import PlannerConfig
from horizon_irl.trajectory import load_log


def short_scenarios(duration=24.0):
    return builtin_scenarios(duration)


# --- scenarios ---------------------------------------------------------------------

def test_nine_builtin_scenarios():
    scs = builtin_scenarios()
    assert len(scs) == 9
    kinds = [s.kind for s in scs]
    assert kinds.count("cruising") == kinds.count("stop_and_go") == kinds.count("transient") == 3
    assert all(s.duration == 120.0 for s in scs)


def test_cruising_profile_is_constant():
    sc = {s.id: s for s in builtin_scenarios()}["cruising-20"]
    np.testing.assert_array_equal(sc.speed(np.linspace(0, 120, 97)), 20.0)


def test_stop_and_go_reaches_zero_continuously():
    for sc in builtin_scenarios():
        if sc.kind != "stop_and_go":
            continue
        _, _, v = sc.leader_samples()
        assert v.min() == 0.0 and v.max() == 10.0
        assert np.abs(np.diff(v)).max() < 0.2  # no jumps at 10 Hz


def test_transient_profile_passes_through_the_stated_speeds():
    for sc in builtin_scenarios():
        if sc.kind == "transient":
            assert sc.speeds[0] == 10.0 and max(sc.speeds) == 25.0 and sc.speeds[-1] == 12.0


def test_invalid_scenarios():
    with pytest.raises(HarnessError):
        LeaderScenario("x", "racing", 10.0, (0.0, 10.0), (1.0, 1.0))
    with pytest.raises(HarnessError):
        LeaderScenario("x", "cruising", 10.0, (0.0, 10.0), (-1.0, 1.0))


def test_driver_validation():
    with pytest.raises(HarnessError):
        GroundTruthDriver(W_star={DrivingCondition.FREE: np.array([1.0, -1.0, 0.0])})
    with pytest.raises(HarnessError):
        GroundTruthDriver(N_star=20.0)


# --- demonstrations ------------------------------------------------------------------

def test_noiseless_repeats_are_identical():
    sc = short_scenarios()[:1]
    logs = generate_synthetic_demos(GroundTruthDriver(noise_std=0.0), sc, repeats=2, seed=4)
    assert [lg.scenario_id for lg in logs] == ["cruising-15-r00", "cruising-15-r01"]
    np.testing.assert_array_equal(logs[0].ego_vel, logs[1].ego_vel)


def test_noisy_repeats_differ():
    sc = short_scenarios()[:1]
    logs = generate_synthetic_demos(GroundTruthDriver(noise_std=0.1), sc, repeats=2, seed=4)
    assert np.linalg.norm(logs[0].ego_vel - logs[1].ego_vel) > 0


def test_demos_are_reproducible_from_the_seed():
    sc = short_scenarios()[3:4]
    a = generate_synthetic_demos(GroundTruthDriver(noise_std=0.1), sc, repeats=2, seed=8)
    b = generate_synthetic_demos(GroundTruthDriver(noise_std=0.1), sc, repeats=2, seed=8)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.ego_pos, y.ego_pos)


def test_demo_count_is_scenarios_times_repeats():
    logs = generate_synthetic_demos(GroundTruthDriver(), short_scenarios(12.0), repeats=30,
                                    seed=0)
    assert len(logs) == 270


@pytest.mark.parametrize("generator", ["quintic", "nmpc"])
def test_demos_survive_the_csv_round_trip(generator):
    scs = short_scenarios(24.0)[::4]
    logs = generate_synthetic_demos(GroundTruthDriver(noise_std=0.1), scs, repeats=1, seed=2,
                                    generator=generator, planner_cfg=PlannerConfig())
    for lg in logs:
        buf = io.StringIO()
        lg.write_csv(buf)
        back = load_log(buf.getvalue(), v_d=lg.v_d, scenario_id=lg.scenario_id)
        np.testing.assert_array_equal(back.ego_vel, lg.ego_vel)
        assert back.gap.min() > 0


def test_unknown_generator():
    with pytest.raises(HarnessError):
        generate_synthetic_demos(GroundTruthDriver(), short_scenarios()[:1], generator="magic")


def test_drive_scenario_labels_match_windows():
    driver = GroundTruthDriver()
    sc = short_scenarios(36.0)[0]
    log, labels = drive_scenario(driver, sc)
    assert len(labels) == 3
    assert all(lab in CONDITIONS for lab in labels)
    assert log.ego_vel.min() >= 0


def test_fixture_holds_each_kind():
    rng = np.random.default_rng(0)
    fx = build_fixture(GroundTruthDriver(), rng, FixtureSpec(n_sine=1, n_free=1, n_approach=1))
    kinds = {s.id.split("-")[0] for s in fx.scenarios}
    assert kinds == {"sine", "free", "approach"}
    assert DrivingCondition.FREE in fx.labels
    assert len(fx.labels) == sum(len(lg) // 120 for lg in fx.logs)


# --- metrics ---------------------------------------------------------------------------

def test_rmse_of_identical_trajectories():
    v, a = np.linspace(0, 10, 20), np.sin(np.arange(20))
    assert rmse((v, a), (v, a)) == (0.0, 0.0)


def test_rmse_of_constant_speed_offset():
    v, a = np.linspace(0, 10, 20), np.zeros(20)
    assert rmse((v, a), (v + 1.0, a)) == pytest.approx((1.0, 0.0))


def test_rmse_is_symmetric():
    rng = np.random.default_rng(1)
    x = (rng.normal(size=30), rng.normal(size=30))
    y = (rng.normal(size=30), rng.normal(size=30))
    assert rmse(x, y) == rmse(y, x)


def test_rmse_length_mismatch():
    with pytest.raises(HarnessError):
        rmse((np.zeros(3), np.zeros(3)), (np.zeros(4), np.zeros(4)))


def test_cosine():
    assert cosine([1, 0], [2, 0]) == pytest.approx(1.0)
    assert cosine([1, 0], [0, 3]) == pytest.approx(0.0)


def test_trace_at_holds_the_last_value():
    tr = [5.0, 4.0, 3.0]
    assert trace_at(tr, 1) == 5.0
    assert trace_at(tr, 3) == 3.0
    assert trace_at(tr, 500) == 3.0


def test_recovery_weights_are_non_negative():
    for cond, w in recovery_weights().items():
        assert np.all(w >= 0) and cond in CONDITIONS
