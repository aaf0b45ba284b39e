"""The eleven acceptance criteria, each reported as one PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) or as part of the suite.
The expensive recovery runs are shared through module-scoped fixtures.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from horizon_irl.cli import main as cli_main
from horizon_irl.distribution import load_model, pairwise_kendall, sample_weights, save_model
from horizon_irl.features import (CONDITIONS, DriverConstants, DrivingCondition,
                                  classify_from_means, compute_features,
                                  condition_statistics)
from horizon_irl.harness import RecoveryConfig, run_recovery_experiment
from horizon_irl.planner import EgoState, PlannerConfig, solve_nmpc_step
from horizon_irl.trajectory import QuinticCoeffs, eval_quintic

from conftest import ACCEPTANCE_RESULTS

MASTER_SEED = 0


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[k] = (bool(ok), detail)
    print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def recovery3():
    return run_recovery_experiment(config=RecoveryConfig(N_star=3.0, rollouts=50),
                                   seed=MASTER_SEED)


@pytest.fixture(scope="module")
def recovery_others():
    """Learning-only runs at the other two candidate horizons."""
    return {n: run_recovery_experiment(config=RecoveryConfig(N_star=n, simulate=False),
                                       seed=MASTER_SEED)
            for n in (2.0, 4.0)}


def mode(pmf: dict) -> float:
    return max(pmf, key=lambda s: (pmf[s], -s))


# --- 1 ----------------------------------------------------------------------------------------

def test_01_quintic_derivatives_match_finite_differences():
    rng = np.random.default_rng(MASTER_SEED)
    start = time.perf_counter()
    h = 1e-5
    t = np.linspace(0.0, 4.0, 41)
    worst = 0.0
    for _ in range(1000):
        c = QuinticCoeffs(*rng.uniform(-1.0, 1.0, 6))
        pos_p, vel_p, _ = eval_quintic(c, t + h)
        pos_m, vel_m, _ = eval_quintic(c, t - h)
        _, vel, acc = eval_quintic(c, t)
        for fd, exact in (((pos_p - pos_m) / (2 * h), vel), ((vel_p - vel_m) / (2 * h), acc)):
            # errors are taken relative to the derivative's magnitude over the window
            worst = max(worst, np.max(np.abs(fd - exact)) / np.max(np.abs(exact)))
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-5 and elapsed < 1.0,
           f"max relative error {worst:.2e} (< 1e-5), {elapsed:.2f} s (< 1 s)")


# --- 2 ----------------------------------------------------------------------------------------

def test_02_feature_zeros():
    consts = DriverConstants(tau=1.5, d_s=5.0, v_d=25.0)
    n, dt = 120, 0.1
    t = np.arange(n) * dt

    def feats(v_ego, v_lead, gap, cond):
        ego = v_ego * t
        return compute_features(ego, np.full(n, v_ego), np.zeros(n), ego + gap,
                                np.full(n, v_lead), dt, cond, consts)

    ds = feats(25.0, 30.0, 80.0, DrivingCondition.FREE)["ds"]
    rs = feats(17.0, 17.0, 40.0, DrivingCondition.STEADY)["rs"]
    cd = feats(10.0, 10.0, 10.0 * 1.5 + 5.0, DrivingCondition.STEADY)["cd"]
    worst = max(abs(ds), abs(rs), abs(cd))
    record(2, worst < 1e-12, f"phi_ds={ds:.1e} phi_rs={rs:.1e} phi_cd={cd:.1e} (< 1e-12)")


# --- 3 ----------------------------------------------------------------------------------------

def test_03_classifier_examples_and_totality():
    examples = [((3.0, 0.02, 30.0, 10.0), DrivingCondition.STEADY),
                ((8.0, -0.01, 40.0, 10.0), DrivingCondition.FREE),
                ((7.0, 0.01, 30.0, 10.0), DrivingCondition.UNSTEADY)]
    examples_ok = all(classify_from_means(*x) is want for x, want in examples)
    rng = np.random.default_rng(MASTER_SEED)
    start = time.perf_counter()
    labels = []
    for _ in range(10_000):
        gap = rng.uniform(0.5, 250.0, 20)
        ego = rng.uniform(0.0, 40.0, 20)
        lead = rng.uniform(0.0, 40.0, 20)
        labels.append(classify_from_means(*condition_statistics(gap, ego, lead)))
    elapsed = time.perf_counter() - start
    total = len(labels) == 10_000 and all(lab in CONDITIONS for lab in labels)
    counts = {c.value: sum(lab is c for lab in labels) for c in CONDITIONS}
    record(3, examples_ok and total and elapsed < 5.0,
           f"examples {'ok' if examples_ok else 'wrong'}, 10000 labelled {counts}, "
           f"{elapsed:.2f} s (< 5 s)")


# --- 4 to 8 on the N* = 3 s recovery run -----------------------------------------------------

def test_04_convergence(recovery3):
    rep = recovery3
    ok = rep.converged_fraction >= 0.9 and rep.trace_decreasing_fraction == 1.0
    record(4, ok, f"converged {rep.converged_fraction:.3f} (>= 0.9), "
                  f"iteration 500 below iteration 10 for {rep.trace_decreasing_fraction:.3f} "
                  f"of segments (== 1), median iterations {rep.iterations['median']:g}")


def test_05_horizon_recovery(recovery3, recovery_others):
    runs = {3.0: recovery3, **recovery_others}
    modes = {n: mode(r.P_N) for n, r in runs.items()}
    tracked = all(m == n for n, m in modes.items())
    frac = recovery3.horizon_recovery
    fracs = ", ".join(f"N*={n:g}: {runs[n].horizon_recovery:.3f}" for n in sorted(runs))
    record(5, frac >= 0.7 and tracked,
           f"best_N = 3 for {frac:.3f} (>= 0.7); modes {modes}; fractions {fracs}")


def test_06_weight_recovery(recovery3):
    cos = recovery3.cosine
    ok = set(cos) == {c.value for c in CONDITIONS} and min(cos.values()) >= 0.8
    record(6, ok, "cosine " + ", ".join(f"{k} {v:.3f}" for k, v in cos.items()) + " (>= 0.8)")


def test_07_closed_loop_fidelity(recovery3):
    m = recovery3.rmse_mean
    per = "; ".join(f"{k} {v['speed']:.2f}/{v['acc']:.2f}" for k, v in recovery3.rmse.items())
    ok = bool(m) and m["speed"] <= 1.5 and m["acc"] <= 0.6
    record(7, ok, f"mean speed RMSE {m.get('speed', float('nan')):.3f} (<= 1.5), "
                  f"acc RMSE {m.get('acc', float('nan')):.3f} (<= 0.6) [{per}]")


def test_08_constraint_audit(recovery3):
    a = recovery3.audit
    ok = (a["rollouts"] > 0 and a["failed"] == 0 and a["gap_violations"] == 0
          and a["speed_violations"] == 0)
    record(8, ok, f"{a['rollouts']} rollouts, {a['failed']} failed, "
                  f"{a['gap_violations']} gap and {a['speed_violations']} speed violations, "
                  f"min gap {a['min_gap']:.2f} m")


# --- 9 ----------------------------------------------------------------------------------------

def test_09_copula_round_trip(recovery3):
    model = recovery3.model
    rng = np.random.default_rng(MASTER_SEED)
    worst_tau, inside, details = 0.0, True, []
    for cond, cop in sorted(model.copulas.items()):
        draws = sample_weights(cop, rng, size=5000)
        dev = float(np.max(np.abs(pairwise_kendall(draws) - cop.kendall_tau)))
        lo = np.array([m.values[0] for m in cop.marginals])
        hi = np.array([m.values[-1] for m in cop.marginals])
        inside &= bool(np.all(draws >= lo) and np.all(draws <= hi))
        worst_tau = max(worst_tau, dev)
        details.append(f"{cond.value} max |d tau| {dev:.3f}")
    ok = len(model.copulas) == 3 and worst_tau <= 0.1 and inside
    record(9, ok, "; ".join(details) + f"; ranges {'inside' if inside else 'OUTSIDE'}")


# --- 10 ---------------------------------------------------------------------------------------

def test_10_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario_duration": 24.0, "repeats": 2, "samples": 2,
                               "train_fraction": 0.5}))
    common = ["--config", str(cfg), "--seed", "11", "--data-dir", str(tmp_path / "data"),
              "--model", str(tmp_path / "model.json")]
    assert cli_main(["synth", *common]) == 0

    def learn_and_simulate():
        assert cli_main(["learn", *common, "--out", str(tmp_path / "learn")]) == 0
        rc = cli_main(["simulate", *common, "--out", str(tmp_path / "sim")])
        assert rc in (0, 1)  # a condition without a copula is a reported partial failure
        files = sorted((tmp_path / "sim").rglob("sample_*.csv"))
        return ((tmp_path / "model.json").read_bytes(),
                {p.relative_to(tmp_path).as_posix(): p.read_bytes() for p in files})

    model_a, samples_a = learn_and_simulate()
    model_b, samples_b = learn_and_simulate()
    ok = model_a == model_b and samples_a == samples_b and len(samples_a) > 0
    record(10, ok, f"model identical: {model_a == model_b}; {len(samples_a)} sample CSVs "
                   f"identical: {samples_a == samples_b}")


# --- 11 ---------------------------------------------------------------------------------------

def test_11_pmf_and_equilibrium(recovery3, recovery_others, tmp_path):
    pmfs = [recovery3.P_N, recovery3.model.P_N.probs]
    pmfs += [r.P_N for r in recovery_others.values()]
    sums = [abs(sum(p.values() if isinstance(p, dict) else p) - 1.0) for p in pmfs]
    # the model file itself, after a save/load cycle
    save_model(recovery3.model, tmp_path / "m.json")
    sums.append(abs(sum(load_model(tmp_path / "m.json").P_N.probs) - 1.0))

    model = recovery3.model
    consts = model.constants
    v = consts.v_d
    gap = consts.tau * v + consts.d_s
    rng = np.random.default_rng(MASTER_SEED)
    worst = 0.0
    for _ in range(100):
        W = rng.uniform(0.0, 5.0, 4)
        a, _ = solve_nmpc_step(EgoState(0.0, 0.0, v), (gap, v), W, DrivingCondition.STEADY,
                               3.0, consts, model.normalization,
                               PlannerConfig(d_s=consts.d_s), v_max=v)
        worst = max(worst, abs(a))
    ok = max(sums) <= 1e-12 and worst < 0.05
    record(11, ok, f"{len(sums)} PMFs, max |sum - 1| {max(sums):.1e} (<= 1e-12); "
                   f"equilibrium max |a_first| {worst:.2e} (< 0.05) over 100 weights")


if __name__ == "__main__":
    raise SystemExit(pytest.main([str(Path(__file__)), "-v"]))
