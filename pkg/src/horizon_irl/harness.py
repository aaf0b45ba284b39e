"""Synthetic leader scenarios, ground-truth drivers and recovery experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .features import (
    CONDITIONS,
    FEATURE_IDS,
    DriverConstants,
    DrivingCondition,
    NormalizationTable,
    classify_from_means,
    condition_statistics,
)
from .learner import QuinticPlanBatch
from .trajectory import LeaderFollowerLog, eval_quintic, samples_per


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class LeaderScenario:
    """Leader speed profile, piecewise linear through ``(times, speeds)`` knots."""

    id: str
    kind: str
    duration: float
    times: tuple[float, ...]
    speeds: tuple[float, ...]
    init_gap: float = 30.0  # [m]
    init_ego_vel: Optional[float] = None  # [m/s]; defaults to the leader's initial speed

    def __post_init__(self):
        if self.kind not in ("cruising", "stop_and_go", "transient"):
            raise HarnessError(f"unknown scenario kind {self.kind!r}")
        if any(v < 0 for v in self.speeds):
            raise HarnessError("leader speeds must be non-negative")
        if len(self.times) != len(self.speeds) or list(self.times) != sorted(self.times):
            raise HarnessError("profile knots must be increasing and paired with speeds")

    def speed(self, t) -> np.ndarray:
        return np.interp(t, self.times, self.speeds)

    def leader_samples(self, rate_hz: float = 10.0, pos0: float = 0.0
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = samples_per(self.duration, rate_hz) + 1
        t = np.arange(n) / rate_hz
        vel = self.speed(t)
        # trapezoid integration is exact when knots fall on the sampling grid
        pos = pos0 + np.concatenate([[0.0], np.cumsum(0.5 * (vel[1:] + vel[:-1]) / rate_hz)])
        return t, pos, vel

    @property
    def ego_start_speed(self) -> float:
        return float(self.speeds[0] if self.init_ego_vel is None else self.init_ego_vel)


def _stop_and_go(period: float, duration: float, top: float = 10.0):
    ramp, stop = 0.35 * period, 0.1 * period
    cruise = period - 2 * ramp - stop
    times, speeds = [0.0], [top]
    t = 0.0
    while t < duration:
        for dt_, v in ((cruise, top), (ramp, 0.0), (stop, 0.0), (ramp, top)):
            t += dt_
            times.append(round(t, 6))
            speeds.append(v)
    return tuple(times), tuple(speeds)


def _transient(rate: float, lo: float = 10.0, hi: float = 25.0, end: float = 12.0,
               duration: float = 120.0):
    t1 = 20.0
    t2 = t1 + (hi - lo) / rate
    t3 = t2 + 30.0
    t4 = t3 + (hi - end) / rate
    knots = [(0.0, lo), (t1, lo), (t2, hi), (t3, hi), (t4, end), (max(t4, duration), end)]
    return tuple(round(k[0], 6) for k in knots), tuple(k[1] for k in knots)


def builtin_scenarios(duration: float = 120.0) -> list[LeaderScenario]:
    """Nine leader profiles: three cruising, three stop-and-go, three transient."""
    out = []
    for v, gap, ego in ((15.0, 30.0, 15.0), (20.0, 35.0, 18.0), (25.0, 200.0, 20.0)):
        out.append(LeaderScenario(f"cruising-{v:g}", "cruising", duration, (0.0, duration),
                                  (v, v), init_gap=gap, init_ego_vel=ego))
    for period in (20.0, 30.0, 40.0):
        times, speeds = _stop_and_go(period, duration)
        out.append(LeaderScenario(f"stop_and_go-{period:g}", "stop_and_go", duration,
                                  times, speeds, init_gap=20.0))
    for rate in (0.5, 1.0, 1.5):
        times, speeds = _transient(rate, duration=duration)
        out.append(LeaderScenario(f"transient-{rate:g}", "transient", duration, times,
                                  speeds, init_gap=20.0))
    return out


def default_feature_scales() -> NormalizationTable:
    """Reference feature ranges in which ground-truth weights are expressed."""
    lo = {c: np.zeros(len(FEATURE_IDS[c])) for c in CONDITIONS}
    spans = {"a": 3.0, "ds": 75.0, "rs": 12.0, "cd": 75.0, "sd": 1200.0,
             "fd": 0.1 * math.exp(-90.0)}
    hi = {c: np.array([spans[f] for f in FEATURE_IDS[c]]) for c in CONDITIONS}
    return NormalizationTable(lo, hi)


@dataclass
class GroundTruthDriver:
    W_star: Mapping[DrivingCondition, np.ndarray] = field(default_factory=lambda: recovery_weights())
    N_star: float = 3.0
    noise_std: float = 0.0
    constants: DriverConstants = DriverConstants(tau=1.2, d_s=5.0, v_d=25.0)
    scales: NormalizationTable = field(default_factory=default_feature_scales)
    H: float = 12.0

    def __post_init__(self):
        for cond, w in self.W_star.items():
            w = np.asarray(w, dtype=float)
            if w.shape != (len(FEATURE_IDS[cond]),) or np.any(w < 0):
                raise HarnessError(f"ground-truth weights for {cond.value} must be "
                                   f"{len(FEATURE_IDS[cond])} non-negative values")
        if self.N_star <= 0 or self.N_star > self.H:
            raise HarnessError(f"N_star={self.N_star} outside (0, H]")

    def weights_in(self, table: NormalizationTable, condition: DrivingCondition
                   ) -> np.ndarray:
        """Ground-truth weights re-expressed in another table's feature scaling."""
        return np.asarray(self.W_star[condition]) * table.span(condition) / \
            self.scales.span(condition)


def _plan_window(driver: GroundTruthDriver, cond: DrivingCondition, state, lp, lv,
                 dt: float, n_piece: int, rng: Optional[np.random.Generator]):
    """Chain quintic plans of ``N_star`` across one segment window."""
    n_total = lp.size
    pos = np.empty(n_total + 1)
    vel = np.empty(n_total + 1)
    acc = np.empty(n_total + 1)
    consts = driver.constants
    W = np.asarray(driver.W_star[cond], dtype=float)
    p, v, a = state
    for start in range(0, n_total, n_piece):
        stop = min(start + n_piece, n_total)
        # the last piece may need leader samples past the window end
        sl = slice(start, start + n_piece)
        batch = QuinticPlanBatch(np.array([[p, v, a]]), lp[None, sl], lv[None, sl], dt,
                                 cond, consts, driver.scales, horizon=n_piece * dt)
        z, _ = batch.solve(W)
        coeffs = batch.coeffs(z)[0]
        tt = np.arange(stop - start + 1) * dt
        pp, vv, aa = eval_quintic(coeffs, tt)
        if rng is not None and driver.noise_std > 0:
            aa = aa[:-1] + rng.normal(0.0, driver.noise_std, tt.size - 1)
            vv = v + np.concatenate([[0.0], np.cumsum(aa) * dt])
            pp = p + np.concatenate([[0.0], np.cumsum(vv[:-1] * dt + 0.5 * aa * dt * dt)])
            aa = np.append(aa, aa[-1])
        pos[start:stop + 1], vel[start:stop + 1], acc[start:stop + 1] = pp, vv, aa
        p, v, a = pos[stop], vel[stop], acc[stop]
    return pos, vel, acc


def drive_scenario(driver: GroundTruthDriver, scenario: LeaderScenario,
                   rate_hz: float = 10.0, rng: Optional[np.random.Generator] = None,
                   thresholds=None) -> tuple[LeaderFollowerLog, list[DrivingCondition]]:
    """Demonstration of ``driver`` behind ``scenario``'s leader.

    Each ``H``-second window is driven as a chain of quintic plans of length
    ``N_star`` under the weights of one driving condition. The condition is
    chosen so that the finished window classifies as that same condition;
    candidates are tried in the order steady, free, unsteady.
    """
    from .features import DEFAULT_THRESHOLDS
    th = thresholds or DEFAULT_THRESHOLDS
    dt = 1.0 / rate_hz
    t, lp, lv = scenario.leader_samples(rate_hz, pos0=scenario.init_gap)
    n = t.size
    n_win = samples_per(driver.H, rate_hz)
    n_piece = samples_per(driver.N_star, rate_hz)
    # pad leader so every piece sees a full horizon of samples
    pad = n_piece + n_win
    lp_ext = np.concatenate([lp, lp[-1] + lv[-1] * dt * np.arange(1, pad + 1)])
    lv_ext = np.concatenate([lv, np.full(pad, lv[-1])])

    pos = np.empty(n)
    vel = np.empty(n)
    acc = np.empty(n)
    pos[0], vel[0], acc[0] = 0.0, scenario.ego_start_speed, 0.0
    labels = []
    start = 0
    while start < n - 1:
        stop = min(start + n_win, n - 1)
        state = (pos[start], vel[start], acc[start])
        chosen = None
        fallback = None
        for cond in CONDITIONS:
            if cond not in driver.W_star:
                continue
            wp, wv, wa = _plan_window(driver, cond, state, lp_ext[start:stop + n_piece],
                                      lv_ext[start:stop + n_piece], dt, n_piece, rng)
            wp, wv, wa = wp[:stop - start + 1], wv[:stop - start + 1], wa[:stop - start + 1]
            gap = lp[start:stop + 1] - wp
            if np.any(gap <= 0) or np.any(wv < 0):
                continue
            if fallback is None:
                fallback = (cond, wp, wv, wa)
            label = classify_from_means(*condition_statistics(gap[:-1], wv[:-1],
                                                              lv[start:stop]), th=th)
            if label is cond:
                chosen = (cond, wp, wv, wa)
                break
        if chosen is None:
            chosen = fallback
        if chosen is None:
            raise HarnessError(
                f"{scenario.id}: no admissible plan for window starting at t={t[start]:.1f} s")
        cond, wp, wv, wa = chosen
        pos[start:stop + 1], vel[start:stop + 1], acc[start:stop + 1] = wp, wv, wa
        labels.append(cond)
        start = stop
    log = LeaderFollowerLog(rate_hz=rate_hz, t=t, leader_pos=lp, leader_vel=lv,
                            ego_pos=pos, ego_vel=vel, ego_acc=acc,
                            scenario_id=scenario.id, v_d=driver.constants.v_d)
    return log.validate(), labels


# --- oracle-recovery fixture -------------------------------------------------

def recovery_weights() -> dict[DrivingCondition, np.ndarray]:
    """Ground-truth weights of the recovery fixture, in ``default_feature_scales``."""
    return {
        DrivingCondition.STEADY: np.array([0.3, 0.08, 1.5, 2.5]),
        DrivingCondition.FREE: np.array([0.4, 1.5, 1.0]),
        DrivingCondition.UNSTEADY: np.array([0.4, 0.3, 2.0, 1.0]),
    }


def sine_scenario(rng: np.random.Generator, sid: str, duration: float = 120.0
                  ) -> LeaderScenario:
    """Leader oscillating around a cruise speed; every window is excited alike."""
    v0 = rng.uniform(10.0, 20.0)
    amp = rng.uniform(3.5, 4.5)
    period = rng.uniform(18.0, 24.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    times = np.arange(0.0, duration + 0.5, 1.0)
    speeds = v0 + amp * np.sin(2 * math.pi * times / period + phase)
    return LeaderScenario(sid, "transient", duration, tuple(times), tuple(speeds),
                          init_gap=6.0 + 1.2 * speeds[0], init_ego_vel=float(speeds[0]))


def free_scenario(rng: np.random.Generator, sid: str, duration: float = 12.0
                  ) -> LeaderScenario:
    """Fast leader far ahead of a slower ego."""
    return LeaderScenario(sid, "cruising", duration, (0.0, duration), (28.0, 28.0),
                          init_gap=rng.uniform(90.0, 130.0),
                          init_ego_vel=rng.uniform(6.0, 14.0))


def approach_scenario(rng: np.random.Generator, sid: str, duration: float = 12.0
                      ) -> LeaderScenario:
    """Ego closing in on a slower leader from a long gap."""
    v_lead = rng.uniform(5.0, 14.0)
    return LeaderScenario(sid, "cruising", duration, (0.0, duration), (v_lead, v_lead),
                          init_gap=rng.uniform(45.0, 80.0),
                          init_ego_vel=v_lead + rng.uniform(4.0, 9.0))


FIXTURE_MAKERS = {"sine": sine_scenario, "free": free_scenario,
                  "approach": approach_scenario}


@dataclass(frozen=True)
class FixtureSpec:
    n_sine: int = 6
    n_free: int = 8
    n_approach: int = 8
    max_tries: int = 5  # attempts per requested scenario


@dataclass
class Fixture:
    driver: GroundTruthDriver
    scenarios: list[LeaderScenario]
    logs: list[LeaderFollowerLog]
    labels: list[DrivingCondition]  # generator condition per segment


def _self_consistent(log: LeaderFollowerLog, labels, H: float, th) -> bool:
    from .features import classify_condition
    from .trajectory import segment_log
    return all(classify_condition(s, th) is lab for s, lab in zip(segment_log(log, H), labels))


def build_fixture(driver: GroundTruthDriver, rng: np.random.Generator,
                  spec: FixtureSpec = FixtureSpec(), thresholds=None) -> Fixture:
    """Draw scenarios and drive them, keeping only in-model demonstrations.

    A drawn scenario is discarded when a window cannot be driven or when a
    finished window classifies differently from the condition whose weights
    drove it; such windows fall outside the learner's model.
    """
    from .features import DEFAULT_THRESHOLDS
    th = thresholds or DEFAULT_THRESHOLDS
    scenarios, logs, labels = [], [], []
    for kind, count in (("sine", spec.n_sine), ("free", spec.n_free),
                        ("approach", spec.n_approach)):
        made = 0
        for attempt in range(spec.max_tries * count):
            if made == count:
                break
            sc = FIXTURE_MAKERS[kind](rng, f"{kind}-{attempt}")
            try:
                log, lab = drive_scenario(driver, sc, thresholds=th)
            except HarnessError:
                continue
            if not _self_consistent(log, lab, driver.H, th):
                continue
            scenarios.append(sc)
            logs.append(log)
            labels.extend(lab)
            made += 1
        if made < count:
            raise HarnessError(f"only {made} of {count} {kind} scenarios were drivable")
    return Fixture(driver, scenarios, logs, labels)


def calibrate_free_scale(driver: GroundTruthDriver, table: NormalizationTable
                         ) -> GroundTruthDriver:
    """Express the driver's free-distance weight in the corpus's own range.

    ``exp(-gap)`` spans tens of orders of magnitude across gaps, so a fixed
    reference scale leaves the weight either inert or overwhelming. Copying
    the fitted span makes ``W_star`` for that feature mean what it says.
    """
    from dataclasses import replace
    free = DrivingCondition.FREE
    if free not in table.minimum:
        return driver
    hi = {c: np.array(v, dtype=float) for c, v in driver.scales.maximum.items()}
    lo = {c: np.array(v, dtype=float) for c, v in driver.scales.minimum.items()}
    k = FEATURE_IDS[free].index("fd")
    hi[free][k] = lo[free][k] + table.span(free)[k]
    return replace(driver, scales=NormalizationTable(lo, hi))


# --- demonstrations, metrics and the recovery experiment -----------------------

def generate_synthetic_demos(driver: GroundTruthDriver, scenarios: Sequence[LeaderScenario],
                             repeats: int = 1, seed: int = 0, generator: str = "quintic",
                             rate_hz: float = 10.0, planner_cfg=None
                             ) -> list[LeaderFollowerLog]:
    """One log per scenario and repeat.

    ``generator="quintic"`` chains the driver's quintic plans (the learner's own
    model); ``"nmpc"`` replays the receding-horizon planner with a point-mass
    model of ``W_star``/``N_star``. Repeats differ only through acceleration
    noise, drawn from a stream split off ``seed`` per scenario and repeat.
    """
    if repeats < 1:
        raise HarnessError("repeats must be at least 1")
    if generator not in ("quintic", "nmpc"):
        raise HarnessError(f"unknown generator {generator!r}")
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(scenarios))
    logs = []
    for sc, ss in zip(scenarios, streams):
        children = ss.spawn(repeats)
        if generator == "quintic":
            made = [drive_scenario(driver, sc, rate_hz, np.random.default_rng(rs))[0]
                    for rs in children]
        else:
            made = _nmpc_demos(driver, sc, rate_hz,
                               [int(rs.generate_state(1)[0]) for rs in children], planner_cfg)
        logs += [replace_scenario_id(lg, f"{sc.id}-r{r:02d}") for r, lg in enumerate(made)]
    return logs


def replace_scenario_id(log: LeaderFollowerLog, sid: str) -> LeaderFollowerLog:
    from dataclasses import replace
    return replace(log, scenario_id=sid)


def _nmpc_demos(driver: GroundTruthDriver, sc: LeaderScenario, rate_hz: float,
                seeds: list[int], planner_cfg) -> list[LeaderFollowerLog]:
    from .distribution import point_mass_model
    from .planner import EgoState, PlannerConfig, rollout_many
    cfg = planner_cfg or PlannerConfig(dt=1.0 / rate_hz, d_s=driver.constants.d_s)
    t, lp, lv = sc.leader_samples(rate_hz, pos0=sc.init_gap)
    model = point_mass_model(driver.W_star, driver.N_star, driver.scales, driver.constants)
    rolls = rollout_many(EgoState(0.0, 0.0, sc.ego_start_speed), t, lp, lv, model, cfg,
                         seeds, accel_noise_std=driver.noise_std)
    out = []
    for r in rolls:
        if r.error is not None:
            raise HarnessError(f"{sc.id}: {r.error}")
        out.append(LeaderFollowerLog(rate_hz=rate_hz, t=t, leader_pos=lp, leader_vel=lv,
                                     ego_pos=r.ego_pos, ego_vel=r.ego_vel, ego_acc=r.ego_acc,
                                     scenario_id=sc.id, v_d=driver.constants.v_d).validate())
    return out


def rmse(observed, predicted) -> tuple[float, float]:
    """Speed and acceleration RMSE between two trajectories on one time grid.

    Each argument is anything with ``ego_vel`` and ``ego_acc`` arrays (a log,
    a rollout) or a ``(vel, acc)`` pair.
    """
    ov, oa = _va(observed)
    pv, pa = _va(predicted)
    if ov.shape != pv.shape or oa.shape != pa.shape:
        raise HarnessError(f"trajectories differ in length: {ov.shape} vs {pv.shape}")
    return (float(np.sqrt(np.mean((ov - pv) ** 2))), float(np.sqrt(np.mean((oa - pa) ** 2))))


def _va(x):
    if hasattr(x, "ego_vel"):
        return np.asarray(x.ego_vel, dtype=float), np.asarray(x.ego_acc, dtype=float)
    v, a = x
    return np.asarray(v, dtype=float), np.asarray(a, dtype=float)


def cosine(u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 0.0


@dataclass(frozen=True)
class RecoveryConfig:
    N_star: float = 3.0
    fixture: FixtureSpec = FixtureSpec()
    heldout: FixtureSpec = FixtureSpec(n_sine=2, n_free=1, n_approach=1)
    rollouts: int = 50
    simulate: bool = True


@dataclass
class RecoveryReport:
    N_star: float
    seed: int
    horizon_recovery: float
    horizon_counts: dict[float, int]
    P_N: dict[float, float]
    cosine: dict[str, float]
    baseline_cosine: dict[str, float]  # cosine between W_star and the all-ones start
    converged_fraction: float  # at N_star
    iterations: dict[str, float]
    trace_decreasing_fraction: float
    rmse: dict[str, dict[str, float]]
    rmse_mean: dict[str, float]
    audit: dict[str, float]
    segments: list[dict]
    traces: dict[str, list[float]] = field(repr=False, default_factory=dict)
    model: object = field(repr=False, default=None)
    driver: Optional[GroundTruthDriver] = field(repr=False, default=None)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()
               if k not in ("segments", "traces", "model", "driver")}
        out["horizon_counts"] = {str(k): v for k, v in self.horizon_counts.items()}
        out["P_N"] = {str(k): v for k, v in self.P_N.items()}
        return out

    def segments_csv(self) -> str:
        import csv
        import io
        buf = io.StringIO()
        cols = ["segment_id", "condition", "best_N", "grad_norm_N_star", "iterations_N_star",
                "final_grad_norm", "cosine"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.segments:
            w.writerow({k: row[k] for k in cols})
        return buf.getvalue()

    def traces_csv(self) -> str:
        lines = ["segment_id,iteration,grad_norm"]
        for sid, tr in self.traces.items():
            lines += [f"{sid},{i + 1},{g!r}" for i, g in enumerate(tr)]
        return "\n".join(lines) + "\n"


def trace_at(trace: Sequence[float], k: int) -> float:
    """Gradient norm at iteration ``k`` (1-based), holding the last value after a stop."""
    return float(trace[min(k, len(trace)) - 1])


def run_recovery_experiment(driver: Optional[GroundTruthDriver] = None,
                            config: RecoveryConfig = RecoveryConfig(), seed: int = 0,
                            learner_config=None, planner_cfg=None, progress=None
                            ) -> RecoveryReport:
    """Generate a fixture, learn from it and score what came back."""
    from .distribution import build_model
    from .features import classify_condition
    from .learner import LearnerConfig, fit_feature_table, learn_all
    from .planner import (EgoState, PlannerConfig, audit_rollout, default_v_max,
                          rollout_many)
    from .trajectory import iter_segments

    lcfg = learner_config or LearnerConfig()
    if driver is None:
        driver = GroundTruthDriver(W_star=recovery_weights(), N_star=config.N_star)
    train_ss, held_ss, roll_ss = np.random.SeedSequence(seed).spawn(3)

    # pilot pass fixes the free-distance scale, then the same draws are replayed
    pilot = build_fixture(driver, np.random.default_rng(train_ss), config.fixture,
                          lcfg.thresholds)
    segs = iter_segments(pilot.logs, lcfg.H)
    labels = [classify_condition(s, lcfg.thresholds) for s in segs]
    driver = calibrate_free_scale(
        driver, fit_feature_table(segs, labels, driver.constants, lcfg.horizons))
    fixture = build_fixture(driver, np.random.default_rng(train_ss), config.fixture,
                            lcfg.thresholds)

    outcome = learn_all(fixture.logs, lcfg, constants=driver.constants, progress=progress)
    table = outcome.table
    model = build_model(outcome.pools, outcome.horizon_counts, table, outcome.constants,
                        support=lcfg.horizons, provenance={"seed": seed, "N_star": driver.N_star})
    N_star = float(driver.N_star)
    rows, traces = [], {}
    for r in outcome.results:
        fit = r.per_horizon[N_star]
        traces[r.segment_id] = list(fit.trace)
        rows.append({"segment_id": r.segment_id, "condition": r.condition.value,
                     "best_N": r.best_N, "grad_norm_N_star": fit.grad_norm,
                     "iterations_N_star": fit.iterations, "final_grad_norm": r.final_grad_norm,
                     "cosine": cosine(r.W, driver.weights_in(table, r.condition))})
    cos, base = {}, {}
    for cond in CONDITIONS:
        pool = outcome.pools[cond]
        if not pool:
            continue
        w_true = driver.weights_in(table, cond)
        cos[cond.value] = cosine(np.mean(pool, axis=0), w_true)
        base[cond.value] = cosine(np.ones_like(w_true), w_true)
    its = np.array([row["iterations_N_star"] for row in rows], dtype=float)
    decreasing = [trace_at(t, 500) < trace_at(t, 10) for t in traces.values()]

    rm, audit = {}, {"rollouts": 0, "failed": 0, "gap_violations": 0, "speed_violations": 0,
                     "min_gap": math.inf}
    if config.simulate:
        held = build_fixture(driver, np.random.default_rng(held_ss), config.heldout,
                             lcfg.thresholds)
        pcfg = planner_cfg or PlannerConfig(d_s=driver.constants.d_s)
        for sc, log, ss in zip(held.scenarios, held.logs, roll_ss.spawn(len(held.logs))):
            seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(config.rollouts)]
            rolls = rollout_many(EgoState(0.0, float(log.ego_pos[0]), float(log.ego_vel[0]),
                                          float(log.ego_acc[0])),
                                 log.t, log.leader_pos, log.leader_vel, model, pcfg, seeds)
            v_max = (pcfg.v_max if pcfg.v_max is not None
                     else default_v_max(log.leader_vel, log.ego_vel[0]))
            ok = [r for r in rolls if r.error is None]
            audit["rollouts"] += len(rolls)
            audit["failed"] += len(rolls) - len(ok)
            for r in ok:
                a = audit_rollout(r, pcfg, driver.constants.d_s, v_max)
                audit["gap_violations"] += a["gap_violation"] > 0
                audit["speed_violations"] += a["speed_violation"] > 0
                audit["min_gap"] = min(audit["min_gap"], a["min_gap"])
            if ok:
                mean_v = np.mean([r.ego_vel for r in ok], axis=0)
                mean_a = np.mean([r.ego_acc for r in ok], axis=0)
                s_rmse, a_rmse = rmse(log, (mean_v, mean_a))
                rm[sc.id] = {"speed": s_rmse, "acc": a_rmse}
    rmse_mean = ({"speed": float(np.mean([v["speed"] for v in rm.values()])),
                  "acc": float(np.mean([v["acc"] for v in rm.values()]))} if rm else {})
    return RecoveryReport(
        N_star=N_star, seed=seed,
        horizon_recovery=float(np.mean([r.best_N == N_star for r in outcome.results])),
        horizon_counts=dict(outcome.horizon_counts),
        P_N=dict(zip(model.P_N.support, model.P_N.probs)),
        cosine=cos, baseline_cosine=base,
        converged_fraction=float(np.mean([row["grad_norm_N_star"] < lcfg.grad_tol
                                          for row in rows])),
        iterations={"median": float(np.median(its)), "mean": float(np.mean(its)),
                    "max": float(its.max())},
        trace_decreasing_fraction=float(np.mean(decreasing)),
        rmse=rm, rmse_mean=rmse_mean, audit=audit, segments=rows, traces=traces,
        model=model, driver=driver)
