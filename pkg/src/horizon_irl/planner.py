"""Receding-horizon longitudinal control with sampled weights and horizons."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .distribution import LearnedDriverModel, sample_horizon, sample_weights
from .features import (
    CONDITIONS,
    FEATURE_IDS,
    DEFAULT_THRESHOLDS,
    DriverConstants,
    DrivingCondition,
    NormalizationTable,
    Thresholds,
    classify_from_means,
    thw,
    ttci,
)
from .solvers import newton_minimize

_EXP_CAP = 600.0
AUDIT_GAP_TOL = 0.1  # [m]
AUDIT_SPEED_TOL = 0.1  # [m/s]


class PlannerError(RuntimeError):
    pass


class InfeasiblePlanError(PlannerError):
    """A plan (or rollout step) breaks the gap or speed constraints beyond tolerance."""

    def __init__(self, message: str, gap_violation: float = 0.0,
                 speed_violation: float = 0.0, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.gap_violation = gap_violation
        self.speed_violation = speed_violation
        self.step = step


@dataclass(frozen=True)
class EgoState:
    t: float
    pos: float
    vel: float
    acc: float = 0.0


@dataclass(frozen=True)
class PlannerConfig:
    dt: float = 0.1  # [s]
    v_min: float = 0.0  # [m/s]
    v_max: Optional[float] = None  # [m/s]; None means max recorded leader speed
    d_s: float = 5.0  # [m]
    a_bounds: tuple[float, float] = (-4.0, 4.0)  # [m/s^2]
    penalty_weight: float = 1e4
    replan_every: int = 1
    resample_W: str = "per_run"
    resample_N: str = "per_step"
    max_newton_iter: int = 50
    thresholds: Thresholds = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not self.dt > 0:
            raise PlannerError(f"dt must be positive, got {self.dt}")
        if self.v_max is not None and not self.v_min < self.v_max:
            raise PlannerError(f"v_min={self.v_min} must be below v_max={self.v_max}")
        if not self.a_bounds[0] < 0 < self.a_bounds[1]:
            raise PlannerError("acceleration bounds must bracket zero")
        if self.replan_every < 1:
            raise PlannerError("replan_every must be at least 1")
        for name in ("resample_W", "resample_N"):
            if getattr(self, name) not in ("per_run", "per_step"):
                raise PlannerError(f"{name} must be 'per_run' or 'per_step'")

    def with_v_max(self, v_max: float) -> "PlannerConfig":
        from dataclasses import replace
        return replace(self, v_max=float(v_max))


def predict_leader(pos: float, vel: float, N: float, dt: float
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity leader samples at ``k * dt`` for ``k = 1..N/dt``."""
    if not N > 0:
        raise PlannerError(f"prediction horizon must be positive, got {N}")
    k = np.arange(1, _steps(N, dt) + 1)
    return pos + vel * k * dt, np.full(k.size, float(vel))


def _steps(N: float, dt: float) -> int:
    return max(1, int(round(N / dt)))


@functools.lru_cache(maxsize=64)
def _kinematic_maps(K: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear maps from the control sequence to future speeds and positions."""
    i = np.arange(K)[:, None]
    j = np.arange(K)[None, :]
    low = j <= i
    Lv = np.where(low, dt, 0.0)
    Lp = np.where(low, dt * dt * (i - j + 0.5), 0.0)
    Lv.setflags(write=False)
    Lp.setflags(write=False)
    return Lv, Lp


@functools.lru_cache(maxsize=256)
def _gram(K: int, dt: float, feature: str, tau: float) -> np.ndarray:
    Lv, Lp = _kinematic_maps(K, dt)
    M = {"a": np.eye(K), "ds": Lv, "rs": Lv, "cd": tau * Lv + Lp, "sd": Lp}[feature]
    G = M.T @ M
    G.setflags(write=False)
    return G


class _PlanBatch:
    """Double-integrator plans for a batch of ego states in one condition."""

    def __init__(self, states: np.ndarray, leader_pos: np.ndarray, leader_vel: np.ndarray,
                 W: np.ndarray, condition: DrivingCondition, K: int,
                 constants: DriverConstants, table: NormalizationTable, cfg: PlannerConfig,
                 v_max: float):
        self.dt = dt = cfg.dt
        self.K = K
        self.cond = condition
        self.ids = FEATURE_IDS[condition]
        self.cfg = cfg
        self.v_max = v_max
        p0, v0 = states[:, 0], states[:, 1]
        Lv, Lp = _kinematic_maps(K, dt)
        self.Lv, self.Lp = Lv, Lp
        k = np.arange(1, K + 1) * dt
        self.v_free = v0[:, None] + 0.0 * k  # speeds under zero control
        self.p_free = p0[:, None] + v0[:, None] * k
        self.gap_free = leader_pos - self.p_free
        W = np.asarray(W, dtype=float)
        self.c = W / table.span(condition)
        total = W.sum(axis=1)
        # penalties scale with the weights so the argmin is invariant to W's scale
        self.rho = cfg.penalty_weight * np.where(total > 0, total, 1.0)
        tau, d_s, v_d = constants.tau, constants.d_s, constants.v_d
        # each quadratic feature is sum(dt * (r0 + M a)^2)
        self.quad = {}
        for f_i, f in enumerate(self.ids):
            if f == "a":
                self.quad[f_i] = (np.zeros_like(self.v_free), np.eye(K))
            elif f == "ds":
                self.quad[f_i] = (self.v_free - v_d, Lv)
            elif f == "rs":
                self.quad[f_i] = (self.v_free - leader_vel, Lv)
            elif f == "cd":
                self.quad[f_i] = (tau * self.v_free + d_s - self.gap_free, tau * Lv + Lp)
            elif f == "sd":
                self.quad[f_i] = (d_s - self.gap_free, Lp)
        self.fd = self.ids.index("fd") if "fd" in self.ids else None
        H0 = np.zeros((states.shape[0], K, K))
        for f_i in self.quad:
            H0 += 2 * dt * self.c[:, f_i, None, None] * _gram(K, dt, self.ids[f_i], tau)[None]
        self.H0 = H0

    def trajectory(self, a: np.ndarray, idx=slice(None)):
        v = self.v_free[idx] + a @ self.Lv.T
        gap = self.gap_free[idx] - a @ self.Lp.T
        return v, gap

    def _violations(self, a, idx):
        v, gap = self.trajectory(a, idx)
        lo, hi = self.cfg.a_bounds
        return (np.maximum(self.cfg.d_s - gap, 0.0), np.maximum(v - self.v_max, 0.0),
                np.maximum(self.cfg.v_min - v, 0.0), np.maximum(a - hi, 0.0),
                np.maximum(lo - a, 0.0), gap)

    def value(self, a: np.ndarray, idx) -> np.ndarray:
        out = np.zeros(a.shape[0])
        for f_i, (r0, M) in self.quad.items():
            r = r0[idx] + a @ M.T
            out += self.c[idx, f_i] * self.dt * (r * r).sum(axis=1)
        g_lo, v_hi, v_lo, a_hi, a_lo, gap = self._violations(a, idx)
        if self.fd is not None:
            out += self.c[idx, self.fd] * self.dt * np.exp(np.minimum(-gap, _EXP_CAP)).sum(1)
        pen = (g_lo ** 2 + v_hi ** 2 + v_lo ** 2 + a_hi ** 2 + a_lo ** 2).sum(1)
        return out + self.rho[idx] * pen

    def derivs(self, a: np.ndarray, idx):
        grad = np.zeros_like(a)
        H = self.H0[idx].copy()
        for f_i, (r0, M) in self.quad.items():
            r = r0[idx] + a @ M.T
            grad += 2 * self.dt * self.c[idx, f_i, None] * (r @ M)
        g_lo, v_hi, v_lo, a_hi, a_lo, gap = self._violations(a, idx)
        rho = self.rho[idx]
        Lv, Lp = self.Lv, self.Lp
        if self.fd is not None:
            e = self.c[idx, self.fd, None] * self.dt * np.exp(np.minimum(-gap, _EXP_CAP))
            grad += e @ Lp
            H += (Lp.T[None] * e[:, None, :]) @ Lp
        grad += 2 * rho[:, None] * ((-g_lo) @ (-Lp) + (v_hi - v_lo) @ Lv + (a_hi - a_lo))
        mg = (g_lo > 0).astype(float)
        mv = ((v_hi > 0) | (v_lo > 0)).astype(float)
        ma = ((a_hi > 0) | (a_lo > 0)).astype(float)
        if mg.any() or mv.any():
            H += 2 * rho[:, None, None] * ((Lp.T[None] * mg[:, None, :]) @ Lp
                                           + (Lv.T[None] * mv[:, None, :]) @ Lv)
        H[:, np.arange(self.K), np.arange(self.K)] += 2 * rho[:, None] * ma
        return grad, H


@dataclass
class StepPlan:
    a_first: np.ndarray
    plans: np.ndarray  # (B, K) acceleration sequences
    objective: np.ndarray
    gap_violation: np.ndarray  # [m] worst shortfall below d_s per member
    speed_violation: np.ndarray  # [m/s] worst excursion outside the speed bounds

    def check(self, j: int = 0, step: Optional[int] = None) -> None:
        gv, sv = float(self.gap_violation[j]), float(self.speed_violation[j])
        if gv > AUDIT_GAP_TOL or sv > AUDIT_SPEED_TOL:
            raise InfeasiblePlanError(
                f"plan violates constraints (gap short by {gv:.3f} m, "
                f"speed outside bounds by {sv:.3f} m/s)", gv, sv, step)


def solve_nmpc_batch(states: np.ndarray, leader_states: np.ndarray, W: np.ndarray,
                     condition: DrivingCondition, N: float, constants: DriverConstants,
                     table: NormalizationTable, cfg: PlannerConfig, v_max: float,
                     warm: Optional[np.ndarray] = None) -> StepPlan:
    """Solve one planning problem per row of ``states`` (pos, vel) sharing ``N``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    leader_states = np.atleast_2d(np.asarray(leader_states, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[1] != len(FEATURE_IDS[condition]):
        raise PlannerError(f"{condition.value} needs {len(FEATURE_IDS[condition])} weights, "
                           f"got {W.shape[1]}")
    K = _steps(N, cfg.dt)
    k = np.arange(1, K + 1) * cfg.dt
    lp = leader_states[:, :1] + leader_states[:, 1:2] * k
    lv = np.repeat(leader_states[:, 1:2], K, axis=1)
    batch = _PlanBatch(states, lp, lv, W, condition, K, constants, table, cfg, v_max)
    x0 = np.zeros((states.shape[0], K)) if warm is None else np.asarray(warm, dtype=float)
    res = newton_minimize(batch.value, batch.derivs, x0, max_iter=cfg.max_newton_iter,
                          tol=1e-10, flat_tol=1e-7)
    if not np.all(np.isfinite(res.fun)):
        raise PlannerError("planner objective is not finite")
    g_lo, v_hi, v_lo, *_ = batch._violations(res.x, slice(None))
    lo, hi = cfg.a_bounds
    return StepPlan(a_first=np.clip(res.x[:, 0], lo, hi), plans=res.x, objective=res.fun,
                    gap_violation=g_lo.max(axis=1),
                    speed_violation=np.maximum(v_hi, v_lo).max(axis=1))


def solve_nmpc_step(ego: EgoState, leader_pred: tuple[float, float], W, condition,
                    N: float, constants: DriverConstants, table: NormalizationTable,
                    cfg: PlannerConfig, warm: Optional[np.ndarray] = None,
                    v_max: Optional[float] = None) -> tuple[float, np.ndarray]:
    """First control and planned acceleration sequence for a single ego.

    ``leader_pred`` is the leader's current ``(pos, vel)``; the prediction over
    the horizon is the constant-velocity extrapolation of :func:`predict_leader`.
    """
    v_max = v_max if v_max is not None else cfg.v_max
    if v_max is None:
        raise PlannerError("v_max must be given by the config or the caller")
    if ego.vel < cfg.v_min - AUDIT_SPEED_TOL or ego.vel > v_max + AUDIT_SPEED_TOL:
        raise InfeasiblePlanError(f"ego speed {ego.vel} outside [{cfg.v_min}, {v_max}]")
    plan = solve_nmpc_batch(np.array([[ego.pos, ego.vel]]), np.array([leader_pred]),
                            np.asarray(W, dtype=float)[None], DrivingCondition(condition), N,
                            constants, table, cfg, v_max,
                            None if warm is None else np.asarray(warm, dtype=float)[None])
    plan.check()
    return float(plan.a_first[0]), plan.plans[0]


def classify_instant(gap: float, ego_vel: float, leader_vel: float,
                     th: Thresholds = DEFAULT_THRESHOLDS) -> DrivingCondition:
    if gap <= 0:
        raise InfeasiblePlanError(f"ego reached the leader (gap {gap:.3f} m)", -gap)
    return classify_from_means(thw(gap, ego_vel), ttci(ego_vel, leader_vel, gap), gap,
                               ego_vel, th)


@dataclass
class Rollout:
    seed: int
    t: np.ndarray
    ego_pos: np.ndarray
    ego_vel: np.ndarray
    ego_acc: np.ndarray
    leader_pos: np.ndarray
    leader_vel: np.ndarray
    condition: list[str]
    N_sampled: np.ndarray
    W_hash: list[str]
    error: Optional[str] = None

    @property
    def gap(self) -> np.ndarray:
        return self.leader_pos - self.ego_pos

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "ego_pos", "ego_vel", "ego_acc", "leader_pos", "leader_vel", "gap",
                    "condition", "N_sampled"])
        for k in range(self.t.size):
            w.writerow([repr(float(x)) for x in (self.t[k], self.ego_pos[k], self.ego_vel[k],
                                                 self.ego_acc[k], self.leader_pos[k],
                                                 self.leader_vel[k], self.gap[k])]
                       + [self.condition[k], repr(float(self.N_sampled[k]))])
        return buf.getvalue()


def _w_hash(w: np.ndarray) -> str:
    return hashlib.sha1(np.asarray(w, dtype=float).tobytes()).hexdigest()[:12]


def _shift(prev: Optional[np.ndarray], K: int) -> np.ndarray:
    if prev is None:
        return np.zeros(K)
    out = np.zeros(K)
    tail = prev[1:K + 1]
    out[:tail.size] = tail
    return out


def rollout_many(init: EgoState, leader_t: np.ndarray, leader_pos: np.ndarray,
                 leader_vel: np.ndarray, model: LearnedDriverModel, cfg: PlannerConfig,
                 seeds: Sequence[int], accel_noise_std: float = 0.0) -> list[Rollout]:
    """Closed-loop rollouts for several seeds, solved in lock-step batches.

    Each seed owns its random stream: it first draws one weight vector per
    condition of the model (in a fixed condition order), then one horizon per
    replanning step, then (with ``accel_noise_std > 0``) one noise draw added
    to each applied control. Members sharing a condition and horizon at a step are
    solved together, which changes nothing about their individual results.
    """
    leader_t = np.asarray(leader_t, dtype=float)
    leader_pos = np.asarray(leader_pos, dtype=float)
    leader_vel = np.asarray(leader_vel, dtype=float)
    n = leader_t.size
    if n < 2 or leader_pos.size != n or leader_vel.size != n:
        raise PlannerError("leader log must hold aligned time, position and speed samples")
    if abs((leader_t[1] - leader_t[0]) - cfg.dt) > 1e-9:
        raise PlannerError("leader sampling step differs from the control step")
    v_max = cfg.v_max if cfg.v_max is not None else default_v_max(leader_vel, init.vel)
    if not v_max > cfg.v_min:
        raise PlannerError(f"v_max={v_max} must exceed v_min={cfg.v_min}")
    B = len(seeds)
    rngs = [np.random.default_rng(int(s)) for s in seeds]

    def draw_weights(r):
        return {c: sample_weights(model.copulas[c], r) for c in CONDITIONS
                if c in model.copulas}

    weights = [draw_weights(r) for r in rngs]
    pos = np.zeros((B, n))
    vel = np.zeros((B, n))
    acc = np.zeros((B, n))
    pos[:, 0], vel[:, 0], acc[:, 0] = init.pos, init.vel, init.acc
    conds = [[""] * n for _ in range(B)]
    Ns = np.full((B, n), np.nan)
    whash = [[""] * n for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    errors: list[Optional[str]] = [None] * B
    warm: list[Optional[np.ndarray]] = [None] * B
    N_run = [sample_horizon(model.P_N, r) if cfg.resample_N == "per_run" else None
             for r in rngs]
    lo, hi = cfg.a_bounds
    dt = cfg.dt
    a_hold = np.zeros(B)
    plans: list[Optional[np.ndarray]] = [None] * B
    for k in range(n - 1):
        members = np.flatnonzero(alive)
        replan = k % cfg.replan_every == 0
        groups: dict[tuple, list[int]] = {}
        for b in members:
            try:
                cond = classify_instant(leader_pos[k] - pos[b, k], vel[b, k], leader_vel[k],
                                        cfg.thresholds)
                model.copula(cond)
            except Exception as exc:  # infeasible state or missing copula
                alive[b] = False
                errors[b] = f"step {k}: {exc}"
                continue
            conds[b][k] = cond.value
            if replan:
                if cfg.resample_W == "per_step":
                    weights[b][cond] = sample_weights(model.copulas[cond], rngs[b])
                N = N_run[b] if N_run[b] is not None else sample_horizon(model.P_N, rngs[b])
                Ns[b, k] = N
                whash[b][k] = _w_hash(weights[b][cond])
                groups.setdefault((cond, N), []).append(b)
            else:
                Ns[b, k] = Ns[b, k - 1]
                whash[b][k] = whash[b][k - 1]
        for (cond, N), bs in groups.items():
            bs = np.array(bs)
            K = _steps(N, dt)
            states = np.column_stack([pos[bs, k], vel[bs, k]])
            lstates = np.tile([leader_pos[k], leader_vel[k]], (bs.size, 1))
            Wb = np.stack([weights[b][cond] for b in bs])
            x0 = np.stack([_shift(warm[b], K) for b in bs])
            try:
                plan = solve_nmpc_batch(states, lstates, Wb, cond, N, model.constants,
                                        model.normalization, cfg, v_max, x0)
            except PlannerError as exc:
                for b in bs:
                    alive[b] = False
                    errors[b] = f"step {k}: {exc}"
                continue
            for j, b in enumerate(bs):
                try:
                    plan.check(j, k)
                except InfeasiblePlanError as exc:
                    alive[b] = False
                    errors[b] = str(exc)
                    continue
                warm[b] = plan.plans[j]
                plans[b] = plan.plans[j]
                a_hold[b] = plan.a_first[j]
        for b in np.flatnonzero(alive):
            if not replan and plans[b] is not None:
                offs = k % cfg.replan_every
                a_cmd = plans[b][min(offs, plans[b].size - 1)]
            else:
                a_cmd = a_hold[b]
            v = vel[b, k]
            a = float(np.clip(a_cmd, lo, hi))
            if accel_noise_std > 0:
                a += float(rngs[b].normal(0.0, accel_noise_std))
            # keep the next speed inside the bounds as well as the box
            a = float(np.clip(a, (cfg.v_min - v) / dt, (v_max - v) / dt))
            acc[b, k] = a
            pos[b, k + 1] = pos[b, k] + v * dt + 0.5 * a * dt * dt
            # the clip only removes rounding residue of the speed-bound clamp above
            vel[b, k + 1] = min(max(v + a * dt, cfg.v_min), v_max)
    for b in range(B):
        # the last sample repeats the previous control, as in the log format
        acc[b, -1] = acc[b, -2]
        if alive[b]:
            conds[b][-1] = conds[b][-2]
            Ns[b, -1] = Ns[b, -2]
            whash[b][-1] = whash[b][-2]
    out = []
    for b, seed in enumerate(seeds):
        out.append(Rollout(seed=int(seed), t=leader_t.copy(), ego_pos=pos[b], ego_vel=vel[b],
                           ego_acc=acc[b], leader_pos=leader_pos.copy(),
                           leader_vel=leader_vel.copy(), condition=conds[b],
                           N_sampled=Ns[b], W_hash=whash[b], error=errors[b]))
    return out


def rollout_scenario(init: EgoState, leader_log, model: LearnedDriverModel,
                     cfg: PlannerConfig, seed: int) -> Rollout:
    """Single seeded rollout against a recorded leader.

    ``leader_log`` is a :class:`LeaderFollowerLog` or a ``(t, pos, vel)`` tuple.
    Raises :class:`InfeasiblePlanError` with the failing step when a plan or
    state breaks the constraints.
    """
    t, lp, lv = _leader_arrays(leader_log)
    r = rollout_many(init, t, lp, lv, model, cfg, [seed])[0]
    if r.error is not None:
        raise InfeasiblePlanError(r.error)
    return r


def default_v_max(leader_vel, ego_vel0: float) -> float:
    """Highest recorded leader speed, raised to the ego's start speed if that is higher.

    Without the raise an ego that starts faster than the leader ever drives
    would violate the speed bound before its first control.
    """
    return max(float(np.max(leader_vel)), float(ego_vel0))


def _leader_arrays(leader_log):
    if hasattr(leader_log, "leader_pos"):
        return leader_log.t, leader_log.leader_pos, leader_log.leader_vel
    t, lp, lv = leader_log
    return np.asarray(t, float), np.asarray(lp, float), np.asarray(lv, float)


def audit_rollout(r: Rollout, cfg: PlannerConfig, d_s: float, v_max: float) -> dict:
    """Constraint violations of an applied trajectory (zero when compliant)."""
    gap_short = max(0.0, float(d_s - AUDIT_GAP_TOL - r.gap.min()))
    over = max(0.0, float(r.ego_vel.max() - (v_max + 0.01)))
    under = max(0.0, float((cfg.v_min - 0.01) - r.ego_vel.min()))
    return {"min_gap": float(r.gap.min()), "gap_violation": gap_short,
            "speed_violation": max(over, under),
            "ok": gap_short == 0.0 and over == 0.0 and under == 0.0}
