"""Maximum-entropy feature matching with horizon selection per segment."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .features import (
    CONDITIONS,
    FEATURE_IDS,
    DriverConstants,
    DrivingCondition,
    FeatureError,
    FeatureVector,
    NormalizationTable,
    Thresholds,
    DEFAULT_THRESHOLDS,
    classify_condition,
    estimate_tau,
    fit_normalization,
    raw_features,
)
from .solvers import newton_minimize
from .trajectory import (
    LeaderFollowerLog,
    QuinticCoeffs,
    Subsegment,
    TrajectorySegment,
    coeffs_from_initial_state,
    eval_quintic,
    iter_segments,
    partition_segment,
    samples_per,
)

log = logging.getLogger(__name__)

_POWERS = np.array([3.0, 4.0, 5.0])
_EXP_CAP = 600.0  # keeps exp() finite for trial points far inside the leader


class LearningError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float = 0.1
    grad_tol: float = 1e-3
    max_iters: int = 1000
    horizons: tuple[float, ...] = (2.0, 3.0, 4.0)
    H: float = 12.0
    inner_max_iter: int = 50
    inner_tol: float = 1e-13
    thresholds: Thresholds = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("learning rate must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.horizons:
            raise ValueError("at least one candidate horizon is required")
        if any(n <= 0 or n > self.H for n in self.horizons):
            raise ValueError(f"horizons {self.horizons} must lie in (0, H={self.H}]")


class QuinticPlanBatch:
    """Inner trajectory problems for a batch of planning windows of equal length.

    The free coefficients are optimized in the scaled form
    ``z = (y2 N^3, y1 N^4, y0 N^5)`` so the basis is ``s^3, s^4, s^5`` on
    ``s = t / N`` in ``[0, 1)``.
    """

    def __init__(self, init_states: np.ndarray, leader_pos: np.ndarray,
                 leader_vel: np.ndarray, dt: float, condition: DrivingCondition,
                 constants: DriverConstants, table: NormalizationTable,
                 horizon: Optional[float] = None):
        init_states = np.atleast_2d(np.asarray(init_states, dtype=float))
        self.leader_pos = np.atleast_2d(np.asarray(leader_pos, dtype=float))
        self.leader_vel = np.atleast_2d(np.asarray(leader_vel, dtype=float))
        if self.leader_pos.shape != self.leader_vel.shape or \
                self.leader_pos.shape[0] != init_states.shape[0]:
            raise FeatureError("leader samples do not match the batch of initial states")
        if not np.all(np.isfinite(init_states)):
            raise LearningError("initial state must be finite")
        self.B, n = self.leader_pos.shape
        self.dt = float(dt)
        self.N = float(horizon) if horizon is not None else n * self.dt
        self.condition = condition
        self.constants = constants
        self.table = table
        self.ids = FEATURE_IDS[condition]
        self.lo, hi = table.bounds(condition)
        self.span = hi - self.lo

        self.init = init_states
        self.t = np.arange(n) * self.dt
        s = self.t / self.N
        self.P = s[:, None] ** _POWERS
        self.V = _POWERS * s[:, None] ** (_POWERS - 1) / self.N
        self.A = _POWERS * (_POWERS - 1) * s[:, None] ** (_POWERS - 2) / self.N ** 2

        p0, v0, a0 = init_states.T
        t = self.t
        self.base_pos = p0[:, None] + v0[:, None] * t + 0.5 * a0[:, None] * t ** 2
        self.base_vel = v0[:, None] + a0[:, None] * t
        self.base_acc = np.repeat(a0[:, None], n, axis=1)

        c = constants
        gap0 = self.leader_pos - self.base_pos
        affine = {
            "a": (self.base_acc, self.A),
            "ds": (c.v_d - self.base_vel, -self.V),
            "rs": (self.leader_vel - self.base_vel, -self.V),
            "cd": (gap0 - c.tau * self.base_vel - c.d_s, -(self.P + c.tau * self.V)),
            "sd": (gap0 - c.d_s, -self.P),
        }
        self.gap0 = gap0
        self.quad = [(j, *affine[f]) for j, f in enumerate(self.ids) if f != "fd"]
        self.fd_index = self.ids.index("fd") if "fd" in self.ids else None
        # shared Gram matrices and per-member linear terms
        self.gram = [self.dt * G.T @ G for _, _, G in self.quad]
        self.lin = [self.dt * e @ G for _, e, G in self.quad]

    # -- trajectory evaluation -------------------------------------------------
    def states(self, z: np.ndarray, idx=slice(None)):
        z = np.atleast_2d(z)
        return (self.base_pos[idx] + z @ self.P.T, self.base_vel[idx] + z @ self.V.T,
                self.base_acc[idx] + z @ self.A.T)

    def raw_features(self, z: np.ndarray, idx=slice(None)) -> np.ndarray:
        z = np.atleast_2d(z)
        out = np.empty((z.shape[0], len(self.ids)))
        for j, e, G in self.quad:
            r = e[idx] + z @ G.T
            out[:, j] = np.sum(r * r, axis=1) * self.dt
        if self.fd_index is not None:
            gap = self.gap0[idx] - z @ self.P.T
            out[:, self.fd_index] = np.sum(np.exp(np.minimum(-gap, _EXP_CAP)), axis=1) * self.dt
        return out

    def scaled_features(self, z: np.ndarray, idx=slice(None)) -> np.ndarray:
        return (self.raw_features(z, idx) - self.lo) / self.span

    def coeffs(self, z: np.ndarray) -> list[QuinticCoeffs]:
        z = np.atleast_2d(z)
        out = []
        for (p0, v0, a0), zi in zip(self.init, z):
            base = coeffs_from_initial_state(p0, v0, a0, duration=self.N)
            y2, y1, y0 = zi / self.N ** _POWERS
            out.append(base.with_free(y2, y1, y0))
        return out

    # -- objective ---------------------------------------------------------------
    def raw_weights(self, W: np.ndarray) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        if W.shape != (len(self.ids),):
            raise LearningError(
                f"{self.condition.value} weights need {len(self.ids)} entries, got {W.shape}")
        return W / self.span

    def objective(self, W: np.ndarray, z: np.ndarray, idx=slice(None)) -> np.ndarray:
        """W . scaled features (unclamped) for each batch member."""
        return self.scaled_features(z, idx) @ np.asarray(W, dtype=float)

    def _value(self, c: np.ndarray, z: np.ndarray, idx) -> np.ndarray:
        total = np.zeros(z.shape[0])
        for j, e, G in self.quad:
            if c[j] != 0.0:
                r = e[idx] + z @ G.T
                total += c[j] * np.sum(r * r, axis=1) * self.dt
        if self.fd_index is not None and c[self.fd_index] > 0:
            gap = self.gap0[idx] - z @ self.P.T
            expo = np.minimum(math.log(c[self.fd_index]) - gap, _EXP_CAP)
            total += np.sum(np.exp(expo), axis=1) * self.dt
        return total

    def _derivs(self, c: np.ndarray, z: np.ndarray, idx):
        g = np.zeros_like(z)
        H = np.zeros((z.shape[0], 3, 3))
        for (j, _, _), gram, lin in zip(self.quad, self.gram, self.lin):
            if c[j] == 0.0:
                continue
            g += 2 * c[j] * (z @ gram + lin[idx])
            H += 2 * c[j] * gram
        if self.fd_index is not None and c[self.fd_index] > 0:
            gap = self.gap0[idx] - z @ self.P.T
            w = np.exp(np.minimum(math.log(c[self.fd_index]) - gap, _EXP_CAP)) * self.dt
            g += w @ self.P
            H += np.einsum("bk,ki,kj->bij", w, self.P, self.P)
        return g, H

    def gradient(self, W: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Analytic gradient of :meth:`objective` with respect to ``z``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self._derivs(self.raw_weights(W), z, np.arange(z.shape[0]))[0]

    def solve(self, W: np.ndarray, max_iter: int = 50, tol: float = 1e-13
              ) -> tuple[np.ndarray, np.ndarray]:
        """Minimizers ``z`` of every member, starting from the zero guess.

        Returns ``(z, converged)``.
        """
        c = self.raw_weights(W)
        z0 = np.zeros((self.B, 3))
        if not np.any(c > 0):
            return z0, np.ones(self.B, dtype=bool)
        if self.fd_index is None or c[self.fd_index] == 0.0:
            # purely quadratic: one linear solve is exact
            H = sum(2 * c[j] * gram for (j, _, _), gram in zip(self.quad, self.gram))
            rhs = sum(2 * c[j] * lin for (j, _, _), lin in zip(self.quad, self.lin))
            z = -np.linalg.solve(H, rhs.T).T
            return z, np.ones(self.B, dtype=bool)
        res = newton_minimize(lambda z, idx: self._value(c, z, idx),
                              lambda z, idx: self._derivs(c, z, idx),
                              z0, max_iter=max_iter, tol=tol)
        if not np.all(np.isfinite(res.fun)):
            raise LearningError("inner objective became non-finite")
        return res.x, res.converged


@dataclass
class PlanResult:
    coeffs: QuinticCoeffs
    objective: float
    converged: bool


def optimize_subsegment(init_state: Sequence[float], leader_pos, leader_vel, W,
                        condition: DrivingCondition, constants: DriverConstants,
                        table: NormalizationTable, N: float, dt: float = 0.1,
                        method: str = "newton", max_evals: int = 2000) -> PlanResult:
    """Most likely quintic plan of one window under weights ``W``.

    ``method="newton"`` uses the analytic Hessian; ``method="bfgs"`` runs
    scipy's BFGS with finite-difference gradients on the raw coefficients and
    serves as an independent cross-check.
    """
    n = samples_per(N, 1.0 / dt)
    lp = np.asarray(leader_pos, dtype=float)[:n]
    lv = np.asarray(leader_vel, dtype=float)[:n]
    batch = QuinticPlanBatch(np.asarray(init_state, dtype=float)[None], lp[None], lv[None],
                             dt, condition, constants, table, horizon=N)
    W = np.asarray(W, dtype=float)
    if method == "newton":
        z, conv = batch.solve(W)
        z = z[0]
        converged = bool(conv[0])
    elif method == "bfgs":
        scale = N ** _POWERS
        fun = lambda y: float(batch.objective(W, (y * scale)[None])[0])
        res = minimize(fun, np.zeros(3), method="BFGS",
                       options={"maxiter": max_evals, "gtol": 1e-10})
        if not np.isfinite(res.fun):
            raise LearningError("inner objective became non-finite")
        z = res.x * scale
        converged = bool(res.success)
    else:
        raise ValueError(f"unknown inner method {method!r}")
    if not converged:
        log.warning("inner optimization did not converge; returning best iterate")
    return PlanResult(coeffs=batch.coeffs(z[None])[0],
                      objective=float(batch.objective(W, z[None])[0]), converged=converged)


class HorizonProblem:
    """All subsegments of one segment for one candidate horizon."""

    def __init__(self, seg: TrajectorySegment, N: float, condition: DrivingCondition,
                 constants: DriverConstants, table: NormalizationTable):
        subs = partition_segment(seg, N)
        if not subs:
            raise LearningError(f"segment {seg.segment_id} has no {N} s subsegments")
        self.segment = seg
        self.N = float(N)
        self.condition = condition
        self.subsegments = subs
        self.constants = constants = constants.replace(v_d=seg.v_d)
        self.batch = QuinticPlanBatch(
            np.array([s.init_state for s in subs]),
            np.array([s.leader_pos for s in subs]), np.array([s.leader_vel for s in subs]),
            seg.dt, condition, constants, table, horizon=N)
        raw = np.array([raw_features(s.ego_pos, s.ego_vel, s.ego_acc, s.leader_pos,
                                     s.leader_vel, s.dt, condition, constants) for s in subs])
        self.observed_raw = raw
        self.observed = table.scale(raw, condition).mean(axis=0)

    def expected(self, W: np.ndarray) -> np.ndarray:
        z, _ = self.batch.solve(W)
        return self.batch.scaled_features(z).mean(axis=0)

    def gradient(self, W: np.ndarray) -> np.ndarray:
        return self.observed - self.expected(W)


def observed_features(seg: TrajectorySegment, N: float, condition: DrivingCondition,
                      constants: DriverConstants, table: NormalizationTable) -> FeatureVector:
    """Mean normalized features of the recorded subsegments."""
    return FeatureVector(condition,
                         HorizonProblem(seg, N, condition, constants, table).observed)


def expected_features(seg: TrajectorySegment, W, N: float, condition: DrivingCondition,
                      constants: DriverConstants, table: NormalizationTable) -> FeatureVector:
    """Mean normalized features of the optimized subsegment plans under ``W``."""
    problem = HorizonProblem(seg, N, condition, constants, table)
    return FeatureVector(condition, problem.expected(np.asarray(W, dtype=float)))


@dataclass
class WeightFit:
    W: np.ndarray
    grad_norm: float
    iterations: int
    trace: list[float] = field(default_factory=list)


def learn_weights(problem: HorizonProblem, config: LearnerConfig) -> WeightFit:
    d = len(FEATURE_IDS[problem.condition])
    W = np.ones(d)
    trace: list[float] = []
    norm = math.inf
    for it in range(config.max_iters):
        grad = problem.gradient(W)
        norm = float(np.linalg.norm(grad))
        if not np.isfinite(norm):
            raise LearningError(
                f"non-finite feature gradient on {problem.segment.segment_id} at N={problem.N}")
        trace.append(norm)
        # the returned W is always the one whose gradient norm is reported
        if norm < config.grad_tol or it == config.max_iters - 1:
            break
        W = np.maximum(W - config.alpha * grad, 0.0)
    return WeightFit(W=W, grad_norm=norm, iterations=len(trace), trace=trace)


def learn_segment_weights(seg: TrajectorySegment, N: float, config: LearnerConfig,
                          condition: DrivingCondition, constants: DriverConstants,
                          table: NormalizationTable) -> WeightFit:
    """Gradient descent on the feature-matching gradient from all-ones weights."""
    return learn_weights(HorizonProblem(seg, N, condition, constants, table), config)


@dataclass
class SegmentLearnResult:
    segment_id: str
    parent: str
    condition: DrivingCondition
    best_N: float
    W: np.ndarray
    final_grad_norm: float
    per_horizon: dict[float, WeightFit]


def pick_best_horizon(norms: Mapping[float, float]) -> float:
    """Horizon with the smallest final gradient norm; ties go to the shorter one."""
    return min(sorted(norms), key=lambda n: (norms[n], n))


def select_horizon(seg: TrajectorySegment, config: LearnerConfig, condition: DrivingCondition,
                   constants: DriverConstants, table: NormalizationTable
                   ) -> SegmentLearnResult:
    fits = {float(N): learn_segment_weights(seg, N, config, condition, constants, table)
            for N in config.horizons}
    best = pick_best_horizon({N: f.grad_norm for N, f in fits.items()})
    return SegmentLearnResult(segment_id=seg.segment_id, parent=seg.parent,
                              condition=condition, best_N=best, W=fits[best].W.copy(),
                              final_grad_norm=fits[best].grad_norm, per_horizon=fits)


@dataclass
class LearnOutcome:
    results: list[SegmentLearnResult]
    pools: dict[DrivingCondition, list[np.ndarray]]
    horizon_counts: dict[float, int]
    table: NormalizationTable
    constants: DriverConstants

    def pool_sizes(self) -> tuple[int, ...]:
        return tuple(len(self.pools[c]) for c in CONDITIONS)


def fit_constants(segments: Sequence[TrajectorySegment],
                  labels: Sequence[DrivingCondition], d_s: float = 5.0,
                  tau: Optional[float] = None, v_d: Optional[float] = None
                  ) -> DriverConstants:
    if tau is None:
        tau = estimate_tau([s for s, c in zip(segments, labels)
                            if c is DrivingCondition.STEADY])
    if v_d is None:
        v_d = float(np.median([s.v_d for s in segments]))
    return DriverConstants(tau=tau, d_s=d_s, v_d=v_d)


def fit_feature_table(segments: Sequence[TrajectorySegment],
                      labels: Sequence[DrivingCondition], constants: DriverConstants,
                      horizons: Iterable[float]) -> NormalizationTable:
    """Min-max table over every observed subsegment at every candidate horizon."""
    groups: dict[DrivingCondition, list[np.ndarray]] = {}
    for seg, cond in zip(segments, labels):
        consts = constants.replace(v_d=seg.v_d)
        for N in horizons:
            for s in partition_segment(seg, N):
                groups.setdefault(cond, []).append(raw_features(
                    s.ego_pos, s.ego_vel, s.ego_acc, s.leader_pos, s.leader_vel, s.dt,
                    cond, consts))
    return fit_normalization(groups)


def learn_all(demos: Sequence[LeaderFollowerLog], config: LearnerConfig = LearnerConfig(),
              constants: Optional[DriverConstants] = None, d_s: float = 5.0,
              progress=None) -> LearnOutcome:
    """Classify, fit constants and normalization, then learn every segment.

    ``constants`` overrides the estimated tau/d_s/v_d when given.
    """
    if not demos:
        raise LearningError("no demonstrations supplied")
    segments = iter_segments(demos, config.H)
    if not segments:
        raise LearningError("demonstrations contain no complete segment")
    labels = [classify_condition(s, config.thresholds) for s in segments]
    if constants is None:
        constants = fit_constants(segments, labels, d_s=d_s)
    table = fit_feature_table(segments, labels, constants, config.horizons)

    pools: dict[DrivingCondition, list[np.ndarray]] = {c: [] for c in CONDITIONS}
    counts = Counter({float(N): 0 for N in config.horizons})
    results = []
    for k, (seg, cond) in enumerate(zip(segments, labels)):
        res = select_horizon(seg, config, cond, constants, table)
        results.append(res)
        pools[cond].append(res.W)
        counts[res.best_N] += 1
        if progress is not None:
            progress(k + 1, len(segments), res)
    return LearnOutcome(results=results, pools=pools, horizon_counts=dict(counts),
                        table=table, constants=constants)
