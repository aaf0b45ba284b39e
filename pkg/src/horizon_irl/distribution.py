"""Weight-vector copulas, the horizon PMF and the persisted driver model."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .features import (
    CONDITIONS,
    FEATURE_IDS,
    DriverConstants,
    DrivingCondition,
    NormalizationTable,
)

MODEL_VERSION = 1
DOF_GRID = tuple(range(1, 31))


class DistributionError(ValueError):
    pass


class ModelFormatError(DistributionError):
    """Raised for unreadable, truncated or wrong-version model files."""


@dataclass(frozen=True, eq=False)
class EmpiricalMarginal:
    """Empirical CDF of one weight dimension.

    The quantile function interpolates linearly between order statistics
    placed at plotting positions ``(i + 1) / (K + 1)`` and is flat outside
    them, so it never leaves ``[min, max]`` of the training values.
    """

    values: np.ndarray  # sorted training values

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
            raise DistributionError("marginal needs a non-empty finite sample")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def positions(self) -> np.ndarray:
        k = self.values.size
        return np.arange(1, k + 1) / (k + 1)

    @property
    def degenerate(self) -> bool:
        return bool(self.values[0] == self.values[-1])

    def cdf(self, x):
        return np.interp(x, self.values, self.positions, left=0.0, right=1.0)

    def ppf(self, u):
        return np.interp(u, self.positions, self.values)


@dataclass(frozen=True, eq=False)
class CopulaModel:
    condition: DrivingCondition
    correlation: np.ndarray
    dof: float
    marginals: tuple[EmpiricalMarginal, ...]
    kendall_tau: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.marginals)

    @property
    def degenerate_dims(self) -> tuple[int, ...]:
        """Dimensions whose marginal is a point mass."""
        return tuple(i for i, m in enumerate(self.marginals) if m.degenerate)

    def __post_init__(self):
        if self.dof < 1:
            raise DistributionError(f"dof must be at least 1, got {self.dof}")
        R = np.asarray(self.correlation, dtype=float)
        if R.shape != (self.dim, self.dim):
            raise DistributionError("correlation shape does not match marginals")
        if not np.allclose(R, R.T, atol=1e-12) or not np.allclose(np.diag(R), 1.0):
            raise DistributionError("correlation must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(R).min() < -1e-10:
            raise DistributionError("correlation is not positive semi-definite")


def nearest_correlation(R: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Clip negative eigenvalues to ``floor`` and rescale to unit diagonal."""
    R = 0.5 * (np.asarray(R, dtype=float) + np.asarray(R, dtype=float).T)
    vals, vecs = np.linalg.eigh(R)
    C = (vecs * np.maximum(vals, floor)) @ vecs.T
    d = np.sqrt(np.clip(np.diag(C), 1e-300, None))
    C = C / np.outer(d, d)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def pairwise_kendall(X: np.ndarray) -> np.ndarray:
    dim = X.shape[1]
    tau = np.eye(dim)
    for i in range(dim):
        for j in range(i + 1, dim):
            if np.ptp(X[:, i]) == 0 or np.ptp(X[:, j]) == 0:
                t = 0.0  # a point mass carries no dependence
            else:
                t = stats.kendalltau(X[:, i], X[:, j]).statistic
                t = 0.0 if not np.isfinite(t) else float(t)
            tau[i, j] = tau[j, i] = t
    return tau


def pseudo_observations(X: np.ndarray) -> np.ndarray:
    K = X.shape[0]
    return stats.rankdata(X, axis=0) / (K + 1)


def _t_copula_loglik(U: np.ndarray, R: np.ndarray, dof: float) -> float:
    x = stats.t.ppf(U, dof)
    joint = stats.multivariate_t(loc=np.zeros(R.shape[0]), shape=R, df=dof,
                                 allow_singular=True).logpdf(x)
    return float(np.sum(joint) - np.sum(stats.t.logpdf(x, dof)))


def fit_t_copula(pool: Sequence[np.ndarray], condition: DrivingCondition
                 ) -> CopulaModel:
    """Fit a t copula with empirical marginals to a pool of weight vectors."""
    X = np.atleast_2d(np.asarray(pool, dtype=float))
    K, dim = X.shape
    if dim != len(FEATURE_IDS[condition]):
        raise DistributionError(
            f"{condition.value} weights have {len(FEATURE_IDS[condition])} entries, got {dim}")
    if K < dim + 2:
        raise DistributionError(
            f"{condition.value} pool has {K} weight vectors; at least {dim + 2} are "
            "needed to fit a copula")
    marginals = tuple(EmpiricalMarginal(X[:, i]) for i in range(dim))
    tau = pairwise_kendall(X)
    R = nearest_correlation(np.sin(0.5 * np.pi * tau))

    live = [i for i, m in enumerate(marginals) if not m.degenerate]
    if len(live) >= 2:
        U = pseudo_observations(X[:, live])
        Rl = R[np.ix_(live, live)]
        ll = [_t_copula_loglik(U, Rl, nu) for nu in DOF_GRID]
        # first maximum keeps the choice stable under exact ties
        dof = float(DOF_GRID[int(np.argmax(ll))])
    else:
        dof = float(DOF_GRID[-1])
    return CopulaModel(condition=condition, correlation=R, dof=dof,
                       marginals=marginals, kendall_tau=tau)


def sample_weights(model: CopulaModel, rng: np.random.Generator, size: Optional[int] = None
                   ) -> np.ndarray:
    """Draw weight vectors: multivariate t latent, t CDF, marginal quantiles."""
    n = 1 if size is None else int(size)
    dim = model.dim
    # draw the latent through the Cholesky-free eigen route so singular R works
    vals, vecs = np.linalg.eigh(model.correlation)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    z = rng.standard_normal((n, dim)) @ root.T
    w = rng.chisquare(model.dof, size=n) / model.dof
    x = z / np.sqrt(w)[:, None]
    u = stats.t.cdf(x, model.dof)
    out = np.column_stack([m.ppf(u[:, i]) for i, m in enumerate(model.marginals)])
    out = np.maximum(out, 0.0)
    return out[0] if size is None else out


@dataclass(frozen=True, eq=False)
class HorizonDistribution:
    support: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.support) != len(self.probs) or not self.support:
            raise DistributionError("horizon support and probabilities differ in length")
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise DistributionError("horizon probabilities must be non-negative and sum to 1")

    @property
    def mode(self) -> float:
        return float(self.support[int(np.argmax(self.probs))])

    def __eq__(self, other):
        if not isinstance(other, HorizonDistribution):
            return NotImplemented
        return self.support == other.support and self.probs == other.probs


def fit_horizon_distribution(counts: Mapping[float, int],
                             support: Optional[Sequence[float]] = None
                             ) -> HorizonDistribution:
    support = tuple(sorted(float(s) for s in (support if support is not None else counts)))
    c = np.array([counts.get(s, counts.get(int(s), 0)) if hasattr(counts, "get") else 0
                  for s in support], dtype=float)
    unknown = set(float(k) for k in counts) - set(support)
    if unknown:
        raise DistributionError(f"counts for horizons outside the support: {sorted(unknown)}")
    if np.any(c < 0):
        raise DistributionError("horizon counts must be non-negative")
    total = c.sum()
    if total < 1:
        raise DistributionError("horizon counts are all zero")
    probs = c / total
    # put the rounding residue on the largest entry so the sum is 1 to the last ulp
    k = int(np.argmax(probs))
    probs[k] = 1.0 - math.fsum(np.delete(probs, k))
    return HorizonDistribution(support, tuple(float(p) for p in probs))


def sample_horizon(pmf: HorizonDistribution, rng: np.random.Generator) -> float:
    return float(pmf.support[rng.choice(len(pmf.support), p=np.asarray(pmf.probs))])


@dataclass(eq=False)
class LearnedDriverModel:
    copulas: dict[DrivingCondition, CopulaModel]
    P_N: HorizonDistribution
    normalization: NormalizationTable
    constants: DriverConstants
    provenance: dict = field(default_factory=dict)
    missing: tuple[DrivingCondition, ...] = ()

    def copula(self, condition: DrivingCondition) -> CopulaModel:
        try:
            return self.copulas[condition]
        except KeyError:
            raise DistributionError(
                f"model has no copula for the {condition.value} condition "
                "(too few training segments)") from None

    def to_json(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "constants": {"tau": self.constants.tau, "d_s": self.constants.d_s,
                          "v_d": self.constants.v_d},
            "normalization": self.normalization.to_json(),
            "copulas": {c.value: _copula_json(m) for c, m in self.copulas.items()},
            "missing": [c.value for c in self.missing],
            "P_N": {"support": list(self.P_N.support), "probs": list(self.P_N.probs)},
            "provenance": self.provenance,
        }

    def __eq__(self, other):
        if not isinstance(other, LearnedDriverModel):
            return NotImplemented
        return dumps_model(self) == dumps_model(other)


def _copula_json(m: CopulaModel) -> dict:
    return {"features": list(FEATURE_IDS[m.condition]),
            "correlation": m.correlation.tolist(),
            "kendall_tau": m.kendall_tau.tolist(),
            "dof": m.dof,
            "marginals": [mg.values.tolist() for mg in m.marginals]}


def _copula_from_json(cond: DrivingCondition, d: Mapping) -> CopulaModel:
    if tuple(d["features"]) != FEATURE_IDS[cond]:
        raise ModelFormatError(f"feature list mismatch for {cond.value} copula")
    return CopulaModel(condition=cond, correlation=np.array(d["correlation"], dtype=float),
                       dof=float(d["dof"]),
                       marginals=tuple(EmpiricalMarginal(np.array(v, dtype=float))
                                       for v in d["marginals"]),
                       kendall_tau=np.array(d["kendall_tau"], dtype=float))


def build_model(pools: Mapping[DrivingCondition, Sequence[np.ndarray]],
                horizon_counts: Mapping[float, int], table: NormalizationTable,
                constants: DriverConstants, support: Sequence[float] = (2.0, 3.0, 4.0),
                provenance: Optional[dict] = None) -> LearnedDriverModel:
    """Fit every condition pool that is large enough; record the rest as missing."""
    copulas, missing = {}, []
    for cond in CONDITIONS:
        pool = pools.get(cond, [])
        if len(pool) >= len(FEATURE_IDS[cond]) + 2:
            copulas[cond] = fit_t_copula(pool, cond)
        else:
            missing.append(cond)
    if not copulas:
        raise DistributionError("no condition has enough weight vectors for a copula")
    return LearnedDriverModel(copulas=copulas,
                              P_N=fit_horizon_distribution(horizon_counts, support),
                              normalization=table, constants=constants,
                              provenance=dict(provenance or {}), missing=tuple(missing))


def point_mass_model(W: Mapping[DrivingCondition, np.ndarray], N: float,
                     table: NormalizationTable, constants: DriverConstants,
                     support: Sequence[float] = (2.0, 3.0, 4.0)) -> LearnedDriverModel:
    """Deterministic model: every copula returns ``W[c]`` and P_N is a delta at ``N``."""
    copulas = {}
    for cond, w in W.items():
        w = np.asarray(w, dtype=float)
        copulas[cond] = CopulaModel(cond, np.eye(w.size), float(DOF_GRID[-1]),
                                    tuple(EmpiricalMarginal([x]) for x in w), np.eye(w.size))
    support = tuple(sorted(set(float(s) for s in support) | {float(N)}))
    return LearnedDriverModel(copulas, fit_horizon_distribution({float(N): 1}, support),
                              table, constants,
                              missing=tuple(c for c in CONDITIONS if c not in copulas))


def dumps_model(model: LearnedDriverModel) -> str:
    # repr-based float output round-trips exactly (17 significant digits)
    return json.dumps(model.to_json(), indent=2, sort_keys=True) + "\n"


def loads_model(text: str) -> LearnedDriverModel:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ModelFormatError("model file must hold a JSON object")
    if data.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"model version {data.get('version')!r} is not supported (expected {MODEL_VERSION})")
    for key in ("constants", "normalization", "copulas", "P_N"):
        if key not in data:
            raise ModelFormatError(f"model file lacks the {key!r} section")
    try:
        copulas = {DrivingCondition(k): _copula_from_json(DrivingCondition(k), v)
                   for k, v in data["copulas"].items()}
        missing = tuple(DrivingCondition(c) for c in data.get("missing", []))
        return LearnedDriverModel(
            copulas=copulas,
            P_N=HorizonDistribution(tuple(float(s) for s in data["P_N"]["support"]),
                                    tuple(float(p) for p in data["P_N"]["probs"])),
            normalization=NormalizationTable.from_json(data["normalization"]),
            constants=DriverConstants(**data["constants"]),
            provenance=data.get("provenance", {}),
            missing=missing)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model file violates the schema: {exc}") from None


def save_model(model: LearnedDriverModel, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path: Union[str, Path]) -> LearnedDriverModel:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from None
    return loads_model(text)


def corpus_hash(paths_or_bytes: Sequence[Union[bytes, str]]) -> str:
    h = hashlib.sha256()
    for item in paths_or_bytes:
        h.update(item if isinstance(item, bytes) else item.encode())
    return h.hexdigest()
