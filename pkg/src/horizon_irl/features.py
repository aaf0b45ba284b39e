"""Cost features, driving-condition classification and feature normalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .trajectory import TrajectorySegment

THW_CAP = 1e6  # [s] sentinel for a (nearly) stationary ego
STATIONARY_SPEED = 1e-3  # [m/s]


class DrivingCondition(str, Enum):
    STEADY = "steady"
    FREE = "free"
    UNSTEADY = "unsteady"


FEATURE_IDS: dict[DrivingCondition, tuple[str, ...]] = {
    DrivingCondition.STEADY: ("a", "ds", "rs", "cd"),
    DrivingCondition.FREE: ("a", "ds", "fd"),
    DrivingCondition.UNSTEADY: ("a", "ds", "rs", "sd"),
}
ALL_FEATURES = ("a", "ds", "rs", "cd", "sd", "fd")
CONDITIONS = tuple(DrivingCondition)


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    steady_thw: float = 6.0  # [s]
    steady_ttci: float = 0.05  # [1/s]
    free_thw: float = 6.0  # [s]
    free_ttci: float = 0.0  # [1/s]
    free_gap: float = 35.0  # [m]
    free_speed: float = 5.0  # [m/s]


DEFAULT_THRESHOLDS = Thresholds()


@dataclass(frozen=True)
class DriverConstants:
    tau: float = 1.0  # [s] minimum observed time headway
    d_s: float = 5.0  # [m] standstill distance
    v_d: float = 25.0  # [m/s] desired speed

    def __post_init__(self):
        if not self.tau > 0:
            raise FeatureError(f"tau must be positive, got {self.tau}")
        if not self.d_s > 0:
            raise FeatureError(f"d_s must be positive, got {self.d_s}")

    def replace(self, **kw) -> "DriverConstants":
        return DriverConstants(**{**self.__dict__, **kw})


@dataclass(frozen=True, eq=False)
class FeatureVector:
    condition: DrivingCondition
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (len(FEATURE_IDS[self.condition]),):
            raise FeatureError(
                f"{self.condition.value} expects {len(FEATURE_IDS[self.condition])} "
                f"values, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def ids(self) -> tuple[str, ...]:
        return FEATURE_IDS[self.condition]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.ids, map(float, self.values)))

    def __getitem__(self, feature: str) -> float:
        return float(self.values[self.ids.index(feature)])


def thw(gap, ego_vel):
    """Time headway gap / speed, capped at ``THW_CAP`` for a stationary ego."""
    gap = np.asarray(gap, dtype=float)
    ego_vel = np.asarray(ego_vel, dtype=float)
    if np.any(gap <= 0):
        raise FeatureError("time headway needs a positive gap")
    moving = ego_vel > STATIONARY_SPEED
    out = np.where(moving, gap / np.where(moving, ego_vel, 1.0), THW_CAP)
    out = np.minimum(out, THW_CAP)
    return float(out) if out.ndim == 0 else out


def ttci(ego_vel, leader_vel, gap):
    """Inverse time to collision; positive while the ego closes in."""
    gap = np.asarray(gap, dtype=float)
    if np.any(gap <= 0):
        raise FeatureError("time-to-collision inverse needs a positive gap")
    out = (np.asarray(ego_vel, dtype=float) - np.asarray(leader_vel, dtype=float)) / gap
    return float(out) if out.ndim == 0 else out


def classify_from_means(mean_thw: float, mean_ttci: float, mean_gap: float,
                        mean_speed: float, th: Thresholds = DEFAULT_THRESHOLDS
                        ) -> DrivingCondition:
    if mean_thw < th.steady_thw and mean_ttci < th.steady_ttci:
        return DrivingCondition.STEADY
    if (mean_thw > th.free_thw and mean_ttci <= th.free_ttci
            and mean_gap > th.free_gap and mean_speed > th.free_speed):
        return DrivingCondition.FREE
    return DrivingCondition.UNSTEADY


def condition_statistics(gap, ego_vel, leader_vel) -> tuple[float, float, float, float]:
    gap = np.asarray(gap, dtype=float)
    return (float(np.mean(thw(gap, ego_vel))),
            float(np.mean(ttci(ego_vel, leader_vel, gap))),
            float(np.mean(gap)), float(np.mean(ego_vel)))


def classify_condition(seg: TrajectorySegment, th: Thresholds = DEFAULT_THRESHOLDS
                       ) -> DrivingCondition:
    """Label a segment from its average headway, TTCi, gap and speed."""
    return classify_from_means(*condition_statistics(seg.gap, seg.ego_vel, seg.leader_vel),
                               th=th)


def feature_integrands(ego_pos, ego_vel, ego_acc, leader_pos, leader_vel,
                       constants: DriverConstants) -> dict[str, np.ndarray]:
    """Pointwise integrands of all six features on a shared time grid."""
    ego_vel = np.asarray(ego_vel, dtype=float)
    gap = np.asarray(leader_pos, dtype=float) - np.asarray(ego_pos, dtype=float)
    d_c = ego_vel * constants.tau + constants.d_s
    return {
        "a": np.square(ego_acc),
        "ds": np.square(constants.v_d - ego_vel),
        "rs": np.square(np.asarray(leader_vel, dtype=float) - ego_vel),
        "cd": np.square(gap - d_c),
        "sd": np.square(gap - constants.d_s),
        "fd": np.exp(-gap),
    }


def raw_features(ego_pos, ego_vel, ego_acc, leader_pos, leader_vel, dt: float,
                 condition: DrivingCondition, constants: DriverConstants) -> np.ndarray:
    arrays = [np.asarray(a, dtype=float) for a in (ego_pos, ego_vel, ego_acc,
                                                    leader_pos, leader_vel)]
    if len({a.shape for a in arrays}) != 1:
        raise FeatureError(
            "ego and leader samples are not on the same grid: shapes "
            + ", ".join(str(a.shape) for a in arrays))
    integrands = feature_integrands(*arrays, constants)
    # Left Riemann sum on the sampling grid.
    return np.array([np.sum(integrands[f], axis=-1) * dt for f in FEATURE_IDS[condition]])


def compute_features(ego_pos, ego_vel, ego_acc, leader_pos, leader_vel, dt: float,
                     condition: DrivingCondition, constants: DriverConstants
                     ) -> FeatureVector:
    """Raw (unnormalized) feature values of one sampled subsegment."""
    return FeatureVector(condition, raw_features(ego_pos, ego_vel, ego_acc, leader_pos,
                                                 leader_vel, dt, condition, constants))


@dataclass(frozen=True, eq=False)
class NormalizationTable:
    """Per-condition min/max of each active feature."""

    minimum: Mapping[DrivingCondition, np.ndarray]
    maximum: Mapping[DrivingCondition, np.ndarray]

    def __post_init__(self):
        for cond in self.minimum:
            lo = np.asarray(self.minimum[cond], dtype=float)
            hi = np.asarray(self.maximum[cond], dtype=float)
            if lo.shape != hi.shape or lo.shape != (len(FEATURE_IDS[cond]),):
                raise FeatureError(f"bad normalization entry shape for {cond.value}")
            if np.any(hi < lo):
                raise FeatureError(f"normalization max below min for {cond.value}")

    @property
    def conditions(self) -> tuple[DrivingCondition, ...]:
        return tuple(c for c in CONDITIONS if c in self.minimum)

    def bounds(self, condition: DrivingCondition) -> tuple[np.ndarray, np.ndarray]:
        try:
            return (np.asarray(self.minimum[condition], dtype=float),
                    np.asarray(self.maximum[condition], dtype=float))
        except KeyError:
            raise FeatureError(
                f"normalization table has no entry for {condition.value}") from None

    def span(self, condition: DrivingCondition) -> np.ndarray:
        lo, hi = self.bounds(condition)
        return hi - lo

    def scale(self, values: np.ndarray, condition: DrivingCondition) -> np.ndarray:
        """Affine map to the unit range without clamping."""
        lo, hi = self.bounds(condition)
        return (np.asarray(values, dtype=float) - lo) / (hi - lo)

    def to_json(self) -> dict:
        return {c.value: {"features": list(FEATURE_IDS[c]),
                          "min": [float(x) for x in self.minimum[c]],
                          "max": [float(x) for x in self.maximum[c]]}
                for c in self.conditions}

    @classmethod
    def from_json(cls, data: Mapping) -> "NormalizationTable":
        lo, hi = {}, {}
        for key, entry in data.items():
            cond = DrivingCondition(key)
            if tuple(entry["features"]) != FEATURE_IDS[cond]:
                raise FeatureError(f"feature list mismatch for {key}")
            lo[cond] = np.array(entry["min"], dtype=float)
            hi[cond] = np.array(entry["max"], dtype=float)
        return cls(lo, hi)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormalizationTable):
            return NotImplemented
        return self.conditions == other.conditions and all(
            np.array_equal(self.minimum[c], other.minimum[c])
            and np.array_equal(self.maximum[c], other.maximum[c]) for c in self.conditions)


def fit_normalization(groups: Mapping[DrivingCondition, Sequence]) -> NormalizationTable:
    """Min-max statistics per condition.

    ``groups`` maps each condition to raw feature vectors (``FeatureVector`` or
    arrays). A feature whose values are all equal gets ``max = min + 1``.
    """
    lo, hi = {}, {}
    for cond, vectors in groups.items():
        cond = DrivingCondition(cond)
        rows = [v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=float)
                for v in vectors]
        if not rows:
            raise FeatureError(f"no training feature vectors for condition {cond.value}")
        mat = np.vstack(rows)
        mn, mx = mat.min(axis=0), mat.max(axis=0)
        mx = np.where(mx > mn, mx, mn + 1.0)
        lo[cond], hi[cond] = mn, mx
    return NormalizationTable(lo, hi)


def normalize(fv: FeatureVector, table: NormalizationTable) -> FeatureVector:
    """Map raw features into [0, 1] using ``table``, clamping out-of-range values."""
    return FeatureVector(fv.condition, np.clip(table.scale(fv.values, fv.condition), 0.0, 1.0))


def estimate_tau(segments: Iterable[TrajectorySegment], floor: float = 0.5) -> float:
    """Smallest per-sample headway over steady segments, floored at ``floor`` seconds."""
    samples = [np.atleast_1d(thw(s.gap, s.ego_vel)) for s in segments]
    if not samples:
        raise FeatureError(
            "no steady car-following segments to estimate tau from; "
            "pass tau explicitly through DriverConstants")
    return max(float(np.min(np.concatenate(samples))), floor)
