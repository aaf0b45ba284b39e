"""Leader-follower logs, segmentation and quintic trajectory evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Union

import numpy as np

TIME_TOL = 1e-6
REQUIRED_COLUMNS = ("t", "leader_pos", "leader_vel", "ego_pos", "ego_vel")
CSV_COLUMNS = REQUIRED_COLUMNS + ("ego_acc",)


class LogFormatError(ValueError):
    """A CSV row could not be parsed."""


class LogValidationError(ValueError):
    """A parsed log violates a physical or sampling invariant."""


class SegmentationError(ValueError):
    pass


def central_difference(values: np.ndarray, dt: float) -> np.ndarray:
    """Central differences with one-sided differences at both endpoints."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return np.zeros_like(values)
    return np.gradient(values, dt, edge_order=1)


@dataclass(frozen=True, eq=False)
class LeaderFollowerLog:
    rate_hz: float
    t: np.ndarray
    leader_pos: np.ndarray
    leader_vel: np.ndarray
    ego_pos: np.ndarray
    ego_vel: np.ndarray
    ego_acc: np.ndarray
    scenario_id: str = "unnamed"
    v_d: float = 25.0

    def __post_init__(self):
        for name in ("t", "leader_pos", "leader_vel", "ego_pos", "ego_vel", "ego_acc"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    @property
    def gap(self) -> np.ndarray:
        return self.leader_pos - self.ego_pos

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0

    def validate(self) -> "LeaderFollowerLog":
        if self.rate_hz <= 0:
            raise LogValidationError(f"rate_hz must be positive, got {self.rate_hz}")
        n = len(self)
        lengths = {getattr(self, c).size for c in CSV_COLUMNS if c != "t"}
        if lengths != {n}:
            raise LogValidationError("column lengths differ")
        for name in CSV_COLUMNS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise LogValidationError(f"non-finite values in column {name}")
        if n >= 2:
            steps = np.diff(self.t)
            bad = np.flatnonzero(steps <= 0)
            if bad.size:
                raise LogValidationError(
                    f"time not strictly increasing at row {int(bad[0]) + 2}")
            off = np.flatnonzero(np.abs(steps - self.dt) > TIME_TOL)
            if off.size:
                raise LogValidationError(
                    f"time step at row {int(off[0]) + 2} is {steps[off[0]]:.9g} s, "
                    f"expected {self.dt:.9g} s")
        behind = np.flatnonzero(self.leader_pos < self.ego_pos)
        if behind.size:
            raise LogValidationError(
                f"leader behind ego at row {int(behind[0]) + 1}")
        reversing = np.flatnonzero(self.ego_vel < 0)
        if reversing.size:
            raise LogValidationError(
                f"negative ego velocity at row {int(reversing[0]) + 1}")
        return self

    def write_csv(self, dest: Union[str, Path, IO[str]]) -> None:
        rows = np.column_stack([getattr(self, c) for c in CSV_COLUMNS])
        if isinstance(dest, (str, Path)):
            with open(dest, "w", newline="") as fh:
                _write_rows(fh, rows)
        else:
            _write_rows(dest, rows)

    def sidecar(self) -> dict:
        return {"scenario_id": self.scenario_id, "v_d": self.v_d, "rate_hz": self.rate_hz}


def _write_rows(fh: IO[str], rows: np.ndarray) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([repr(float(x)) for x in row])


def load_log(source: Union[str, bytes, IO], rate_hz: float = 10.0, v_d: float = 25.0,
             scenario_id: str = "unnamed") -> LeaderFollowerLog:
    """Parse and validate a leader-follower CSV.

    ``source`` may be a byte string, a text/binary stream, or CSV text.
    A missing ``ego_acc`` column is back-filled from ``ego_vel``.
    """
    if rate_hz <= 0:
        raise LogValidationError(f"rate_hz must be positive, got {rate_hz}")
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data

    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise LogFormatError("empty log: missing header row") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise LogFormatError(f"line 1: missing columns {missing}")
    has_acc = "ego_acc" in header
    wanted = CSV_COLUMNS if has_acc else REQUIRED_COLUMNS
    idx = [header.index(c) for c in wanted]

    rows = []
    for lineno, raw in enumerate(reader, start=2):
        if not raw or all(not cell.strip() for cell in raw):
            continue
        if len(raw) != len(header):
            raise LogFormatError(
                f"line {lineno}: expected {len(header)} fields, got {len(raw)}")
        try:
            rows.append([float(raw[i]) for i in idx])
        except ValueError as exc:
            raise LogFormatError(f"line {lineno}: {exc}") from None
    if not rows:
        raise LogFormatError("log has a header but no data rows")

    arr = np.asarray(rows, dtype=float)
    cols = dict(zip(wanted, arr.T))
    if not has_acc:
        cols["ego_acc"] = central_difference(cols["ego_vel"], 1.0 / rate_hz)
    log = LeaderFollowerLog(rate_hz=float(rate_hz), scenario_id=scenario_id, v_d=float(v_d),
                            **cols)
    return log.validate()


def load_log_file(csv_path: Union[str, Path], sidecar_path: Union[str, Path, None] = None
                  ) -> LeaderFollowerLog:
    """Load ``x.csv`` together with its ``x.json`` metadata sidecar if present."""
    csv_path = Path(csv_path)
    if sidecar_path is None:
        sidecar_path = csv_path.with_suffix(".json")
    meta = {}
    if Path(sidecar_path).exists():
        meta = json.loads(Path(sidecar_path).read_text())
    with open(csv_path, "rb") as fh:
        return load_log(fh, rate_hz=float(meta.get("rate_hz", 10.0)),
                        v_d=float(meta.get("v_d", 25.0)),
                        scenario_id=str(meta.get("scenario_id", csv_path.stem)))


def save_log_file(log: LeaderFollowerLog, csv_path: Union[str, Path]) -> None:
    csv_path = Path(csv_path)
    log.write_csv(csv_path)
    csv_path.with_suffix(".json").write_text(json.dumps(log.sidecar(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    """A fixed-duration window of a log; the unit of weight learning."""

    parent: str
    start_index: int
    duration_s: float
    rate_hz: float
    v_d: float
    t: np.ndarray
    leader_pos: np.ndarray
    leader_vel: np.ndarray
    ego_pos: np.ndarray
    ego_vel: np.ndarray
    ego_acc: np.ndarray

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz

    @property
    def gap(self) -> np.ndarray:
        return self.leader_pos - self.ego_pos

    @property
    def segment_id(self) -> str:
        return f"{self.parent}@{self.start_index}"

    def __len__(self) -> int:
        return int(self.t.size)


def samples_per(duration: float, rate_hz: float) -> int:
    n = duration * rate_hz
    r = round(n)
    return int(r) if abs(n - r) < 1e-9 else int(math.floor(n))


def segment_log(log: LeaderFollowerLog, H: float = 12.0) -> list[TrajectorySegment]:
    """Split a log into consecutive non-overlapping windows of ``H`` seconds."""
    if H <= 0:
        raise SegmentationError(f"segment length must be positive, got {H}")
    n_seg = samples_per(H, log.rate_hz)
    total = samples_per(log.duration, log.rate_hz)
    k = total // n_seg if n_seg else 0
    if k == 0:
        raise SegmentationError(
            f"log {log.scenario_id!r} spans {log.duration:.3f} s, shorter than one "
            f"{H} s segment")
    segments = []
    for i in range(k):
        sl = slice(i * n_seg, (i + 1) * n_seg)
        segments.append(TrajectorySegment(
            parent=log.scenario_id, start_index=i * n_seg, duration_s=float(H),
            rate_hz=log.rate_hz, v_d=log.v_d, t=log.t[sl],
            leader_pos=log.leader_pos[sl], leader_vel=log.leader_vel[sl],
            ego_pos=log.ego_pos[sl], ego_vel=log.ego_vel[sl], ego_acc=log.ego_acc[sl]))
    return segments


@dataclass(frozen=True)
class QuinticCoeffs:
    """r(t) = y0 t^5 + y1 t^4 + y2 t^3 + y3 t^2 + y4 t + y5 on t in [0, N]."""

    y0: float = 0.0
    y1: float = 0.0
    y2: float = 0.0
    y3: float = 0.0
    y4: float = 0.0
    y5: float = 0.0
    duration: float = math.inf

    def with_free(self, y2: float, y1: float, y0: float) -> "QuinticCoeffs":
        return QuinticCoeffs(y0=float(y0), y1=float(y1), y2=float(y2), y3=self.y3,
                             y4=self.y4, y5=self.y5, duration=self.duration)

    @property
    def free(self) -> np.ndarray:
        return np.array([self.y2, self.y1, self.y0])

    def as_array(self) -> np.ndarray:
        return np.array([self.y0, self.y1, self.y2, self.y3, self.y4, self.y5])


def eval_quintic(c: QuinticCoeffs, t):
    """Position, velocity and acceleration of the quintic at ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    pos = ((((c.y0 * t + c.y1) * t + c.y2) * t + c.y3) * t + c.y4) * t + c.y5
    vel = (((5 * c.y0 * t + 4 * c.y1) * t + 3 * c.y2) * t + 2 * c.y3) * t + c.y4
    acc = ((20 * c.y0 * t + 12 * c.y1) * t + 6 * c.y2) * t + 2 * c.y3
    if t.ndim == 0:
        return float(pos), float(vel), float(acc)
    return pos, vel, acc


def coeffs_from_initial_state(pos0: float, vel0: float, acc0: float,
                              duration: float = math.inf) -> QuinticCoeffs:
    # r''(0) = 2*y3, so the observed acceleration is halved.
    return QuinticCoeffs(y5=float(pos0), y4=float(vel0), y3=0.5 * float(acc0),
                         duration=duration)


def free_basis(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sensitivities of (pos, vel, acc) to the free coefficients (y2, y1, y0).

    Each returned array has shape ``t.shape + (3,)``.
    """
    t = np.asarray(t, dtype=float)[..., None]
    p = np.array([3.0, 4.0, 5.0])
    pos = t ** p
    vel = p * t ** (p - 1)
    acc = p * (p - 1) * t ** (p - 2)
    return pos, vel, acc


@dataclass(frozen=True, eq=False)
class Subsegment:
    """One planning window of ``N`` seconds inside a segment."""

    index: int
    horizon: float
    dt: float
    ego_pos: np.ndarray
    ego_vel: np.ndarray
    ego_acc: np.ndarray
    leader_pos: np.ndarray
    leader_vel: np.ndarray

    @property
    def init_state(self) -> tuple[float, float, float]:
        return float(self.ego_pos[0]), float(self.ego_vel[0]), float(self.ego_acc[0])

    @property
    def local_t(self) -> np.ndarray:
        return np.arange(self.ego_pos.size) * self.dt

    def __len__(self) -> int:
        return int(self.ego_pos.size)


def partition_segment(seg: TrajectorySegment, N: float) -> list[Subsegment]:
    """Cut a segment into ``floor(H / N)`` consecutive subsegments of ``N`` seconds."""
    if N <= 0:
        raise SegmentationError(f"horizon must be positive, got {N}")
    if N > seg.duration_s + 1e-9:
        raise SegmentationError(f"horizon {N} s exceeds segment length {seg.duration_s} s")
    n = samples_per(N, seg.rate_hz)
    B = len(seg) // n
    subs = []
    for k in range(B):
        sl = slice(k * n, (k + 1) * n)
        subs.append(Subsegment(
            index=k, horizon=float(N), dt=seg.dt, ego_pos=seg.ego_pos[sl],
            ego_vel=seg.ego_vel[sl], ego_acc=seg.ego_acc[sl],
            leader_pos=seg.leader_pos[sl], leader_vel=seg.leader_vel[sl]))
    return subs


def iter_segments(logs: Iterable[LeaderFollowerLog], H: float) -> list[TrajectorySegment]:
    out = []
    for log in logs:
        out.extend(segment_log(log, H))
    return out
