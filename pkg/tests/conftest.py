import numpy as np
import pytest

from horizon_irl.trajectory import LeaderFollowerLog

# Filled by the acceptance tests; printed at the end of the session.
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def make_log(ego_vel, leader_vel, gap0=30.0, rate_hz=10.0, v_d=25.0, ego_acc=None,
             scenario_id="test"):
    """Kinematically consistent log from velocity profiles (trapezoid positions)."""
    ego_vel = np.asarray(ego_vel, dtype=float)
    leader_vel = np.broadcast_to(np.asarray(leader_vel, dtype=float), ego_vel.shape).copy()
    dt = 1.0 / rate_hz
    t = np.arange(ego_vel.size) * dt

    def integrate(v, p0):
        return p0 + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])

    if ego_acc is None:
        ego_acc = np.gradient(ego_vel, dt) if ego_vel.size > 1 else np.zeros(1)
    return LeaderFollowerLog(rate_hz=rate_hz, t=t, leader_pos=integrate(leader_vel, gap0),
                             leader_vel=leader_vel, ego_pos=integrate(ego_vel, 0.0),
                             ego_vel=ego_vel, ego_acc=np.asarray(ego_acc, dtype=float),
                             scenario_id=scenario_id, v_d=v_d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
