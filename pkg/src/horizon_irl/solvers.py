"""Batched damped Newton iteration for small smooth convex problems."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ValueFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
DerivFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class NewtonResult:
    x: np.ndarray
    fun: np.ndarray
    converged: np.ndarray
    iterations: int


def _solve_psd(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        # singular Hessian (e.g. all-zero weights): minimum-norm step per member
        return np.stack([np.linalg.lstsq(h, v, rcond=None)[0] for h, v in zip(H, g)])


def newton_minimize(value: ValueFn, derivs: DerivFn, x0: np.ndarray, *,
                    max_iter: int = 50, tol: float = 1e-13,
                    armijo: float = 1e-4, flat_tol: float = 0.0) -> NewtonResult:
    """Minimize a batch of independent convex objectives.

    ``value(x, idx)`` maps points ``(b, m)`` of batch members ``idx`` to ``(b,)``;
    ``derivs(x, idx)`` returns the gradient ``(b, m)`` and Hessian ``(b, m, m)``.
    Each batch member stops once its Newton decrement falls below
    ``tol * max(1, |f|)``. A member whose full step fails the Armijo test while
    its decrement is under ``flat_tol * max(1, |f|)`` also stops; that saves a
    long backtracking search that can only end in rounding noise.
    """
    x = np.array(x0, dtype=float, copy=True)
    f = value(x, np.arange(x.shape[0]))
    active = np.ones(x.shape[0], dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            it -= 1
            break
        g, H = derivs(x[idx], idx)
        step = _solve_psd(H, g)
        step[~np.isfinite(step)] = 0.0
        decrement = np.einsum("bi,bi->b", g, step)
        done = ~np.isfinite(decrement) | (decrement <= 2 * tol * np.maximum(1.0, np.abs(f[idx])))
        if np.any(done):
            active[idx[done]] = False
        keep = ~done
        if not np.any(keep):
            continue
        idx, g, step, decrement = idx[keep], g[keep], step[keep], decrement[keep]
        s = np.ones(idx.size)
        x_new = x[idx] - step
        f_new = value(x_new, idx)
        bad = ~(f_new <= f[idx] - armijo * s * decrement)
        flat = bad & (decrement <= flat_tol * np.maximum(1.0, np.abs(f[idx])))
        active[idx[flat]] = False
        bad &= ~flat
        for _ in range(40):
            if not np.any(bad):
                break
            # minimizer of the quadratic through f(0), f'(0) and f(s), kept in [0.1 s, 0.5 s]
            rise = f_new[bad] - f[idx[bad]] + s[bad] * decrement[bad]
            with np.errstate(divide="ignore", invalid="ignore"):
                s_q = decrement[bad] * s[bad] ** 2 / (2.0 * rise)
            s_q = np.where(np.isfinite(s_q), s_q, 0.1 * s[bad])
            s[bad] = np.clip(s_q, 0.1 * s[bad], 0.5 * s[bad])
            x_new[bad] = x[idx[bad]] - s[bad, None] * step[bad]
            f_new[bad] = value(x_new[bad], idx[bad])
            bad = ~(f_new <= f[idx] - armijo * s * decrement)
        # a failed line search means no further progress at float precision
        active[idx[bad]] = False
        improve = ~bad & ~flat
        x[idx[improve]] = x_new[improve]
        f[idx[improve]] = f_new[improve]
    return NewtonResult(x=x, fun=f, converged=~active, iterations=it)
