"""Fixed-budget ODE solvers over torch tensors.

``dopri5`` is an adaptive Dormand-Prince 5(4) pair whose number of accepted
steps is capped: when the controller would need more steps than the budget
allows, step sizes are floored so the endpoint is always reached, and the
result carries an accuracy flag if any forced step missed tolerance. ``rk4``
and ``euler`` take exactly ``budget`` uniform steps. All solvers integrate in
either time direction and over arbitrarily shaped (batched) states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import IntegrationError

# Dormand-Prince 5(4) tableau.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


@dataclass
class SolverConfig:
    method: str = "dopri5"
    budget: int = 20
    rtol: float = 1e-5
    atol: float = 1e-8

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("solver budget must be >= 1")
        if self.method not in ("dopri5", "rk4", "euler"):
            raise ValueError(f"unknown solver method '{self.method}'")


@dataclass
class SolveResult:
    y: torch.Tensor
    accuracy_flag: bool = False
    n_steps: int = 0
    n_evals: int = 0


RHS = Callable[[float, torch.Tensor], torch.Tensor]


def solve_ode(f: RHS, y0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig) -> SolveResult:
    """Integrate dy/dt = f(t, y) from t0 to t1 (t1 < t0 solves backward)."""
    if t0 == t1:
        return SolveResult(y0.clone())
    if cfg.method == "euler":
        return _fixed_step(f, y0, t0, t1, cfg.budget, order=1)
    if cfg.method == "rk4":
        return _fixed_step(f, y0, t0, t1, cfg.budget, order=4)
    return _dopri5(f, y0, t0, t1, cfg)


def _check_finite(y: torch.Tensor, t: float) -> None:
    if not torch.isfinite(y).all():
        raise IntegrationError(f"non-finite state at t={t:.6g}")


def _fixed_step(f: RHS, y0: torch.Tensor, t0: float, t1: float, n_steps: int, order: int) -> SolveResult:
    h = (t1 - t0) / n_steps
    y = y0.clone()
    evals = 0
    for k in range(n_steps):
        # endpoints from the step index, so the final stage lands on t1 exactly
        t = t0 + k * h
        t_next = t1 if k == n_steps - 1 else t0 + (k + 1) * h
        if order == 1:
            y = y + h * f(t, y)
            evals += 1
        else:
            k1 = f(t, y)
            k2 = f(t + h / 2, y + h / 2 * k1)
            k3 = f(t + h / 2, y + h / 2 * k2)
            k4 = f(t_next, y + h * k3)
            y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            evals += 4
        _check_finite(y, t_next)
    return SolveResult(y, False, n_steps, evals)


def _error_ratio(err: torch.Tensor, y0: torch.Tensor, y1: torch.Tensor, rtol: float, atol: float) -> float:
    scale = atol + rtol * torch.maximum(y0.abs(), y1.abs())
    r = (err / scale).pow(2).mean().sqrt()
    return float(r)


def _dopri5(f: RHS, y0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig) -> SolveResult:
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = t0
    y = y0.clone()
    h = span / cfg.budget  # neutral initial step; the controller adapts from here
    accepted = 0
    evals = 0
    flagged = False
    max_trials = 10 * cfg.budget + 20
    trials = 0
    while direction * (t1 - t) > 1e-12 * span:
        trials += 1
        if trials > max_trials:
            raise IntegrationError(f"step-size control failed to converge near t={t:.6g}")
        remaining = abs(t1 - t)
        steps_left = cfg.budget - accepted
        if steps_left <= 0:
            raise IntegrationError("accepted-step budget exhausted before reaching the endpoint")
        h_floor = remaining / steps_left  # finishing within budget needs at least this
        h_try = min(max(h, h_floor), remaining)
        forced = h_try <= h_floor * (1 + 1e-12)

        ks = []
        for i in range(7):
            yi = y
            for aij, kj in zip(_DP_A[i], ks):
                if aij != 0.0:
                    yi = yi + (direction * h_try * aij) * kj
            ks.append(f(t + direction * h_try * _DP_C[i], yi))
            evals += 1
        y5 = y
        err = torch.zeros_like(y)
        for b5, b4, k in zip(_DP_B5, _DP_B4, ks):
            if b5 != 0.0:
                y5 = y5 + (direction * h_try * b5) * k
            if b5 != b4:
                err = err + (direction * h_try * (b5 - b4)) * k
        ratio = _error_ratio(err, y, y5, cfg.rtol, cfg.atol)

        if ratio <= 1.0 or forced:
            if forced and ratio > 1.0:
                flagged = True
            t = t + direction * h_try
            y = y5
            _check_finite(y, t)
            accepted += 1
        # standard fifth-order controller with clamped growth
        factor = 0.9 * (max(ratio, 1e-10)) ** (-0.2)
        h = h_try * min(5.0, max(0.2, factor))
    return SolveResult(y, flagged, accepted, evals)


def solve_with_trajectory(
    f: RHS, y0: torch.Tensor, ts: list[float], cfg: SolverConfig
) -> list[torch.Tensor]:
    """States at the requested times, chaining solves between checkpoints."""
    out = []
    y = y0
    t_prev = ts[0]
    out.append(y0.clone())
    for t in ts[1:]:
        y = solve_ode(f, y, t_prev, t, cfg).y
        out.append(y.clone())
        t_prev = t
    return out
