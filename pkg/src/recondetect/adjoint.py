"""Input gradients through x -> invert -> reconstruct -> loss tail.

Three modes differentiate the same discrete DDIM chain:

* ``unrolled`` stores every state (memory grows with the step count);
* ``checkpointed`` stores every C-th state and recomputes segments;
* ``adjoint`` keeps only the current state and adjoint, recovering each
  earlier state by solving the DDIM update backwards exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, IntegrationError
from .schedule import (ddim_coeffs, step_backward_exact, step_forward, time_grid,
                       to_data, to_model)

MODES = ("adjoint", "unrolled", "checkpointed")


@dataclass
class AdjointState:
    x: np.ndarray
    a: np.ndarray
    t: float

    def __post_init__(self):
        if np.shape(self.x) != np.shape(self.a):
            raise ValueError("state and adjoint shapes differ")


def adjoint_ode_rhs(s: AdjointState, model, schedule):
    """(dx/dt, da/dt) for the probability-flow ODE and its adjoint.

    d(rhs)/dx = -beta/2 I - beta/2 H with H the score Jacobian, so
    da/dt = -a^T d(rhs)/dx = beta/2 (a + H^T a).
    """
    t = max(s.t, schedule.t_min)
    beta = schedule.beta(t)
    dx = -0.5 * beta * s.x - 0.5 * beta * model.score(s.x, t)
    da = 0.5 * beta * (s.a + model.score_vjp(s.x, t, s.a))
    return dx, da


class StateCounter:
    """Counts state arrays held at once; ``peak`` is the memory telemetry."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def hold(self, k=1):
        self.live += k
        self.peak = max(self.peak, self.live)

    def drop(self, k=1):
        self.live -= k


@dataclass
class GradRequest:
    x: np.ndarray
    tail: Callable
    steps: int
    model: object
    schedule: object
    mode: str = "adjoint"
    stride: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("solver steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown gradient mode {self.mode!r}; expected one of {MODES}")
        if not callable(self.tail):
            raise ConfigError("loss tail is not registered (expected a callable)")


@dataclass
class GradResult:
    loss: np.ndarray
    grad: np.ndarray
    x_rec: np.ndarray
    peak_states: int
    n_recomputed: int = 0


def chain_steps(steps, schedule):
    """The 2N (t, t_next) pairs of invert followed by reconstruct."""
    grid = time_grid(steps, schedule)
    fwd = list(zip(grid[:-1], grid[1:]))
    rev = [(b, a) for a, b in reversed(fwd)]
    return fwd + rev


def _vjp_step(x, t, t_next, g, model, schedule):
    a, b = ddim_coeffs(schedule, t, t_next)
    return a * g + b * model.eps_vjp(x, t, g)


def _check(arr, t, what):
    if not np.all(np.isfinite(arr)):
        raise IntegrationError(f"non-finite {what}", t)


def input_gradient(req: GradRequest) -> GradResult:
    model, schedule = req.model, req.schedule
    pairs = chain_steps(req.steps, schedule)
    counter = StateCounter()
    single = np.ndim(req.x) == 1
    x_in = np.atleast_2d(np.asarray(req.x, dtype=float))
    counter.hold()                                   # the input itself

    u = to_model(x_in)
    counter.hold()
    stored = None
    if req.mode == "unrolled":
        stored = [u]
    elif req.mode == "checkpointed":
        stride = req.stride or max(1, int(round(np.sqrt(len(pairs)))))
        stored = {0: u}
    for k, (t, t_next) in enumerate(pairs):
        u = step_forward(u, t, t_next, model, schedule)
        _check(u, t_next, "state")
        if req.mode == "unrolled":
            stored.append(u)
            counter.hold()
        elif req.mode == "checkpointed" and (k + 1) % stride == 0 and k + 1 < len(pairs):
            stored[k + 1] = u
            counter.hold()

    raw = to_data(u, clamp=False)
    x_rec = np.clip(raw, 0.0, 1.0)
    loss, g_direct, g_rec = req.tail(x_in, x_rec)
    g = np.where((raw > 0.0) & (raw < 1.0), 0.5 * g_rec, 0.0)
    counter.hold()                                   # the adjoint
    n_recomputed = 0

    if req.mode == "unrolled":
        for k in range(len(pairs) - 1, -1, -1):
            t, t_next = pairs[k]
            g = _vjp_step(stored[k], t, t_next, g, model, schedule)
            _check(g, t, "adjoint")
    elif req.mode == "checkpointed":
        k = len(pairs)
        while k > 0:
            start = max(key for key in stored if key < k)
            seg = [stored[start]]
            for j in range(start, k - 1):
                seg.append(step_forward(seg[-1], *pairs[j], model, schedule))
            counter.hold(len(seg) - 1)
            for j in range(k - 1, start - 1, -1):
                t, t_next = pairs[j]
                g = _vjp_step(seg[j - start], t, t_next, g, model, schedule)
                _check(g, t, "adjoint")
            counter.drop(len(seg) - 1)
            k = start
    else:
        g_seed = g
        lost = np.zeros(len(u), dtype=bool)
        for k in range(len(pairs) - 1, -1, -1):
            t, t_next = pairs[k]
            u, ok = step_backward_exact(u, t, t_next, model, schedule, strict=False)
            lost |= ~ok
            g = _vjp_step(u, t, t_next, g, model, schedule)
        # a recovered start that misses the input means the reversal took
        # another branch of a non-injective step; redo those samples by
        # recomputing each state from the input (still constant memory)
        start = to_model(x_in)
        lost |= np.max(np.abs(u - start), axis=-1) > 1e-8 * (1.0 + np.abs(start).max())
        if np.any(lost):
            g = np.array(g, dtype=float)
            g[lost] = _recompute_adjoint(start[lost], g_seed[lost], pairs, model, schedule)
        _check(g, pairs[0][0], "adjoint")
        n_recomputed = int(lost.sum())

    grad = 2.0 * g + g_direct
    loss = np.asarray(loss)
    if single:
        grad, x_rec, loss = grad[0], x_rec[0], loss[0] if loss.ndim else loss
    return GradResult(loss, grad, x_rec, counter.peak, n_recomputed)


def _recompute_adjoint(u0, g, pairs, model, schedule):
    """Backward sweep that re-runs the forward chain from u0 for every state."""
    for k in range(len(pairs) - 1, -1, -1):
        u = u0
        for j in range(k):
            u = step_forward(u, *pairs[j], model, schedule)
        g = _vjp_step(u, *pairs[k], g, model, schedule)
    return g


def squared_error_tail(target):
    """Loss tail 0.5*||x_rec - target||^2 per sample, used by the oracles."""
    target = np.asarray(target, dtype=float)

    def tail(x, x_rec):
        diff = x_rec - target
        return 0.5 * np.sum(diff * diff, axis=-1), np.zeros_like(x), diff
    return tail
