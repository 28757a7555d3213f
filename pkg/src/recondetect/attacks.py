"""l-infinity attacks on detectors: PGD with random start, a simplified
adaptive-step APGD, and the clipped Gaussian noise baseline.

Attacks are batched, but every sample's randomness comes from its own
stream keyed by (seed, sample id), so results do not depend on batch
composition or order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

VARIANTS = ("PGD", "APGD")
APGD_CHECKPOINTS = (0.22, 0.44, 0.66, 0.88)
APGD_RHO = 0.75
BUDGET_SWEEP = (0.004, 0.008, 0.016, 0.031)
_BUDGET_TOL = 1e-12


@dataclass
class AttackConfig:
    epsilon: float = 0.03
    alpha: float | None = None      # defaults to epsilon / 4
    steps: int = 100
    random_init: bool = True
    seed: int = 0
    variant: str = "PGD"
    grad_mode: str | None = None    # gradient mode for DIRE; None keeps the detector's

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.alpha is None:
            self.alpha = self.epsilon / 4.0
        if self.alpha < 0 or (self.alpha == 0 and self.epsilon > 0):
            raise ConfigError("alpha must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attack variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class AdversarialExample:
    """A batch of perturbed inputs; row i belongs to sample ``ids[i]``."""

    x_orig: np.ndarray
    delta: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    epsilon: float
    variant: str = "PGD"
    steps: int = 0
    success: np.ndarray = None
    loss: np.ndarray = None
    loss_trace: np.ndarray = field(default=None, repr=False)

    @property
    def x_adv(self):
        return np.clip(self.x_orig + self.delta, 0.0, 1.0)

    def check(self):
        """Budget and range invariants; raises ValueError naming the first offender."""
        linf = np.max(np.abs(self.delta), axis=1)
        bad = np.flatnonzero(linf > self.epsilon + _BUDGET_TOL)
        if bad.size:
            raise ValueError(f"sample {self.ids[bad[0]]} exceeds budget: {linf[bad[0]]} > {self.epsilon}")
        xa = self.x_orig + self.delta
        if np.any(xa < 0.0) or np.any(xa > 1.0):
            raise ValueError("adversarial input leaves [0, 1]")
        return True

    def records(self):
        linf = np.max(np.abs(self.delta), axis=1)
        l2 = np.linalg.norm(self.delta, axis=1)
        out = []
        for i in range(len(self.ids)):
            out.append({"id": int(self.ids[i]), "label": int(self.y[i]), "epsilon": self.epsilon,
                        "steps": self.steps, "variant": self.variant,
                        "success": None if self.success is None else bool(self.success[i]),
                        "final_loss": None if self.loss is None else float(self.loss[i]),
                        "linf": float(linf[i]), "l2": float(l2[i])})
        return out


def _ids(x, ids):
    return np.arange(len(x)) if ids is None else np.asarray(ids)


def _project(x, delta, eps):
    delta = np.clip(delta, -eps, eps)
    return np.clip(x + delta, 0.0, 1.0) - x


def _init_delta(x, ids, cfg):
    if not cfg.random_init or cfg.epsilon == 0:
        return np.zeros_like(x)
    rows = [np.random.default_rng([cfg.seed, int(i), 1]).uniform(-cfg.epsilon, cfg.epsilon, x.shape[1])
            for i in ids]
    return _project(x, np.array(rows), cfg.epsilon)


def attack_objective(det, x, y, grad_mode=None):
    """Per-sample loss and its input gradient (BCE, or the AEROBLADE margin)."""
    return det.loss_and_grad(x, y, grad_mode)


def _finish(det, x, y, ids, best_delta, best_loss, trace, cfg):
    x_adv = np.clip(x + best_delta, 0.0, 1.0)
    pred, _ = det.predict(x_adv)
    return AdversarialExample(x, best_delta, y, ids, cfg.epsilon, cfg.variant, cfg.steps,
                              pred != y, best_loss, np.array(trace))


def pgd(det, x, y, cfg: AttackConfig, ids=None) -> AdversarialExample:
    """Projected sign-gradient ascent; returns each sample's best-loss iterate."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=int)
    ids = _ids(x, ids)
    delta = _init_delta(x, ids, cfg)
    best_delta, best_loss = delta.copy(), np.full(len(x), -np.inf)
    trace = []
    for _ in range(cfg.steps):
        loss, grad = attack_objective(det, x + delta, y, cfg.grad_mode)
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta[better] = delta[better]
        trace.append(best_loss.copy())
        delta = _project(x, delta + cfg.alpha * np.sign(grad), cfg.epsilon)
    loss = det.loss(x + delta, y)
    better = loss > best_loss
    best_loss = np.where(better, loss, best_loss)
    best_delta[better] = delta[better]
    trace.append(best_loss.copy())
    return _finish(det, x, y, ids, best_delta, best_loss, trace, cfg)


def apgd_checkpoints(steps):
    return sorted({min(steps, max(1, math.ceil(p * steps))) for p in APGD_CHECKPOINTS})


def apgd(det, x, y, cfg: AttackConfig, ids=None) -> AdversarialExample:
    """Adaptive-step PGD.

    Starts at alpha = 2*epsilon.  At fixed fractions of the step budget, a
    sample whose loss improved on fewer than 75% of the steps since the last
    checkpoint halves its step and restarts from its best iterate.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=int)
    ids = _ids(x, ids)
    n = len(x)
    delta = _init_delta(x, ids, cfg)
    alpha = np.full(n, 2.0 * cfg.epsilon)
    checkpoints = set(apgd_checkpoints(cfg.steps))
    best_delta, best_loss = delta.copy(), np.full(n, -np.inf)
    prev_loss = np.full(n, np.inf)
    improved = np.zeros(n)
    since = 0
    trace = []
    for k in range(cfg.steps):
        loss, grad = attack_objective(det, x + delta, y, cfg.grad_mode)
        if k > 0:
            improved += loss > prev_loss
            since += 1
        prev_loss = loss
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta[better] = delta[better]
        trace.append(best_loss.copy())
        if k in checkpoints and since > 0:
            shrink = improved / since < APGD_RHO
            alpha = np.where(shrink, 0.5 * alpha, alpha)
            delta[shrink] = best_delta[shrink]
            grad[shrink] = 0.0
            prev_loss = np.where(shrink, best_loss, prev_loss)
            improved[:] = 0
            since = 0
            if np.any(shrink):
                # restarted samples take their next step from the best iterate
                _, g_best = attack_objective(det, x[shrink] + delta[shrink], y[shrink], cfg.grad_mode)
                grad[shrink] = g_best
        delta = _project(x, delta + alpha[:, None] * np.sign(grad), cfg.epsilon)
    loss = det.loss(x + delta, y)
    better = loss > best_loss
    best_loss = np.where(better, loss, best_loss)
    best_delta[better] = delta[better]
    trace.append(best_loss.copy())
    return _finish(det, x, y, ids, best_delta, best_loss, trace, cfg)


def run_attack(det, x, y, cfg: AttackConfig, ids=None) -> AdversarialExample:
    return (apgd if cfg.variant == "APGD" else pgd)(det, x, y, cfg, ids)


def random_perturb(x, epsilon, seed, ids=None, y=None) -> AdversarialExample:
    """delta = clip(N(0, (epsilon/2)^2 I), -epsilon, epsilon), then range-clamped."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not (0.0 <= epsilon <= 1.0):
        raise ConfigError(f"epsilon {epsilon} outside [0, 1]")
    ids = _ids(x, ids)
    rows = [np.random.default_rng([seed, int(i), 2]).normal(0.0, epsilon / 2.0, x.shape[1]) for i in ids]
    delta = _project(x, np.array(rows).reshape(x.shape), epsilon)
    y = np.zeros(len(x), int) if y is None else np.asarray(y, dtype=int)
    return AdversarialExample(x, delta, y, ids, float(epsilon), "random", 0)
