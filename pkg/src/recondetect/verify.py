"""Model-free numerical oracles and invariant scans over a workspace.

Each check returns a ``Check``; ``run_all`` gathers them so the command
line can report every failure instead of stopping at the first.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import persist
from .adjoint import GradRequest, input_gradient
from .errors import TestbedError
from .nn import bce_with_logits
from .schedule import DiffusionSchedule, TrajectoryState, ode_rhs
from .scores import AnalyticScore, GaussianMixture, gmm_log_density, gmm_score


@dataclass
class Check:
    module: str
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.module}: {self.name} {self.detail}".rstrip()


def random_mixture(rng, dim, k=3):
    w = rng.uniform(0.5, 1.5, k)
    return GaussianMixture(w / w.sum(), rng.uniform(-0.5, 0.5, (k, dim)), rng.uniform(0.02, 0.2, k))


def dire_tail(w, b, y):
    """BCE of a linear classifier on |x - x_rec|; smooth wherever residuals are nonzero."""
    def tail(x, x_rec):
        diff = x - x_rec
        loss, dlogit = bce_with_logits(np.abs(diff) @ w + b, y)
        g = dlogit[..., None] * w * np.sign(diff)
        return loss, g, -g
    return tail


def _loss(x, tail, steps, model, schedule):
    return float(np.sum(input_gradient(GradRequest(x, tail, steps, model, schedule, "unrolled")).loss))


def gradient_probe(rng, steps=20, dim=6, h=1e-6, schedule=None):
    """(FD rel. error of the adjoint gradient, adjoint-vs-unrolled rel. error)."""
    schedule = schedule or DiffusionSchedule()
    model = AnalyticScore(random_mixture(rng, dim), schedule)
    x = rng.uniform(0.2, 0.8, (1, dim))
    tail = dire_tail(rng.normal(0, 1, dim), rng.normal(), np.array([float(rng.integers(2))]))
    adj = input_gradient(GradRequest(x, tail, steps, model, schedule, "adjoint")).grad
    unr = input_gradient(GradRequest(x, tail, steps, model, schedule, "unrolled")).grad
    fd = np.zeros_like(x)
    for i in range(dim):
        e = np.zeros_like(x)
        e[0, i] = h
        fd[0, i] = (_loss(x + e, tail, steps, model, schedule) - _loss(x - e, tail, steps, model, schedule)) / (2 * h)
    scale = np.linalg.norm(fd)
    return np.linalg.norm(adj - fd) / scale, np.linalg.norm(adj - unr) / np.linalg.norm(unr)


def check_gradients(n=10, steps=20, seed=0):
    rng = np.random.default_rng([seed, 7])
    fd_err, pair_err = zip(*(gradient_probe(rng, steps) for _ in range(n)))
    return [Check("adjoint-grad", "adjoint vs finite differences", max(fd_err) < 1e-3, f"max rel err {max(fd_err):.2e}"),
            Check("adjoint-grad", "adjoint vs unrolled", max(pair_err) < 1e-5, f"max rel err {max(pair_err):.2e}")]


def check_gmm_score(n=10, seed=0, h=1e-5):
    rng = np.random.default_rng([seed, 8])
    s = DiffusionSchedule()
    worst = 0.0
    for _ in range(n):
        mix = random_mixture(rng, 4)
        x, t = rng.normal(0, 0.7, 4), float(rng.uniform(0.05, 0.95))
        fd = np.array([(gmm_log_density(mix, x + h * e, t, s) - gmm_log_density(mix, x - h * e, t, s)) / (2 * h)
                       for e in np.eye(4)])
        ex = gmm_score(mix, x, t, s)
        worst = max(worst, np.linalg.norm(fd - ex) / np.linalg.norm(ex))
    return [Check("score-models", "GMM score vs FD of log-density", worst < 1e-6, f"max rel err {worst:.2e}")]


def check_stationarity(seed=0):
    """Standard-normal data is a fixed point of the probability-flow ODE."""
    s = DiffusionSchedule()
    model = AnalyticScore(GaussianMixture([1.0], np.zeros((1, 5)), [1.0]), s)
    rng = np.random.default_rng([seed, 9])
    worst = max(np.max(np.abs(ode_rhs(TrajectoryState(rng.normal(size=5), t), model, s)))
                for t in (0.01, 0.3, 0.7, 1.0))
    return [Check("sde-core", "single-Gaussian stationarity", worst < 1e-12, f"max |rhs| {worst:.1e}")]


def oracle_checks(seed=0, n_grad=10):
    return check_gradients(n_grad, seed=seed) + check_gmm_score(seed=seed) + check_stationarity(seed)


def scan_workspace(root):
    """Load every persisted artifact under ``root`` and check its invariants."""
    root = Path(root)
    checks = []
    for p in sorted(root.glob("**/*.json")):
        if p.name in ("config.json",) or p.parent.name == "records":
            continue
        try:
            persist.load_checkpoint(p)
            checks.append(Check(_module_of(p), f"checkpoint {p.relative_to(root)}", True))
        except TestbedError as exc:
            checks.append(Check(_module_of(p), f"checkpoint {p.relative_to(root)}", False, str(exc)))
    for p in sorted(root.glob("data/*.npz")):
        if p.name == "real.npz":
            continue
        ds = persist.load_dataset(p)
        ok = persist.dataset_balanced(ds) and all(persist.dataset_balanced(ds.subset(s)) for s in set(ds.split))
        ok = ok and bool(np.all((ds.x >= 0) & (ds.x <= 1)))
        checks.append(Check("harness-cli", f"dataset {p.name} balanced and in range", ok))
    for p in sorted(root.glob("adv/**/*.npz")):
        adv = persist.load_adversarial(p)
        try:
            adv.check()
            checks.append(Check("attacks", f"adversarial set {p.relative_to(root)}", True))
        except ValueError as exc:
            checks.append(Check("attacks", f"adversarial set {p.relative_to(root)}", False, str(exc)))
    cfg_path = root / "config.json"
    if cfg_path.exists():
        want = persist.config_hash(json.loads(cfg_path.read_text()))
        for p in sorted(root.glob("results/*.csv")):
            try:
                got, _ = persist.read_csv(p)
                checks.append(Check("harness-cli", f"table {p.name} hash", got == want))
            except TestbedError as exc:
                checks.append(Check("harness-cli", f"table {p.name}", False, str(exc)))
    return checks


_MODULE_DIRS = {"models": "score-models", "autoencoders": "autoencoder", "detectors": "detectors",
                "hardened": "defenses"}


def _module_of(path):
    return _MODULE_DIRS.get(Path(path).parent.name, "persist")


def run_all(root=None, seed=0, n_grad=10):
    checks = oracle_checks(seed, n_grad)
    if root is not None and Path(root).exists():
        checks += scan_workspace(root)
    return checks
