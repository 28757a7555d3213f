"""Diagnostics: relative feature perturbation rho, its regime hierarchy,
transfer matrices and the random-input collapse probe."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, random_perturb, run_attack
from .detectors import FAKE, REAL, evaluate
from .errors import ConfigError, DomainError

REGIMES = ("IID-attack", "OOD-transfer", "random-noise")
TRANSFER_REGIMES = ("white-box", "cross-generator", "cross-method", "cross-both")


def rho(det, x, x_adv):
    """||phi(x_adv) - phi(x)|| / ||phi(x)|| per sample; NaN where phi(x) = 0."""
    f0 = det.rho_features(x)
    f1 = det.rho_features(x_adv)
    num = np.linalg.norm(f1 - f0, axis=1)
    den = np.linalg.norm(f0, axis=1)
    out = np.full(len(f0), np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class RhoStats:
    values: np.ndarray
    labels: np.ndarray
    regime: str
    ids: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if np.any(self.values[np.isfinite(self.values)] < 0):
            raise DomainError("rho values must be non-negative")

    @property
    def n_undefined(self):
        return int(np.sum(~np.isfinite(self.values)))

    def _mean(self, mask=None):
        v = self.values if mask is None else self.values[mask]
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else float("nan")

    @property
    def mean(self):
        return self._mean()

    @property
    def mean_real(self):
        return self._mean(self.labels == REAL)

    @property
    def mean_fake(self):
        return self._mean(self.labels == FAKE)

    def records(self):
        ids = np.arange(len(self.values)) if self.ids is None else self.ids
        return [{"id": int(i), "regime": self.regime, "class": int(c),
                 "rho": float(v) if np.isfinite(v) else None}
                for i, c, v in zip(ids, self.labels, self.values)]


def rho_hierarchy(det, x, y, ids=None, ood_surrogate=None, attack: AttackConfig | None = None, seed=0):
    """rho under a white-box attack, a transferred attack crafted on
    ``ood_surrogate`` and random noise, all at the same epsilon."""
    attack = attack or AttackConfig(epsilon=0.031, steps=50)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=int)
    out = {}
    iid = run_attack(det, x, y, attack, ids)
    out["IID-attack"] = RhoStats(rho(det, x, iid.x_adv), y, "IID-attack", ids)
    if ood_surrogate is not None:
        ood = run_attack(ood_surrogate, x, y, attack, ids)
        out["OOD-transfer"] = RhoStats(rho(det, x, ood.x_adv), y, "OOD-transfer", ids)
    noise = random_perturb(x, attack.epsilon, seed, ids)
    out["random-noise"] = RhoStats(rho(det, x, noise.x_adv), y, "random-noise", ids)
    return out


def hierarchy_holds(stats):
    m = [stats[r].mean for r in REGIMES]
    return bool(m[0] >= m[1] >= m[2])


def regime_of(src, tgt):
    """Transfer regime for (kind, generator) surrogate/target keys."""
    same_kind, same_gen = src[0] == tgt[0], src[1] == tgt[1]
    if same_kind and same_gen:
        return "white-box"
    if same_kind:
        return "cross-generator"
    if same_gen:
        return "cross-method"
    return "cross-both"


@dataclass
class TransferMatrix:
    rows: list = field(default_factory=list)

    def cell(self, src, tgt):
        for r in self.rows:
            if r["surrogate"] == src and r["target"] == tgt:
                return r["robust_acc"]
        raise KeyError((src, tgt))

    def select(self, regime):
        return [r for r in self.rows if r["regime"] == regime]

    def cross_both_summary(self):
        """(surrogate kind, target kind) -> (mean, std) over generator pairs."""
        groups = {}
        for r in self.select("cross-both"):
            groups.setdefault((r["surrogate"][0], r["target"][0]), []).append(r["robust_acc"])
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in sorted(groups.items())}

    def records(self):
        return [{"surrogate": "%s@%s" % r["surrogate"], "target": "%s@%s" % r["target"],
                 "regime": r["regime"], "robust_acc": r["robust_acc"], "clean_acc": r["clean_acc"]}
                for r in self.rows]


def transfer_eval(surrogates, targets, datasets, attack: AttackConfig):
    """Robust accuracy of every target on adversarial sets crafted on every surrogate.

    ``surrogates``/``targets`` map (kind, generator id) to detectors and
    ``datasets[g]`` is the evaluation set for targets bound to generator g.
    Each (surrogate, dataset) adversarial set is crafted once and reused for
    every target that shares the dataset.
    """
    crafted = {}
    rows = []
    for tkey, tdet in targets.items():
        data = datasets[tkey[1]]
        clean = evaluate(tdet, data)["accuracy"]
        for skey, sdet in surrogates.items():
            if sdet.backbone.schedule is not None and data.x.shape[1] != _dim(sdet):
                raise ConfigError(f"surrogate {skey} and target {tkey} disagree on data dimension")
            ck = (skey, tkey[1])
            if ck not in crafted:
                crafted[ck] = run_attack(sdet, data.x, data.y, attack, data.ids)
            adv = crafted[ck]
            acc = evaluate(tdet, (adv.x_adv, data.y))["accuracy"]
            rows.append({"surrogate": skey, "target": tkey, "regime": regime_of(skey, tkey),
                         "robust_acc": acc, "clean_acc": clean})
    return TransferMatrix(rows), crafted


def _dim(det):
    bb = det.backbone
    if bb.ae is not None:
        return bb.ae.dim
    return bb.model.dim


def collapse_probe(det, n, seed):
    """Fraction of uniform-noise inputs on [0,1]^d labelled Real."""
    if n < 1:
        raise ConfigError("probe size must be positive")
    x = np.random.default_rng([seed, 6]).uniform(0.0, 1.0, (n, _dim(det)))
    pred, _ = det.predict(x)
    return float(np.mean(pred == REAL))
