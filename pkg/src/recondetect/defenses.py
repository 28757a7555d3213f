"""Reverse-SDE purification and the two adversarial-training recipes.

* DIRE: residual features are precomputed once and the inner maximisation
  runs in feature space under a calibrated budget ``eps_feat``.
* LaRE2: the inner maximisation runs on pixels; the error map is recomputed
  at every inner step but treated as a constant (stop-gradient).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import BUDGET_SWEEP, AttackConfig, run_attack
from .detectors import (Classifier, ClassifierTrainConfig, Detector, LabeledDataset,
                        evaluate, fit_classifier)
from .errors import ConfigError, IntegrationError, TrainingError
from .schedule import alpha_bar, to_data, to_model

PURIFY_RATIOS = (0.01, 0.02, 0.03, 0.05, 0.1)
AT_STEPS = (1, 2, 4, 8)
AT_VARIANTS = ("DIRE", "LaRE2")


@dataclass
class PurifyConfig:
    t_star_ratio: float = 0.05
    steps: int | None = None        # None: max(10, ratio * T)
    seed: int = 0
    source: str = ""

    def __post_init__(self):
        if not (0.0 < self.t_star_ratio <= 0.5):
            raise ConfigError(f"t*/T ratio {self.t_star_ratio} outside (0, 0.5]")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("purification steps must be >= 1")

    def n_steps(self, schedule):
        return self.steps or max(10, int(round(self.t_star_ratio * schedule.T)))


def purify(x_adv, cfg: PurifyConfig, model, schedule, ids=None):
    """Diffuse to t* with fresh noise, then integrate the reverse SDE
    dx = [f - g^2 score] dt + g dw back to t_min by Euler-Maruyama."""
    x = np.atleast_2d(np.asarray(x_adv, dtype=float))
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    if len(x) == 0:
        return x.copy()
    t_star = max(cfg.t_star_ratio, schedule.t_min)
    rngs = [np.random.default_rng([cfg.seed, int(i), 3]) for i in ids]
    draw = lambda: np.array([r.standard_normal(x.shape[1]) for r in rngs])

    ab = alpha_bar(schedule, t_star)
    u = np.sqrt(ab) * to_model(x) + np.sqrt(1.0 - ab) * draw()
    ts = np.linspace(t_star, schedule.t_min, cfg.n_steps(schedule) + 1)
    for t, t_next in zip(ts[:-1], ts[1:]):
        h = t - t_next
        beta = schedule.beta(t)
        drift = -0.5 * beta * u - beta * model.score(u, t)
        u = u - drift * h + np.sqrt(beta * h) * draw()
        if not np.all(np.isfinite(u)):
            raise IntegrationError("non-finite purification state", t_next)
    return to_data(u)


def purification_sweep(x, y, ratios, det: Detector, model, schedule, seed=0, ids=None):
    """Detector accuracy after purification at each t*/T ratio."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if len(x) == 0:
        raise ConfigError("cannot purify an empty dataset")
    rows = []
    for ratio in ratios:
        xp = purify(x, PurifyConfig(ratio, seed=seed, source=det.backbone.generator_id), model, schedule, ids)
        m = evaluate(det, (xp, y))
        rows.append({"ratio": ratio, **m})
    return rows


# -- adversarial training -----------------------------------------------------------

@dataclass
class ATConfig:
    variant: str = "DIRE"
    epsilon: float = 0.031
    eps_feat: float | None = None   # DIRE only; calibrated when None
    steps: int = 4                  # inner PGD steps K
    train: ClassifierTrainConfig = field(default_factory=lambda: ClassifierTrainConfig(epochs=30))
    seed: int = 0

    def __post_init__(self):
        if self.variant not in AT_VARIANTS:
            raise ConfigError(f"adversarial training supports {AT_VARIANTS}, got {self.variant!r}")
        if self.steps < 0:
            raise ConfigError("inner steps K must be >= 0")
        if self.variant == "DIRE" and self.eps_feat is not None and self.eps_feat <= 0:
            raise ConfigError("eps_feat must be positive")

    @property
    def alpha(self):
        return self.epsilon / 4.0


def calibrate_eps_feat(det: Detector, x, epsilon, seed=0):
    """Median over samples of ||phi(x + delta_rand) - phi(x)||_inf, delta_rand ~ U(-eps, eps)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = np.random.default_rng([seed, 4])
    xr = np.clip(x + rng.uniform(-epsilon, epsilon, x.shape), 0.0, 1.0)
    f0, f1 = det.features(x), det.features(xr)
    return float(np.median(np.max(np.abs(f1 - f0), axis=1)))


def _feature_pgd(clf, feats, y, eps, steps, rng):
    """PGD on the classifier input itself (DIRE residuals stay non-negative)."""
    if steps == 0 or eps == 0:
        return feats
    alpha = eps / 4.0
    delta = rng.uniform(-eps, eps, feats.shape)
    for _ in range(steps):
        f = np.maximum(feats + delta, 0.0)
        _, g, _ = clf.loss_grad(f, y)
        delta = np.clip(delta + alpha * np.sign(g), -eps, eps)
    return np.maximum(feats + delta, 0.0)


def _lare_pixel_pgd(det, clf, x, y, eps, steps, rng):
    """Pixel PGD against f(x + delta, sg[e(x + delta)])."""
    d = x.shape[1]
    if steps == 0 or eps == 0:
        return det.features(x)
    alpha = eps / 4.0
    delta = np.clip(x + rng.uniform(-eps, eps, x.shape), 0.0, 1.0) - x
    for _ in range(steps):
        feats = det.features(x + delta)          # error map recomputed, then held fixed
        _, g, _ = clf.loss_grad(feats, y)
        delta = np.clip(delta + alpha * np.sign(g[:, :d]), -eps, eps)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return det.features(x + delta)


def adv_train(det: Detector, dataset: LabeledDataset, cfg: ATConfig):
    """Adversarially trained copy of ``det``; returns (detector, loss curve)."""
    if det.kind != cfg.variant:
        raise ConfigError(f"{cfg.variant} adversarial training cannot harden a {det.kind} detector")
    train = dataset.subset("train")
    if len(np.unique(train.y)) < 2:
        raise ConfigError("training split must contain both classes")
    hard = Detector(det.kind, det.backbone, det.config, threshold=det.threshold)
    rng = np.random.default_rng([cfg.seed, 5])
    clean = hard.features(train.x)
    clf = Classifier(clean.shape[1], det.config.hidden, seed=cfg.train.seed)
    clf.fit_scaler(clean)

    if cfg.variant == "DIRE":
        eps_feat = cfg.eps_feat
        if eps_feat is None:
            eps_feat = calibrate_eps_feat(det, train.x, cfg.epsilon, cfg.seed)
        if eps_feat <= 0:
            raise ConfigError("calibrated eps_feat is zero; features do not react to the pixel budget")

        def perturb(idx, fb, yb, c):
            return _feature_pgd(c, fb, yb, eps_feat, cfg.steps, rng)
    else:
        eps_feat = None

        def perturb(idx, fb, yb, c):
            return _lare_pixel_pgd(hard, c, train.x[idx], yb, cfg.epsilon, cfg.steps, rng)

    curve = fit_classifier(clf, clean, train.y, cfg.train, perturb=perturb)
    if not np.all(np.isfinite(curve)):
        raise TrainingError("adversarial training diverged")
    hard.classifier = clf
    return hard, {"loss": curve, "eps_feat": eps_feat}


def evaluate_defense(det: Detector, dataset: LabeledDataset, eval_attack: AttackConfig | None = None,
                     n_per_class=None):
    """Clean accuracy on the benign test split and robust accuracy under the attack."""
    test = dataset.subset("test") if isinstance(dataset, LabeledDataset) and "test" in set(dataset.split) \
        else dataset
    if len(test) == 0:
        raise ConfigError("cannot evaluate a defense on an empty split")
    if n_per_class is not None:
        test = test.take(n_per_class)
    eval_attack = eval_attack or AttackConfig(epsilon=max(BUDGET_SWEEP), steps=100, variant="APGD")
    clean = evaluate(det, test)
    adv = run_attack(det, test.x, test.y, eval_attack, test.ids)
    robust = evaluate(det, (adv.x_adv, test.y))
    return {"clean_acc": clean["accuracy"], "robust_acc": robust["accuracy"],
            "robust_real_recall": robust["real_recall"], "robust_fake_recall": robust["fake_recall"]}


def at_grid_search(det: Detector, dataset: LabeledDataset, variant=None, steps_grid=AT_STEPS,
                   eps_grid=BUDGET_SWEEP, val_attack: AttackConfig | None = None, val_per_class=100,
                   train: ClassifierTrainConfig | None = None, seed=0):
    """Train over the (K, eps) grid and keep the checkpoint with the best
    validation robust accuracy; ties go to the lowest eps, then lowest K."""
    variant = variant or det.kind
    val = dataset.subset("val").take(val_per_class, seed=seed)
    val_attack = val_attack or AttackConfig(epsilon=max(BUDGET_SWEEP), steps=20, variant="PGD", seed=seed)
    results, best, best_key = [], None, None
    for eps in sorted(eps_grid):
        for k in sorted(steps_grid):
            cfg = ATConfig(variant, epsilon=eps, steps=k, seed=seed,
                           **({"train": train} if train is not None else {}))
            hard, info = adv_train(det, dataset, cfg)
            adv = run_attack(hard, val.x, val.y, val_attack, val.ids)
            acc = evaluate(hard, (adv.x_adv, val.y))["accuracy"]
            results.append({"epsilon": eps, "K": k, "val_robust_acc": acc, "eps_feat": info["eps_feat"]})
            if best is None or acc > best_key:
                best, best_key = hard, acc
    return best, results
