"""Reconstruction-based detectors: pixel round-trip residual (DIRE), latent
noise-prediction error (LaRE2) and autoencoder perceptual distance (AEROBLADE).

Labels: 0 = Real, 1 = Fake.  Every detector exposes ``logits`` (positive
means Fake) and ``loss_and_grad`` (per-sample loss and input gradient), the
surface the attacks differentiate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import roc_auc_score

from . import autoencoder as aelib
from .adjoint import GradRequest, input_gradient
from .errors import ConfigError, DomainError
from .nn import MLP, SGD, bce_with_logits
from .schedule import DiffusionSchedule, alpha_bar, round_trip

KINDS = ("DIRE", "LaRE2", "AEROBLADE")
REAL, FAKE = 0, 1


@dataclass
class FeatureVector:
    values: np.ndarray
    extractor: str
    provenance: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DomainError(f"non-finite {self.extractor} feature")


@dataclass
class Backbone:
    """What a detector's feature extractor is bound to: one generator's models."""

    generator_id: str
    schedule: DiffusionSchedule
    model: object = None            # pixel-space noise predictor
    ae: aelib.AutoEncoder = None
    latent_model: object = None     # latent-space noise predictor


@dataclass
class DetectorConfig:
    steps: int = 50
    lare_t: float = 0.1
    lare_e: int = 8
    lare_seed: int = 0
    hidden: int = 32
    grad_mode: str = "unrolled"    # same gradient as "adjoint", ~15x cheaper at toy scale

    def to_dict(self):
        return dict(self.__dict__)


# -- feature extractors ------------------------------------------------------

def dire_residual(x, model, schedule, steps):
    x = np.asarray(x, dtype=float)
    return np.abs(x - round_trip(x, steps, model, schedule))


def feature_dire(x, model, schedule, steps, provenance=""):
    return FeatureVector(dire_residual(x, model, schedule, steps), "DIRE", provenance)


def lare_noise(e, m, seed):
    if e < 1:
        raise DomainError("noise-draw count e must be >= 1")
    return np.random.default_rng([seed, 0x1A7E]).standard_normal((e, m))


def lare_error_map(x, ae, latent_model, schedule, t, e, seed, return_cache=False):
    """Mean over e draws of the squared single-step noise-prediction error."""
    if not (schedule.t_min <= t <= 1.0):
        raise DomainError(f"LaRE time {t} outside [{schedule.t_min}, 1]")
    z = aelib.encode(ae, x)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    n, m = z.shape
    noise = lare_noise(e, m, seed)
    ab = float(alpha_bar(schedule, t))
    zt = np.sqrt(ab) * z[None] + np.sqrt(1.0 - ab) * noise[:, None, :]      # (e, n, m)
    pred = latent_model.eps(zt.reshape(e * n, m), t).reshape(e, n, m)
    resid = noise[:, None, :] - pred
    emap = np.mean(resid * resid, axis=0)
    if single:
        emap = emap[0]
    if return_cache:
        return emap, (zt, resid, ab)
    return emap


def lare_error_map_vjp(x, ae, latent_model, schedule, t, e, cache, g_map):
    zt, resid, ab = cache
    e_, n, m = resid.shape
    cot = (2.0 / e_) * resid * np.atleast_2d(g_map)[None]
    g_zt = -latent_model.eps_vjp(zt.reshape(e_ * n, m), t, cot.reshape(e_ * n, m))
    g_z = np.sqrt(ab) * g_zt.reshape(e_, n, m).sum(axis=0)
    u = aelib.to_model(np.atleast_2d(x))
    return 2.0 * ae.encoder.vjp(u, g_z)


def feature_lare(x, ae, model, schedule, t=0.1, e=8, seed=0, provenance=""):
    return FeatureVector(lare_error_map(x, ae, model, schedule, t, e, seed), "LaRE2", provenance)


def feature_aeroblade(x, ae, provenance=""):
    x = np.asarray(x, dtype=float)
    return FeatureVector(np.atleast_1d(aelib.perceptual_distance(ae, x, aelib.reconstruct_ae(ae, x))),
                         "AEROBLADE", provenance)


# -- classifier ----------------------------------------------------------------

class Classifier:
    """Standardise, then a one-hidden-layer tanh net producing a Fake logit."""

    def __init__(self, n_in, hidden=32, seed=0):
        self.mlp = MLP((n_in, hidden, 1), np.random.default_rng(seed))
        self.mean = np.zeros(n_in)
        self.scale = np.ones(n_in)

    def fit_scaler(self, feats):
        self.mean = feats.mean(axis=0)
        self.scale = feats.std(axis=0) + 1e-12

    def logits(self, feats):
        return self.mlp.forward((feats - self.mean) / self.scale)[..., 0]

    def loss_grad(self, feats, y, param_grads=False):
        """Per-sample BCE, its gradient w.r.t. the features, and parameter grads."""
        out, acts = self.mlp.forward((feats - self.mean) / self.scale, keep=True)
        loss, dlogit = bce_with_logits(out[..., 0], y)
        g_in, grads = self.mlp.backward(acts, dlogit[..., None], param_grads=param_grads)
        return loss, g_in / self.scale, grads

    def copy(self):
        c = Classifier.__new__(Classifier)
        c.mlp, c.mean, c.scale = self.mlp.copy(), self.mean.copy(), self.scale.copy()
        return c

    def to_dict(self):
        return {"mlp": self.mlp.to_dict(), "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        c = cls.__new__(cls)
        c.mlp = MLP.from_dict(d["mlp"])
        c.mean = np.array(d["mean"], dtype=float)
        c.scale = np.array(d["scale"], dtype=float)
        return c


@dataclass
class ClassifierTrainConfig:
    epochs: int = 60
    batch: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


def fit_classifier(clf, feats, y, cfg: ClassifierTrainConfig, perturb=None):
    """Minibatch momentum SGD on BCE.

    ``perturb(idx, feats_batch, y_batch, clf)`` may replace each batch by an
    adversarial one before the update (the inner maximisation of AT).
    """
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(clf.mlp.params, cfg.lr, cfg.momentum, clip=5.0, weight_decay=cfg.weight_decay)
    n = len(feats)
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            fb, yb = feats[idx], y[idx]
            if perturb is not None:
                fb = perturb(idx, fb, yb, clf)
            loss, _, grads = clf.loss_grad(fb, yb, param_grads=True)
            grads = [g / len(idx) for g in grads]
            opt.step(clf.mlp.params, grads)
            trace.append(float(loss.mean()))
    return trace


# -- detector ----------------------------------------------------------------

@dataclass
class Detector:
    kind: str
    backbone: Backbone
    config: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: Classifier | None = None
    threshold: float | None = None
    direction: int = 1
    score_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown detector kind {self.kind!r}; expected one of {KINDS}")

    @property
    def id(self):
        return f"{self.kind}@{self.backbone.generator_id}"

    # features
    def error_map(self, x):
        bb, c = self.backbone, self.config
        return lare_error_map(x, bb.ae, bb.latent_model, bb.schedule, c.lare_t, c.lare_e, c.lare_seed)

    def features(self, x):
        """Classifier input (DIRE residual, [x, decoded error map], or the scalar distance)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        bb = self.backbone
        if self.kind == "DIRE":
            return dire_residual(x, bb.model, bb.schedule, self.config.steps)
        if self.kind == "LaRE2":
            return np.concatenate([x, aelib.decode(bb.ae, self.error_map(x), clamp=False)], axis=1)
        return aelib.perceptual_distance(bb.ae, x, aelib.reconstruct_ae(bb.ae, x))

    def rho_features(self, x):
        """The feature map compared by the relative-perturbation diagnostic
        (LaRE2 error maps are decoded to data space first)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "LaRE2":
            return aelib.decode(self.backbone.ae, self.error_map(x), clamp=False)
        f = self.features(x)
        return f[:, None] if f.ndim == 1 else f

    # decisions
    def logits_from_features(self, feats):
        if self.kind == "AEROBLADE":
            if self.threshold is None:
                raise ConfigError("AEROBLADE detector has no threshold; train it first")
            return self.direction * (feats - self.threshold) / self.score_scale
        if self.classifier is None:
            raise ConfigError(f"{self.id} has no classifier; train it first")
        return self.classifier.logits(feats)

    def logits(self, x):
        return self.logits_from_features(self.features(x))

    def predict(self, x):
        """(labels, Fake scores)."""
        s = self.logits(x)
        return (s > 0).astype(int), s

    def loss(self, x, y):
        """Per-sample attack objective without the gradient."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        feats = self.features(x)
        if self.kind == "AEROBLADE":
            sign = np.where(y > 0.5, -1.0, 1.0) * self.direction
            return sign * (feats - self.threshold)
        return bce_with_logits(self.classifier.logits(feats), y)[0]

    def loss_and_grad(self, x, y, mode=None):
        """Per-sample attack objective and its input gradient.

        Trainable kinds use BCE on the Fake logit; AEROBLADE uses the signed
        margin to its threshold (positive when misclassified side is reached).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        bb = self.backbone
        if self.kind == "DIRE":
            clf = self.classifier

            def tail(x_in, x_rec):
                diff = x_in - x_rec
                loss, g_feat, _ = clf.loss_grad(np.abs(diff), y)
                g = g_feat * np.sign(diff)
                return loss, g, -g
            res = input_gradient(GradRequest(x, tail, self.config.steps, bb.model, bb.schedule,
                                             mode or self.config.grad_mode))
            return res.loss, res.grad
        if self.kind == "LaRE2":
            c = self.config
            emap, cache = lare_error_map(x, bb.ae, bb.latent_model, bb.schedule, c.lare_t,
                                         c.lare_e, c.lare_seed, return_cache=True)
            dec = aelib.decode(bb.ae, emap, clamp=False)
            loss, g_feat, _ = self.classifier.loss_grad(np.concatenate([x, dec], axis=1), y)
            d = x.shape[1]
            g_map = aelib.decoder_vjp(bb.ae, emap, g_feat[:, d:])
            g = g_feat[:, :d] + lare_error_map_vjp(x, bb.ae, bb.latent_model, bb.schedule,
                                                   c.lare_t, c.lare_e, cache, g_map)
            return loss, g
        rec = aelib.reconstruct_ae(bb.ae, x)
        dist, gx, gy = aelib.perceptual_distance_grad(bb.ae, x, rec)
        g_dist = gx + aelib.ae_vjp(bb.ae, x, gy)
        sign = np.where(y > 0.5, -1.0, 1.0) * self.direction
        return sign * (dist - self.threshold), sign[:, None] * g_dist

    # persistence
    def to_dict(self):
        return {
            "kind": self.kind,
            "backbone": self.backbone.generator_id,
            "config": self.config.to_dict(),
            "classifier": None if self.classifier is None else self.classifier.to_dict(),
            "threshold": self.threshold,
            "direction": self.direction,
            "score_scale": self.score_scale,
        }

    @classmethod
    def from_dict(cls, d, backbone):
        if d["backbone"] != backbone.generator_id:
            raise ConfigError(f"checkpoint expects backbone {d['backbone']!r}, got {backbone.generator_id!r}")
        clf = None if d["classifier"] is None else Classifier.from_dict(d["classifier"])
        return cls(d["kind"], backbone, DetectorConfig(**d["config"]), clf, d["threshold"],
                   int(d["direction"]), float(d["score_scale"]))


# -- datasets ------------------------------------------------------------------

@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=int)
        self.split = np.asarray(self.split, dtype=object)
        if self.ids is None:
            self.ids = np.arange(len(self.y))
        if not (len(self.x) == len(self.y) == len(self.split) == len(self.ids)):
            raise ConfigError("dataset arrays disagree in length")

    def __len__(self):
        return len(self.y)

    def subset(self, split):
        keep = self.split == split
        return LabeledDataset(self.x[keep], self.y[keep], self.split[keep], self.ids[keep])

    def take(self, n_per_class, seed=0):
        """A balanced subset with ``n_per_class`` samples of each label."""
        rng = np.random.default_rng(seed)
        keep = []
        for label in (REAL, FAKE):
            idx = np.flatnonzero(self.y == label)
            if len(idx) < n_per_class:
                raise ConfigError(f"only {len(idx)} samples of class {label}")
            keep.append(np.sort(rng.choice(idx, n_per_class, replace=False)))
        keep = np.concatenate(keep)
        return LabeledDataset(self.x[keep], self.y[keep], self.split[keep], self.ids[keep])

    @property
    def balanced(self):
        return bool(np.sum(self.y == REAL) == np.sum(self.y == FAKE))


def make_dataset(real, fake, fractions=(0.6, 0.2, 0.2), seed=0):
    """Balanced train/val/test splits (equal class counts in every split)."""
    n = min(len(real), len(fake))
    if n == 0:
        raise ConfigError("dataset needs at least one sample per class")
    rng = np.random.default_rng(seed)
    real = np.asarray(real)[rng.permutation(len(real))[:n]]
    fake = np.asarray(fake)[rng.permutation(len(fake))[:n]]
    cuts = np.floor(np.cumsum(fractions) / np.sum(fractions) * n).astype(int)
    names = np.empty(n, dtype=object)
    names[:cuts[0]] = "train"
    names[cuts[0]:cuts[1]] = "val"
    names[cuts[1]:] = "test"
    x = np.concatenate([real, fake])
    y = np.concatenate([np.zeros(n, int), np.ones(n, int)])
    split = np.concatenate([names, names])
    return LabeledDataset(x, y, split, np.arange(2 * n))


# -- training and evaluation -------------------------------------------------------

def _fit_threshold(scores, y):
    """Threshold and direction maximising balanced accuracy."""
    order = np.argsort(scores)
    s, lab = scores[order], y[order]
    n_fake, n_real = max(lab.sum(), 1), max((1 - lab).sum(), 1)
    # predicting Fake for scores above a cut: cumulative counts below each cut
    fake_below = np.concatenate([[0], np.cumsum(lab)])
    real_below = np.concatenate([[0], np.cumsum(1 - lab)])
    bal_up = 0.5 * ((n_fake - fake_below) / n_fake + real_below / n_real)
    bal_down = 1.0 - bal_up
    cuts = np.concatenate([[s[0] - 1.0], 0.5 * (s[:-1] + s[1:]), [s[-1] + 1.0]])
    i_up, i_down = int(np.argmax(bal_up)), int(np.argmax(bal_down))
    if bal_up[i_up] >= bal_down[i_down]:
        return float(cuts[i_up]), 1, float(bal_up[i_up])
    return float(cuts[i_down]), -1, float(bal_down[i_down])


def train_detector(det: Detector, dataset: LabeledDataset, config: ClassifierTrainConfig | None = None,
                   train_features=None):
    """Fit the classifier (DIRE, LaRE2) or the threshold (AEROBLADE).

    Returns (detector, metrics on the validation split).
    """
    config = config or ClassifierTrainConfig()
    train, val = dataset.subset("train"), dataset.subset("val")
    for part, name in ((train, "train"), (val, "val")):
        if len(np.unique(part.y)) < 2:
            raise ConfigError(f"{name} split must contain both classes")
    if det.kind == "AEROBLADE":
        scores = det.features(val.x)
        det.threshold, det.direction, _ = _fit_threshold(scores, val.y)
        det.score_scale = float(np.std(scores)) or 1.0
    else:
        feats = det.features(train.x) if train_features is None else train_features
        det.classifier = Classifier(feats.shape[1], det.config.hidden, seed=config.seed)
        det.classifier.fit_scaler(feats)
        fit_classifier(det.classifier, feats, train.y, config)
    return det, evaluate(det, val)


def metrics_from_predictions(y, pred, scores=None):
    y, pred = np.asarray(y, dtype=int), np.asarray(pred, dtype=int)
    if len(y) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    tp = int(np.sum((pred == FAKE) & (y == FAKE)))
    tn = int(np.sum((pred == REAL) & (y == REAL)))
    fp = int(np.sum((pred == FAKE) & (y == REAL)))
    fn = int(np.sum((pred == REAL) & (y == FAKE)))
    recalls = [r for r in (tn / (tn + fp) if tn + fp else None, tp / (tp + fn) if tp + fn else None)
               if r is not None]
    out = {"accuracy": float(np.mean(recalls)), "raw_accuracy": (tp + tn) / len(y),
           "tp": tp, "tn": tn, "fp": fp, "fn": fn,
           "real_recall": tn / (tn + fp) if tn + fp else float("nan"),
           "fake_recall": tp / (tp + fn) if tp + fn else float("nan"),
           "fraction_real": float(np.mean(pred == REAL))}
    if scores is not None and len(np.unique(y)) == 2:
        out["auc"] = float(roc_auc_score(y, scores))
    return out


def evaluate(det: Detector, dataset):
    """Balanced accuracy (mean per-class recall), AUC and confusion counts."""
    x, y = (dataset.x, dataset.y) if isinstance(dataset, LabeledDataset) else dataset
    if len(y) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    pred, scores = det.predict(x)
    return metrics_from_predictions(y, pred, scores)
