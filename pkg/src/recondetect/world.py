"""The default toy world: a Gaussian-mixture "real" distribution, four
imperfect generators, their autoencoders and latent noise predictors, and
balanced real-vs-fake datasets per generator.

Everything is derived from ``WorldConfig.seed`` through named RNG streams,
so two builds with the same config are bit-identical.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.mixture import GaussianMixture as SkMixture

from . import autoencoder as aelib
from .detectors import (KINDS, Backbone, ClassifierTrainConfig, Detector, DetectorConfig,
                        LabeledDataset, make_dataset, train_detector)
from .errors import ConfigError
from .schedule import DiffusionSchedule, to_data
from .scores import AnalyticScore, GaussianMixture, GeneratorSpec, make_generator, sample_fakes

_STREAMS = {"mixture": 1, "real": 2, "fake": 3, "ae": 4, "latent": 5, "split": 6}


def stream(seed, name, *extra):
    """Independent generator for a named purpose (and optional sub-keys)."""
    return np.random.default_rng([seed, _STREAMS[name], *extra])


def default_generators():
    return [
        GeneratorSpec("G1-shift", "analytic-shifted", offset=0.07),
        GeneratorSpec("G2-scale", "analytic-shifted", var_scale=1.5),
        GeneratorSpec("G3-net32", "trained", seed=1, hidden=32, var_scale=1.8, train={"iters": 20000}),
        GeneratorSpec("G4-net64", "trained", seed=2, hidden=64, var_scale=1.8, train={"iters": 20000}),
    ]


@dataclass
class WorldConfig:
    dim: int = 64
    components: int = 4
    spread: float = 0.3
    variance: float = 0.0025
    latent: int = 16
    ae_hidden: int = 64
    ae_iters: int = 3000
    lare_components: int = 4
    n_per_class: int = 2000
    seed: int = 0
    generators: list = field(default_factory=default_generators)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)

    def __post_init__(self):
        if self.n_per_class <= 0:
            raise ConfigError("dataset size must be positive")
        if self.latent >= self.dim:
            raise ConfigError("latent size must be below the data dimension")
        self.generators = [g if isinstance(g, GeneratorSpec) else GeneratorSpec(**g) for g in self.generators]
        ids = [g.id for g in self.generators]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"generator ids must be unique, got {ids}")
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierTrainConfig(**self.classifier)

    def to_dict(self):
        d = asdict(self)
        d["generators"] = [g.to_dict() for g in self.generators]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def base_mixture(cfg: WorldConfig):
    rng = stream(cfg.seed, "mixture")
    k = cfg.components
    means = rng.uniform(-cfg.spread, cfg.spread, (k, cfg.dim))
    return GaussianMixture(np.full(k, 1.0 / k), means, np.full(k, cfg.variance))


def fit_latent_model(ae, samples, components, schedule, seed):
    """The generator's latent noise predictor: exact score of a spherical
    mixture fitted to its encoded samples."""
    z = aelib.encode(ae, samples)
    sk = SkMixture(components, covariance_type="spherical", random_state=seed).fit(z)
    w = sk.weights_ / sk.weights_.sum()
    return AnalyticScore(GaussianMixture(w, sk.means_, sk.covariances_), schedule)


class World:
    def __init__(self, cfg: WorldConfig, schedule=None):
        self.cfg = cfg
        self.schedule = schedule or DiffusionSchedule()
        self.mixture = None
        self.models = {}
        self.real = None
        self.fakes = {}
        self.datasets = {}
        self.aes = {}
        self.latent_models = {}
        self.detectors = {}

    @property
    def generator_ids(self):
        return [g.id for g in self.cfg.generators]

    def spec(self, gid):
        for g in self.cfg.generators:
            if g.id == gid:
                return g
        raise ConfigError(f"unknown generator id {gid!r}")

    # building blocks
    def build_data(self):
        cfg, s = self.cfg, self.schedule
        self.mixture = base_mixture(cfg)
        self.real = to_data(self.mixture.sample(cfg.n_per_class, stream(cfg.seed, "real")))
        for i, spec in enumerate(cfg.generators):
            if spec.id not in self.models:
                self.models[spec.id] = make_generator(spec, self.mixture, s)
            fake = sample_fakes(self.models[spec.id], cfg.n_per_class, cfg.detector.steps, s,
                                stream(cfg.seed, "fake", i))
            self.fakes[spec.id] = fake
            self.datasets[spec.id] = make_dataset(self.real, fake, seed=cfg.seed * 1000 + i)
        return self

    def build_autoencoders(self):
        cfg, s = self.cfg, self.schedule
        train_real = self.real
        for i, spec in enumerate(cfg.generators):
            ae = aelib.AutoEncoder.create(cfg.dim, cfg.latent, cfg.ae_hidden, seed=cfg.seed * 100 + i)
            aelib.train_autoencoder(ae, train_real, aelib.AETrainConfig(iters=cfg.ae_iters, seed=cfg.seed + i))
            self.aes[spec.id] = ae
            own = sample_fakes(self.models[spec.id], cfg.n_per_class, cfg.detector.steps, s,
                               stream(cfg.seed, "latent", i))
            self.latent_models[spec.id] = fit_latent_model(ae, own, cfg.lare_components, s, cfg.seed)
        return self

    def build(self):
        return self.build_data().build_autoencoders()

    def backbone(self, gid):
        self.spec(gid)
        return Backbone(gid, self.schedule, self.models.get(gid), self.aes.get(gid),
                        self.latent_models.get(gid))

    def detector(self, kind, gid):
        """Trained detector of ``kind`` bound to generator ``gid`` (cached)."""
        key = (kind, gid)
        if key not in self.detectors:
            if kind not in KINDS:
                raise ConfigError(f"unknown detector kind {kind!r}")
            det = Detector(kind, self.backbone(gid), DetectorConfig(**self.cfg.detector.to_dict()))
            train_detector(det, self.datasets[gid], self.cfg.classifier)
            self.detectors[key] = det
        return self.detectors[key]

    def all_detectors(self, kinds=KINDS):
        return {(k, g): self.detector(k, g) for k in kinds for g in self.generator_ids}

    def test_set(self, gid) -> LabeledDataset:
        return self.datasets[gid].subset("test")


def build_world(cfg: WorldConfig | None = None, schedule=None) -> World:
    return World(cfg or WorldConfig(), schedule).build()
