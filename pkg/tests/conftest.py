import numpy as np
import pytest

from recondetect.detectors import ClassifierTrainConfig, DetectorConfig
from recondetect.schedule import DiffusionSchedule
from recondetect.scores import AnalyticScore, GaussianMixture, GeneratorSpec
from recondetect.world import WorldConfig, build_world

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Records one pass/fail line per acceptance criterion for the run summary."""
    def record(n, title, passed, detail=""):
        line = f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        request.config.stash[ACCEPTANCE].append((n, line))
        print(line)
        return passed
    return record


@pytest.fixture(scope="session")
def schedule():
    return DiffusionSchedule()


@pytest.fixture
def small_mixture():
    rng = np.random.default_rng(3)
    return GaussianMixture([0.3, 0.7], rng.uniform(-0.4, 0.4, (2, 4)), [0.02, 0.05])


@pytest.fixture
def small_model(small_mixture, schedule):
    return AnalyticScore(small_mixture, schedule)


@pytest.fixture(scope="session")
def mini_world():
    """A small, fast world: 16-dim data, two analytic generators, 10-step DDIM."""
    cfg = WorldConfig(dim=16, latent=4, ae_hidden=32, ae_iters=1500, n_per_class=300, variance=0.0025,
                      generators=[GeneratorSpec("A", "analytic-shifted", offset=0.1),
                                  GeneratorSpec("B", "analytic-shifted", var_scale=1.6)],
                      detector=DetectorConfig(steps=10), classifier=ClassifierTrainConfig(epochs=40))
    return build_world(cfg)


@pytest.fixture(scope="session")
def default_world():
    """The seeded default grid: 64-dim data, four generators, three detector kinds."""
    world = build_world(WorldConfig())
    world.all_detectors()
    return world
