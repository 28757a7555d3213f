import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recondetect import autoencoder as aelib
from recondetect.detectors import (FAKE, REAL, Backbone, Detector, DetectorConfig, LabeledDataset,
                                   _fit_threshold, evaluate, feature_aeroblade, feature_dire, feature_lare,
                                   lare_error_map, lare_noise, metrics_from_predictions,
                                   train_detector)
from recondetect.errors import ConfigError, DomainError
from recondetect.schedule import alpha_bar
from recondetect.scores import AnalyticScore, ConstantEps, GaussianMixture

KINDS = ("DIRE", "LaRE2", "AEROBLADE")


def test_dire_zero_for_exact_round_trip(schedule):
    model = ConstantEps(np.array([0.2, -0.3, 0.5]), schedule)
    f = feature_dire(np.array([[0.2, 0.5, 0.7]]), model, schedule, 1)
    assert np.max(f.values) < 1e-12 and f.extractor == "DIRE"


def test_features_non_negative(mini_world):
    x = mini_world.test_set("A").x[:20]
    bb = mini_world.backbone("A")
    assert np.all(feature_dire(x, bb.model, bb.schedule, 10).values >= 0)
    assert np.all(feature_lare(x, bb.ae, bb.latent_model, bb.schedule).values >= 0)
    assert np.all(feature_aeroblade(x, bb.ae).values >= 0)


def test_dire_separates_shifted_fakes(mini_world):
    ds = mini_world.datasets["A"]
    f = Detector("DIRE", mini_world.backbone("A"), DetectorConfig(steps=10)).features(ds.x).mean(axis=1)
    fr, ff = f[ds.y == REAL], f[ds.y == FAKE]
    se = np.sqrt(fr.var() / len(fr) + ff.var() / len(ff))
    assert ff.mean() < fr.mean() - 3 * se


def test_lare_perfect_predictor_near_zero(mini_world, schedule):
    ae = mini_world.aes["A"]
    x = mini_world.real[:1]
    z = aelib.encode(ae, x)
    exact = AnalyticScore(GaussianMixture([1.0], z, [1e-3]), schedule)
    assert np.mean(lare_error_map(x, ae, exact, schedule, 0.1, 64, 0)) < 0.05


def test_lare_single_draw_is_squared_residual(mini_world, schedule):
    bb = mini_world.backbone("A")
    x = mini_world.real[:3]
    z = aelib.encode(bb.ae, x)
    eps = lare_noise(1, z.shape[1], 7)[0]
    ab = alpha_bar(schedule, 0.2)
    resid = eps - bb.latent_model.eps(np.sqrt(ab) * z + np.sqrt(1 - ab) * eps, 0.2)
    assert np.allclose(lare_error_map(x, bb.ae, bb.latent_model, schedule, 0.2, 1, 7), resid ** 2, atol=1e-14)


def test_lare_validation(mini_world, schedule):
    bb = mini_world.backbone("A")
    with pytest.raises(DomainError):
        lare_error_map(mini_world.real[:2], bb.ae, bb.latent_model, schedule, 0.1, 0, 0)
    with pytest.raises(DomainError):
        lare_error_map(mini_world.real[:2], bb.ae, bb.latent_model, schedule, 0.0, 4, 0)


def test_aeroblade_zero_for_perfect_autoencoder():
    x = np.random.default_rng(0).uniform(0.1, 0.9, (4, 6))
    assert np.all(feature_aeroblade(x, aelib.AutoEncoder.identity(6)).values < 1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_features_deterministic(mini_world, kind):
    det = mini_world.detector(kind, "A")
    x = mini_world.test_set("A").x[:10]
    assert np.array_equal(det.features(x), det.features(x))
    assert np.array_equal(det.predict(x)[1], det.predict(x)[1])


@pytest.mark.parametrize("kind", KINDS)
def test_loss_gradient_matches_fd(mini_world, kind):
    det = mini_world.detector(kind, "A")
    ds = mini_world.test_set("A")
    h, worst = 1e-6, 0.0
    for i in (0, len(ds) - 1):
        x, y = ds.x[i:i + 1], ds.y[i:i + 1]
        _, g = det.loss_and_grad(x, y)
        fd = np.zeros_like(x)
        for j in range(x.shape[1]):
            e = np.zeros_like(x)
            e[0, j] = h
            fd[0, j] = (det.loss(x + e, y)[0] - det.loss(x - e, y)[0]) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    assert worst < 1e-3


def test_dire_adjoint_and_unrolled_agree(mini_world):
    det = mini_world.detector("DIRE", "A")
    x, y = mini_world.test_set("A").x[:4], mini_world.test_set("A").y[:4]
    _, ga = det.loss_and_grad(x, y, mode="adjoint")
    _, gu = det.loss_and_grad(x, y, mode="unrolled")
    assert np.linalg.norm(ga - gu) / np.linalg.norm(gu) < 1e-5


@pytest.mark.parametrize("kind", ("DIRE", "AEROBLADE"))
def test_no_signal_gives_chance(mini_world, kind):
    real = mini_world.real[:200]
    split = np.array(["train"] * 120 + ["val"] * 40 + ["test"] * 40)
    ds = LabeledDataset(np.concatenate([real, real]), np.repeat([REAL, FAKE], 200), np.tile(split, 2))
    det = Detector(kind, mini_world.backbone("A"), DetectorConfig(steps=10))
    train_detector(det, ds)
    assert evaluate(det, ds.subset("test"))["accuracy"] == pytest.approx(0.5, abs=0.03)


def test_threshold_perfect_separation():
    scores = np.array([0.1, 0.2, 0.3, 1.1, 1.2, 1.3])
    for y, direction in ((np.array([0, 0, 0, 1, 1, 1]), 1), (np.array([1, 1, 1, 0, 0, 0]), -1)):
        tau, d, acc = _fit_threshold(scores, y)
        assert acc == 1.0 and d == direction and 0.3 < tau < 1.1


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_accuracy_equals_recount(pairs):
    y, pred = map(np.array, zip(*pairs))
    m = metrics_from_predictions(y, pred)
    recalls = [np.mean(pred[y == c] == c) for c in (REAL, FAKE) if np.any(y == c)]
    assert m["accuracy"] == pytest.approx(np.mean(recalls), abs=1e-15)
    assert m["tp"] + m["tn"] + m["fp"] + m["fn"] == len(y)
    assert 0.0 <= m["accuracy"] <= 1.0


def test_all_correct_is_one():
    y = np.array([0, 1, 0, 1])
    assert metrics_from_predictions(y, y)["accuracy"] == 1.0


def test_empty_and_degenerate_errors(mini_world):
    det = mini_world.detector("DIRE", "A")
    with pytest.raises(ConfigError):
        evaluate(det, (np.zeros((0, 16)), np.zeros(0)))
    one_class = LabeledDataset(mini_world.real[:20], np.zeros(20), np.array(["train"] * 10 + ["val"] * 10))
    with pytest.raises(ConfigError):
        train_detector(Detector("DIRE", mini_world.backbone("A"), DetectorConfig(steps=10)), one_class)
    with pytest.raises(ConfigError):
        Detector("FIRE", mini_world.backbone("A"))


def test_splits_balanced(mini_world):
    ds = mini_world.datasets["A"]
    assert ds.balanced
    for part in ("train", "val", "test"):
        assert ds.subset(part).balanced
    assert ds.take(10).balanced and len(ds.take(10)) == 20


def test_lare_classifier_sees_pixels_and_decoded_map(mini_world):
    det = mini_world.detector("LaRE2", "A")
    x = mini_world.test_set("A").x[:5]
    f = det.features(x)
    assert f.shape == (5, 32)
    assert np.array_equal(f[:, :16], x)


@pytest.mark.parametrize("kind", KINDS)
def test_detector_dict_round_trip(mini_world, kind):
    det = mini_world.detector(kind, "A")
    back = Detector.from_dict(det.to_dict(), mini_world.backbone("A"))
    x = mini_world.test_set("A").x[:8]
    assert np.array_equal(det.logits(x), back.logits(x))
    with pytest.raises(ConfigError):
        Detector.from_dict(det.to_dict(), mini_world.backbone("B"))


def test_backbone_binding(mini_world):
    bb = mini_world.backbone("B")
    assert isinstance(bb, Backbone) and bb.generator_id == "B"
    with pytest.raises(ConfigError):
        mini_world.backbone("Z")
