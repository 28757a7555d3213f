import numpy as np
import pytest

from recondetect.attacks import AttackConfig, run_attack
from recondetect.defenses import (PURIFY_RATIOS, ATConfig, PurifyConfig, _feature_pgd, _lare_pixel_pgd, adv_train,
                                  at_grid_search, calibrate_eps_feat, evaluate_defense, purification_sweep,
                                  purify)
from recondetect.detectors import ClassifierTrainConfig, Detector, LabeledDataset, evaluate, train_detector
from recondetect.errors import ConfigError
from recondetect.scores import AnalyticScore, GaussianMixture


def test_purify_config_validation():
    for bad in (0.0, 0.6):
        with pytest.raises(ConfigError):
            PurifyConfig(bad)
    with pytest.raises(ConfigError):
        PurifyConfig(0.1, steps=0)
    assert PurifyConfig(0.05).n_steps(type("S", (), {"T": 1000})) == 50
    assert PurifyConfig(0.005).n_steps(type("S", (), {"T": 1000})) == 10


def test_sweep_ratios():
    assert PURIFY_RATIOS == (0.01, 0.02, 0.03, 0.05, 0.1)


def test_displacement_grows_with_ratio(mini_world):
    x = mini_world.test_set("A").x[:40]
    moved = [np.mean(np.abs(purify(x, PurifyConfig(r, seed=1), mini_world.models["A"], mini_world.schedule) - x))
             for r in (0.01, 0.1, 0.4)]
    assert moved[0] < moved[1] < moved[2]
    assert np.max(np.abs(purify(x, PurifyConfig(0.01, seed=1), mini_world.models["A"], mini_world.schedule) - x)) < 0.1


def test_large_ratio_destroys_input(schedule):
    # standard-normal prior: from t* = 0.5 the output law forgets the input
    model = AnalyticScore(GaussianMixture([1.0], np.zeros((1, 4)), [1.0]), schedule)
    x_lo, x_hi = np.full((1500, 4), 0.3), np.full((1500, 4), 0.7)
    cfg = PurifyConfig(0.5, seed=2)
    a = purify(x_lo, cfg, model, schedule, ids=np.arange(1500))
    b = purify(x_hi, cfg, model, schedule, ids=np.arange(1500, 3000))
    assert abs(a.mean() - b.mean()) < 0.05


def test_purify_seed_deterministic(mini_world):
    x = mini_world.test_set("A").x[:5]
    a = purify(x, PurifyConfig(0.05, seed=3), mini_world.models["A"], mini_world.schedule)
    b = purify(x, PurifyConfig(0.05, seed=3), mini_world.models["A"], mini_world.schedule)
    c = purify(x, PurifyConfig(0.05, seed=4), mini_world.models["A"], mini_world.schedule)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all((a >= 0) & (a <= 1))


def test_benign_purification_hurts(mini_world):
    det = mini_world.detector("DIRE", "A")
    ds = mini_world.test_set("A").take(40)
    base = evaluate(det, ds)["accuracy"]
    rows = purification_sweep(ds.x, ds.y, (0.05, 0.1), det, mini_world.models["A"], mini_world.schedule)
    assert [r["ratio"] for r in rows] == [0.05, 0.1]
    assert all(r["accuracy"] < base for r in rows)


def test_sweep_empty_errors(mini_world):
    with pytest.raises(ConfigError):
        purification_sweep(np.zeros((0, 16)), np.zeros(0), PURIFY_RATIOS, mini_world.detector("DIRE", "A"),
                           mini_world.models["A"], mini_world.schedule)


def test_at_config_validation():
    with pytest.raises(ConfigError):
        ATConfig("AEROBLADE")
    with pytest.raises(ConfigError):
        ATConfig("DIRE", eps_feat=-1.0)
    with pytest.raises(ConfigError):
        ATConfig("DIRE", steps=-1)
    assert ATConfig(epsilon=0.016).alpha == pytest.approx(0.004)


def test_aeroblade_cannot_be_trained(mini_world):
    with pytest.raises(ConfigError):
        adv_train(mini_world.detector("AEROBLADE", "A"), mini_world.datasets["A"], ATConfig("DIRE"))


def test_eps_feat_calibration_is_median(mini_world):
    det = mini_world.detector("DIRE", "A")
    x = mini_world.datasets["A"].subset("train").x[:30]
    eps = calibrate_eps_feat(det, x, 0.031, seed=0)
    rng = np.random.default_rng([0, 4])
    xr = np.clip(x + rng.uniform(-0.031, 0.031, x.shape), 0, 1)
    brute = np.median([np.max(np.abs(det.features(a[None]) - det.features(b[None]))) for a, b in zip(x, xr)])
    assert eps == pytest.approx(brute, rel=1e-9)
    assert calibrate_eps_feat(det, x, 0.0) == 0.0


def test_feature_pgd_budget(mini_world):
    det = mini_world.detector("DIRE", "A")
    ds = mini_world.test_set("A").take(10)
    f = det.features(ds.x)
    adv = _feature_pgd(det.classifier, f, ds.y, 0.01, 4, np.random.default_rng(0))
    assert np.all(adv >= 0) and np.max(np.abs(adv - f)) <= 0.01 + 1e-12
    assert _feature_pgd(det.classifier, f, ds.y, 0.01, 0, None) is f


def test_lare_pixel_pgd_budget(mini_world):
    det = mini_world.detector("LaRE2", "A")
    ds = mini_world.test_set("A").take(10)
    feats = _lare_pixel_pgd(det, det.classifier, ds.x, ds.y, 0.02, 3, np.random.default_rng(0))
    assert np.max(np.abs(feats[:, :16] - ds.x)) <= 0.02 + 1e-12


def test_zero_inner_steps_is_standard_training(mini_world):
    det = mini_world.detector("DIRE", "A")
    ds = mini_world.datasets["A"]
    cfg = ClassifierTrainConfig(epochs=5)
    hard, _ = adv_train(det, ds, ATConfig("DIRE", steps=0, eps_feat=0.01, train=cfg))
    plain = Detector("DIRE", det.backbone, det.config)
    train_detector(plain, ds, cfg)
    x = ds.subset("test").x[:10]
    assert np.allclose(hard.logits(x), plain.logits(x), atol=1e-12)


def test_grid_search_tie_break_and_argmax(mini_world):
    det = mini_world.detector("LaRE2", "A")
    best, rows = at_grid_search(det, mini_world.datasets["A"], steps_grid=(1, 2), eps_grid=(0.016, 0.004),
                                val_per_class=10, train=ClassifierTrainConfig(epochs=3),
                                val_attack=AttackConfig(epsilon=0.031, steps=3))
    assert [(r["epsilon"], r["K"]) for r in rows] == [(0.004, 1), (0.004, 2), (0.016, 1), (0.016, 2)]
    accs = [r["val_robust_acc"] for r in rows]
    first_best = int(np.argmax(accs))
    val = mini_world.datasets["A"].subset("val").take(10)
    adv = run_attack(best, val.x, val.y, AttackConfig(epsilon=0.031, steps=3), val.ids)
    assert evaluate(best, (adv.x_adv, val.y))["accuracy"] == accs[first_best]


def test_evaluate_defense(mini_world):
    det = mini_world.detector("AEROBLADE", "A")
    out = evaluate_defense(det, mini_world.datasets["A"], AttackConfig(epsilon=0.031, steps=10), n_per_class=10)
    assert set(out) >= {"clean_acc", "robust_acc"} and out["robust_acc"] <= out["clean_acc"]
    empty = LabeledDataset(np.zeros((0, 16)), np.zeros(0), np.array([], dtype=object))
    with pytest.raises(ConfigError):
        evaluate_defense(det, empty)
