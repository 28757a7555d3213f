import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recondetect import persist
from recondetect.attacks import AttackConfig, run_attack
from recondetect.errors import ConfigError, VerificationError


@settings(max_examples=30)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.floats(allow_nan=False, allow_infinity=False),
                       max_size=6))
def test_config_hash_ignores_key_order(d):
    rev = dict(reversed(list(d.items())))
    assert persist.config_hash(d) == persist.config_hash(rev)


def test_config_hash_sees_values():
    assert persist.config_hash({"a": 1}) != persist.config_hash({"a": 2})


def test_checkpoint_round_trip(tmp_path):
    p = persist.save_checkpoint(tmp_path / "c.json", "thing", {"w": [1.0, 2.5], "n": 3})
    assert persist.load_checkpoint(p, "thing") == {"w": [1.0, 2.5], "n": 3}


def test_corrupted_checkpoint_detected(tmp_path):
    p = persist.save_checkpoint(tmp_path / "c.json", "thing", {"w": [1.0, 2.5]})
    body = json.loads(p.read_text())
    body["payload"]["w"][0] = 1.5
    p.write_text(json.dumps(body))
    with pytest.raises(VerificationError, match="checksum"):
        persist.load_checkpoint(p)
    p.write_text("{not json")
    with pytest.raises(VerificationError, match="unreadable"):
        persist.load_checkpoint(p)
    with pytest.raises(VerificationError, match="expected"):
        persist.load_checkpoint(persist.save_checkpoint(tmp_path / "d.json", "a", {}), "b")
    with pytest.raises(ConfigError):
        persist.load_checkpoint(tmp_path / "missing.json")


def test_model_and_autoencoder_round_trip(mini_world, tmp_path):
    x = mini_world.real[:5] * 2 - 1
    for g in ("A", "B"):
        m = persist.load_model(persist.save_model(tmp_path / f"{g}.json", mini_world.models[g]))
        assert np.array_equal(m.eps(x, 0.3), mini_world.models[g].eps(x, 0.3))
    ae, latent = persist.load_autoencoder(persist.save_autoencoder(tmp_path / "ae.json", mini_world.aes["A"],
                                                                   mini_world.latent_models["A"]))
    z = np.zeros((2, 4))
    assert np.array_equal(ae.decoder.forward(z), mini_world.aes["A"].decoder.forward(z))
    assert np.array_equal(latent.eps(z, 0.2), mini_world.latent_models["A"].eps(z, 0.2))


def test_dataset_and_adversarial_round_trip(mini_world, tmp_path):
    ds = mini_world.datasets["A"]
    back = persist.load_dataset(persist.save_dataset(tmp_path / "d.npz", ds))
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.ids, ds.ids)
    assert list(back.split) == list(ds.split) and persist.dataset_balanced(back)
    te = ds.subset("test").take(3)
    adv = run_attack(mini_world.detector("AEROBLADE", "A"), te.x, te.y, AttackConfig(epsilon=0.02, steps=2), te.ids)
    again = persist.load_adversarial(persist.save_adversarial(tmp_path / "a.npz", adv))
    assert np.array_equal(again.x_adv, adv.x_adv) and again.epsilon == adv.epsilon and again.check()
    with pytest.raises(ConfigError, match="gen-data"):
        persist.load_dataset(tmp_path / "none.npz")


def test_csv_carries_hash(tmp_path):
    p = persist.write_csv(tmp_path / "t.csv", [{"a": 1, "b": 0.5}, {"a": 2, "b": 1.5}], "abc")
    h, rows = persist.read_csv(p)
    assert h == "abc" and rows == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "1.5"}]
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(VerificationError):
        persist.read_csv(tmp_path / "bad.csv")


def test_inputs_hash_order_free(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text("1")
    b.write_text("2")
    before = persist.inputs_hash([a, b])
    assert before == persist.inputs_hash([b, a])
    b.write_text("3")
    assert persist.inputs_hash([a, b]) != before
