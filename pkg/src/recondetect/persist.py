"""On-disk formats: checksummed JSON checkpoints, npz datasets and
adversarial sets, and CSV tables that carry the hash of their config."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AdversarialExample
from .autoencoder import AutoEncoder
from .detectors import FAKE, REAL, LabeledDataset
from .errors import ConfigError, VerificationError
from .schedule import DiffusionSchedule
from .scores import AnalyticScore, DenoiserNet, GaussianMixture

FORMAT = "recondetect-checkpoint"
FORMAT_VERSION = 1
HASH_PREFIX = "# config_hash="


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg):
    """sha256 of the canonical JSON form; independent of key order."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoint(path, kind, payload):
    body = {"format": FORMAT, "version": FORMAT_VERSION, "kind": kind,
            "sha256": config_hash(payload), "payload": payload}
    _atomic_write(path, canonical_json(body).encode())
    return Path(path)


def load_checkpoint(path, kind=None):
    """Payload of a checkpoint; VerificationError names the file and the defect."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}")
    try:
        body = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VerificationError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(body, dict) or body.get("format") != FORMAT:
        raise VerificationError(f"{path}: not a {FORMAT} file")
    if body.get("version") != FORMAT_VERSION:
        raise VerificationError(f"{path}: format version {body.get('version')} != {FORMAT_VERSION}")
    if kind is not None and body.get("kind") != kind:
        raise VerificationError(f"{path}: holds a {body.get('kind')!r} checkpoint, expected {kind!r}")
    if config_hash(body.get("payload")) != body.get("sha256"):
        raise VerificationError(f"{path}: checksum mismatch in {body.get('kind')} checkpoint")
    return body["payload"]


def model_to_dict(model):
    if isinstance(model, AnalyticScore):
        return {"type": "analytic", "mixture": model.mixture.to_dict(), "schedule": model.schedule.to_dict()}
    if isinstance(model, DenoiserNet):
        return {"type": "denoiser", **model.to_dict()}
    raise ConfigError(f"cannot persist score model of type {type(model).__name__}")


def model_from_dict(d):
    if d["type"] == "analytic":
        return AnalyticScore(GaussianMixture.from_dict(d["mixture"]), DiffusionSchedule(**d["schedule"]))
    if d["type"] == "denoiser":
        return DenoiserNet.from_dict(d)
    raise ConfigError(f"unknown score model type {d['type']!r}")


def save_model(path, model):
    return save_checkpoint(path, "score-model", model_to_dict(model))


def load_model(path):
    return model_from_dict(load_checkpoint(path, "score-model"))


def save_autoencoder(path, ae, latent_model=None):
    payload = {"ae": ae.to_dict(),
               "latent": None if latent_model is None else model_to_dict(latent_model)}
    return save_checkpoint(path, "autoencoder", payload)


def load_autoencoder(path):
    d = load_checkpoint(path, "autoencoder")
    latent = None if d["latent"] is None else model_from_dict(d["latent"])
    return AutoEncoder.from_dict(d["ae"]), latent


# -- arrays ---------------------------------------------------------------------------

def save_dataset(path, ds: LabeledDataset):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, x=ds.x, y=ds.y, split=ds.split.astype(str), ids=ds.ids)
    return path


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing dataset {path}; run gen-data first")
    with np.load(path) as f:
        return LabeledDataset(f["x"], f["y"], f["split"].astype(object), f["ids"])


def dataset_balanced(ds: LabeledDataset):
    return int(np.sum(ds.y == REAL)) == int(np.sum(ds.y == FAKE))


def save_adversarial(path, adv: AdversarialExample):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, x_orig=adv.x_orig, delta=adv.delta, y=adv.y, ids=adv.ids,
             epsilon=adv.epsilon, variant=adv.variant, steps=adv.steps)
    return path


def load_adversarial(path) -> AdversarialExample:
    with np.load(path) as f:
        return AdversarialExample(f["x_orig"], f["delta"], f["y"], f["ids"], float(f["epsilon"]),
                                  str(f["variant"]), int(f["steps"]))


# -- tables ---------------------------------------------------------------------------

def write_csv(path, rows, cfg_hash, columns=None):
    """Long-format CSV whose first line is ``# config_hash=<hash>``."""
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"{HASH_PREFIX}{cfg_hash}\n")
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def read_csv(path):
    """(config hash, rows as dicts of strings)."""
    with open(path, newline="") as f:
        first = f.readline()
        if not first.startswith(HASH_PREFIX):
            raise VerificationError(f"{path}: missing config hash header")
        return first[len(HASH_PREFIX):].strip(), list(csv.DictReader(f))


@dataclass
class ExperimentRecord:
    command: str
    config_hash: str
    seed: int
    input_hash: str = ""
    started: float = field(default_factory=time.time)
    finished: float | None = None
    metrics: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    def finish(self, **metrics):
        self.metrics.update(metrics)
        self.finished = time.time()
        return self

    def save(self, path):
        _atomic_write(path, json.dumps(asdict(self), indent=1, sort_keys=True, default=str).encode())
        return Path(path)


def inputs_hash(paths):
    """Content hash over a set of files, git-style: order-independent."""
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        h.update(file_hash(p).encode())
    return h.hexdigest()
