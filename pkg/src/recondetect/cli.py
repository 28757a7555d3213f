"""Command-line front end.

A workspace directory (``--out``) holds the resolved config, checkpoints,
datasets, adversarial sets and result tables::

    config.json  models/  autoencoders/  data/  detectors/  hardened/
    adv/  results/*.csv  records/*.json

Commands build on each other's outputs; a missing prerequisite is reported
with the command that produces it.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import persist
from .analysis import REGIMES, collapse_probe, regime_of, rho_hierarchy, transfer_eval
from .attacks import AttackConfig, random_perturb, run_attack
from .defenses import PURIFY_RATIOS, PurifyConfig, at_grid_search, evaluate_defense, purify
from .detectors import KINDS, ClassifierTrainConfig, Detector, evaluate
from .errors import ConfigError, TestbedError
from .scores import make_generator
from .verify import run_all
from .world import World, WorldConfig, base_mixture

# -- configuration --------------------------------------------------------------------


def _section(defaults):
    return field(default_factory=lambda: dict(defaults))


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    attack: dict = _section({"epsilon": 0.031, "steps": 100, "variant": "APGD"})
    eval_per_class: int = 250
    transfer: dict = _section({"per_class": 25})
    purify: dict = _section({"ratios": list(PURIFY_RATIOS), "per_class": 50, "kinds": list(KINDS),
                             "attack": {"epsilon": 0.031, "steps": 20, "variant": "PGD", "grad_mode": "adjoint"}})
    advtrain: dict = _section({"generators": ["G1-shift"], "per_class": 100, "val_per_class": 100,
                               "epochs": 30})
    rho: dict = _section({"per_class": 25, "steps": 50})
    collapse: dict = _section({"n": 1000})

    def __post_init__(self):
        if isinstance(self.world, dict):
            self.world = WorldConfig.from_dict(self.world)
        self.attack_config()
        if self.eval_per_class < 1:
            raise ConfigError("eval_per_class must be positive")
        unknown = [g for g in self.advtrain.get("generators", []) if g not in [s.id for s in self.world.generators]]
        if unknown:
            raise ConfigError(f"advtrain references unknown generators {unknown}")
        bad = [k for k in self.purify.get("kinds", []) if k not in KINDS]
        if bad:
            raise ConfigError(f"purify references unknown detector kinds {bad}")

    @property
    def seed(self):
        return self.world.seed

    def attack_config(self, **over):
        try:
            return AttackConfig(**{"seed": self.seed, **self.attack, **over})
        except TypeError as exc:
            raise ConfigError(f"bad attack section: {exc}") from exc

    def to_dict(self):
        return {"world": self.world.to_dict(), "attack": dict(self.attack),
                "eval_per_class": self.eval_per_class, "transfer": dict(self.transfer),
                "purify": dict(self.purify), "advtrain": dict(self.advtrain),
                "rho": dict(self.rho), "collapse": dict(self.collapse)}

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path=None, seed=None) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        d.setdefault("world", {})["seed"] = int(seed)
    cfg = ExperimentConfig.from_dict(d)
    return ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))


# -- workspace -------------------------------------------------------------------------

class Workspace:
    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = persist.config_hash(cfg.to_dict())
        self.world = World(cfg.world)

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def write_config(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))

    def table(self, name, rows, columns=None):
        return persist.write_csv(self.path("results", f"{name}.csv"), rows, self.hash, columns)

    def record(self, command, **metrics):
        inputs = [p for p in self.root.glob("**/*") if p.is_file() and p.suffix in (".json", ".npz")
                  and p.parent.name != "records"]
        rec = persist.ExperimentRecord(command, self.hash, self.cfg.seed, persist.inputs_hash(inputs))
        rec.artifacts = sorted(str(p.relative_to(self.root)) for p in inputs)
        rec.finish(**metrics).save(self.path("records", f"{command}.json"))

    @staticmethod
    def _require(path, command):
        if not path.exists():
            raise ConfigError(f"missing {path}; run `recondetect {command}` first")
        return path

    # loaders: each fills the world from disk
    def load_models(self):
        for g in self.world.generator_ids:
            p = self._require(self.path("models", f"{g}.json"), "gen-data")
            self.world.models[g] = persist.load_model(p)
        return self

    def load_data(self):
        self.load_models()
        for g in self.world.generator_ids:
            self.world.datasets[g] = persist.load_dataset(self._require(self.path("data", f"{g}.npz"), "gen-data"))
        return self

    def load_autoencoders(self):
        self.load_data()
        for g in self.world.generator_ids:
            ae, latent = persist.load_autoencoder(self._require(self.path("autoencoders", f"{g}.json"), "train-ae"))
            self.world.aes[g], self.world.latent_models[g] = ae, latent
        return self

    def load_detectors(self):
        self.load_autoencoders()
        for k in KINDS:
            for g in self.world.generator_ids:
                p = self._require(self.path("detectors", f"{k}_{g}.json"), "train-detector")
                self.world.detectors[(k, g)] = Detector.from_dict(persist.load_checkpoint(p, "detector"),
                                                                  self.world.backbone(g))
        return self

    def eval_set(self, g, per_class):
        return self.world.test_set(g).take(per_class, seed=self.cfg.seed)


# -- parallel map ------------------------------------------------------------------------

def parallel_map(fn, items, workers=1):
    """Ordered map; results are identical for any worker count."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _attack_cell(args):
    det, ds, cfg = args
    return run_attack(det, ds.x, ds.y, cfg, ds.ids)


# -- commands ------------------------------------------------------------------------------

def cmd_train_score(ws: Workspace, args):
    mix = base_mixture(ws.cfg.world)
    for spec in ws.cfg.world.generators:
        model = make_generator(spec, mix, ws.world.schedule)
        persist.save_model(ws.path("models", f"{spec.id}.json"), model)
        print(f"trained {spec.id} ({spec.kind})")
    ws.record("train-score")


def cmd_gen_data(ws: Workspace, args):
    w = ws.world
    for g in w.generator_ids:
        p = ws.path("models", f"{g}.json")
        if p.exists():
            w.models[g] = persist.load_model(p)
    w.build_data()
    ws.path("data").mkdir(parents=True, exist_ok=True)
    np.savez(ws.path("data", "real.npz"), x=w.real)
    for g in w.generator_ids:
        persist.save_model(ws.path("models", f"{g}.json"), w.models[g])
        persist.save_dataset(ws.path("data", f"{g}.npz"), w.datasets[g])
        ds = w.datasets[g]
        print(f"{g}: {len(ds)} samples, balanced={ds.balanced}")
    ws.record("gen-data", n_per_class=ws.cfg.world.n_per_class)


def cmd_train_ae(ws: Workspace, args):
    ws.load_data()
    w = ws.world
    with np.load(ws._require(ws.path("data", "real.npz"), "gen-data")) as f:
        w.real = f["x"]
    w.build_autoencoders()
    for g in w.generator_ids:
        persist.save_autoencoder(ws.path("autoencoders", f"{g}.json"), w.aes[g], w.latent_models[g])
        print(f"autoencoder for {g} saved")
    ws.record("train-ae")


def cmd_train_detector(ws: Workspace, args):
    ws.load_autoencoders()
    rows = []
    for k in KINDS:
        for g in ws.world.generator_ids:
            det = ws.world.detector(k, g)
            persist.save_checkpoint(ws.path("detectors", f"{k}_{g}.json"), "detector", det.to_dict())
            m = evaluate(det, ws.world.test_set(g))
            rows.append({"detector": k, "generator": g, "accuracy": m["accuracy"], "auc": m.get("auc"),
                         "real_recall": m["real_recall"], "fake_recall": m["fake_recall"]})
            print(f"{det.id}: test accuracy {m['accuracy']:.3f}")
    ws.table("benign", rows)
    ws.record("train-detector", mean_accuracy=float(np.mean([r["accuracy"] for r in rows])))


def cmd_attack(ws: Workspace, args):
    ws.load_detectors()
    cfg = ws.cfg.attack_config()
    cells = [(k, g) for k in KINDS for g in ws.world.generator_ids]
    sets = {g: ws.eval_set(g, ws.cfg.eval_per_class) for g in ws.world.generator_ids}
    advs = parallel_map(_attack_cell, [(ws.world.detectors[c], sets[c[1]], cfg) for c in cells], args.workers)
    rows = []
    for (k, g), adv in zip(cells, advs):
        det, ds = ws.world.detectors[(k, g)], sets[g]
        adv.check()
        persist.save_adversarial(ws.path("adv", "whitebox", f"{k}_{g}.npz"), adv)
        noise = random_perturb(ds.x, cfg.epsilon, cfg.seed, ds.ids, ds.y)
        persist.save_adversarial(ws.path("adv", "noise", f"{k}_{g}.npz"), noise)
        clean, rob = evaluate(det, ds), evaluate(det, (adv.x_adv, ds.y))
        noisy = evaluate(det, (noise.x_adv, ds.y))
        rows.append({"detector": k, "generator": g, "variant": cfg.variant, "epsilon": cfg.epsilon,
                     "steps": cfg.steps, "clean_acc": clean["accuracy"], "robust_acc": rob["accuracy"],
                     "noise_acc": noisy["accuracy"], "robust_real_recall": rob["real_recall"],
                     "robust_fake_recall": rob["fake_recall"]})
        print(f"{det.id}: clean {clean['accuracy']:.3f}  attacked {rob['accuracy']:.3f}  noise {noisy['accuracy']:.3f}")
    ws.table("attack", rows)
    ws.record("attack", max_robust_acc=max(r["robust_acc"] for r in rows))


def cmd_transfer(ws: Workspace, args):
    ws.load_detectors()
    dets = ws.world.all_detectors()
    data = {g: ws.eval_set(g, ws.cfg.transfer["per_class"]) for g in ws.world.generator_ids}
    cfg = ws.cfg.attack_config()
    # craft each (surrogate, dataset) set once, possibly in parallel, then evaluate every target
    keys = [(s, g) for s in dets for g in data]
    advs = parallel_map(_attack_cell, [(dets[s], data[g], cfg) for s, g in keys], args.workers)
    crafted = dict(zip(keys, advs))
    for (s, g), adv in crafted.items():
        persist.save_adversarial(ws.path("adv", "transfer", f"{s[0]}_{s[1]}__{g}.npz"), adv)
    rows = []
    for t, tdet in dets.items():
        for s in dets:
            adv = crafted[(s, t[1])]
            rows.append({"surrogate": f"{s[0]}@{s[1]}", "target": f"{t[0]}@{t[1]}", "regime": regime_of(s, t),
                         "robust_acc": evaluate(tdet, (adv.x_adv, adv.y))["accuracy"]})
    ws.table("transfer", rows, ["surrogate", "target", "regime", "robust_acc"])
    summary = []
    for (sk, tk) in [(a, b) for a in KINDS for b in KINDS if a != b]:
        v = [r["robust_acc"] for r in rows if r["regime"] == "cross-both"
             and r["surrogate"].startswith(sk + "@") and r["target"].startswith(tk + "@")]
        summary.append({"surrogate": sk, "target": tk, "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)})
        print(f"cross-both {sk} -> {tk}: {np.mean(v):.3f} +- {np.std(v):.3f}")
    ws.table("transfer_cross_both", summary)
    ws.record("transfer", cells=len(rows))


def cmd_purify(ws: Workspace, args):
    ws.load_detectors()
    p = ws.cfg.purify
    atk = ws.cfg.attack_config(**p.get("attack", {}))
    rows = []
    for k in p["kinds"]:
        for g in ws.world.generator_ids:
            det, ds = ws.world.detectors[(k, g)], ws.eval_set(g, p["per_class"])
            adv = run_attack(det, ds.x, ds.y, atk, ds.ids)
            base = {"benign": evaluate(det, ds)["accuracy"], "adversarial": evaluate(det, (adv.x_adv, ds.y))["accuracy"]}
            for ratio in p["ratios"]:
                for inp, x in (("benign", ds.x), ("adversarial", adv.x_adv)):
                    xp = purify(x, PurifyConfig(ratio, seed=ws.cfg.seed, source=g), ws.world.models[g],
                                ws.world.schedule, ds.ids)
                    m = evaluate(det, (xp, ds.y))
                    rows.append({"detector": k, "generator": g, "input": inp, "ratio": ratio,
                                 "unpurified_acc": base[inp], "accuracy": m["accuracy"],
                                 "real_recall": m["real_recall"], "fake_recall": m["fake_recall"]})
            print(f"{det.id}: purified benign "
                  + " ".join(f"{r['accuracy']:.2f}" for r in rows[-2 * len(p['ratios']):] if r["input"] == "benign"))
    ws.table("purify", rows)
    ws.record("purify", rows=len(rows))


def cmd_advtrain(ws: Workspace, args):
    ws.load_detectors()
    a = ws.cfg.advtrain
    train = ClassifierTrainConfig(**{**asdict(ws.cfg.world.classifier), "epochs": a.get("epochs", 30)})
    rows, grid_rows = [], []
    for g in a["generators"]:
        for k in ("DIRE", "LaRE2"):
            det = ws.world.detectors[(k, g)]
            hard, results = at_grid_search(det, ws.world.datasets[g], train=train, seed=ws.cfg.seed,
                                           val_per_class=a.get("val_per_class", 100))
            persist.save_checkpoint(ws.path("hardened", f"{k}_{g}.json"), "detector", hard.to_dict())
            grid_rows += [{"detector": k, "generator": g, **r} for r in results]
            test = ws.world.test_set(g).take(a["per_class"], seed=ws.cfg.seed)
            before = evaluate_defense(det, test, ws.cfg.attack_config())
            after = evaluate_defense(hard, test, ws.cfg.attack_config())
            rows.append({"detector": k, "generator": g, "clean_acc_before": before["clean_acc"],
                         "robust_acc_before": before["robust_acc"], "clean_acc": after["clean_acc"],
                         "robust_acc": after["robust_acc"], "real_recall": after["robust_real_recall"],
                         "fake_recall": after["robust_fake_recall"]})
            print(f"hardened {hard.id}: clean {after['clean_acc']:.3f} robust {after['robust_acc']:.3f}")
    ws.table("advtrain_grid", grid_rows)
    ws.table("advtrain", rows)
    ws.record("advtrain", rows=len(rows))


def cmd_analyze_rho(ws: Workspace, args):
    ws.load_detectors()
    r = ws.cfg.rho
    atk = ws.cfg.attack_config(steps=r["steps"])
    ids = ws.world.generator_ids
    records, summary = [], []
    for k in KINDS:
        for i, g in enumerate(ids):
            det = ws.world.detectors[(k, g)]
            ood = ws.world.detectors[(k, ids[(i + 1) % len(ids)])]
            ds = ws.eval_set(g, r["per_class"])
            stats = rho_hierarchy(det, ds.x, ds.y, ds.ids, ood, atk, ws.cfg.seed)
            means = {reg: stats[reg].mean for reg in REGIMES}
            for reg in REGIMES:
                records += [{"detector": det.id, **rec} for rec in stats[reg].records()]
            summary.append({"detector": k, "generator": g, **{f"mu_{reg}": means[reg] for reg in REGIMES},
                            "holds": means[REGIMES[0]] >= means[REGIMES[1]] >= means[REGIMES[2]],
                            "n_undefined": sum(s.n_undefined for s in stats.values())})
            print(f"{det.id}: " + "  ".join(f"{reg} {means[reg]:.3g}" for reg in REGIMES))
    ws.table("rho", records, ["detector", "id", "regime", "class", "rho"])
    ws.table("rho_summary", summary)
    ws.record("analyze-rho", cells_holding=sum(s["holds"] for s in summary))


def cmd_collapse(ws: Workspace, args):
    ws.load_detectors()
    n = ws.cfg.collapse["n"]
    rows = [{"detector": det.id, "fraction_real": collapse_probe(det, n, ws.cfg.seed), "n": n, "seed": ws.cfg.seed}
            for det in ws.world.all_detectors().values()]
    for r in rows:
        print(f"{r['detector']}: {r['fraction_real']:.3f} of uniform inputs labelled Real")
    ws.table("collapse", rows, ["detector", "fraction_real", "n", "seed"])
    ws.record("collapse")


def cmd_verify(ws: Workspace, args):
    checks = run_all(ws.root if ws.root.exists() else None, ws.cfg.seed)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 3 if failed else 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train-score": cmd_train_score, "train-ae": cmd_train_ae,
    "train-detector": cmd_train_detector, "attack": cmd_attack, "transfer": cmd_transfer,
    "purify": cmd_purify, "advtrain": cmd_advtrain, "analyze-rho": cmd_analyze_rho,
    "collapse": cmd_collapse, "verify": cmd_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="recondetect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override world.seed")
        p.add_argument("--out", default="workspace", help="workspace directory")
        p.add_argument("--workers", type=int, default=1, help="process count for independent cells")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, args.seed)
        ws = Workspace(args.out, cfg)
        if args.command != "verify":
            ws.write_config()
        code = COMMANDS[args.command](ws, args)
        return int(code or 0)
    except TestbedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
